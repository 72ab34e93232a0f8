"""Deterministic symbolic gatekeeper for proposed tool calls.

Checks run in a fixed order (action compliance, schema conformance,
coreference consistency) and every violation found is reported, not just the
first. Nothing here calls a generative model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

from .errors import InternalFault
from .schema import CATEGORICAL, DATE, FREEFORM, NUMBER, TIME, Schema
from .state import NULL_SENTINEL
from .tools import (
    TOOL_NAMES,
    IntentAccepted,
    ShortCircuit,
    SlotExtraction,
    ToolCall,
    ToolId,
    parse_extractions,
)

if TYPE_CHECKING:
    from .engine import AgentTrace

TIME_RE = re.compile(r"^([01][0-9]|2[0-3]):[0-5][0-9]$")
DATE_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")
NUMBER_RE = re.compile(r"^\d+$")

# Accepted for any slot regardless of type.
SPECIAL_VALUES = frozenset({NULL_SENTINEL, "dontcare"})


class ViolationCategory(str, Enum):
    ACTION_COMPLIANCE = "action_compliance"
    SCHEMA_CONFORMANCE = "schema_conformance"
    COREFERENCE_CONSISTENCY = "coreference_consistency"


class ViolationCode(str, Enum):
    UNDEFINED_TOOL = "UndefinedTool"
    MISSING_PREREQUISITE_IC = "MissingPrerequisiteIC"
    DUPLICATE_CALL = "DuplicateCall"
    PARSE_FAILURE = "ParseFailure"
    UNKNOWN_INTENT = "UnknownIntent"
    UNKNOWN_SLOT = "UnknownSlot"
    ENUM_VIOLATION = "EnumViolation"
    FORMAT_VIOLATION = "FormatViolation"
    GENERIC_REFERENCE = "GenericReference"


CATEGORY_OF: Dict[ViolationCode, ViolationCategory] = {
    ViolationCode.UNDEFINED_TOOL: ViolationCategory.ACTION_COMPLIANCE,
    ViolationCode.MISSING_PREREQUISITE_IC: ViolationCategory.ACTION_COMPLIANCE,
    ViolationCode.DUPLICATE_CALL: ViolationCategory.ACTION_COMPLIANCE,
    ViolationCode.PARSE_FAILURE: ViolationCategory.ACTION_COMPLIANCE,
    ViolationCode.UNKNOWN_INTENT: ViolationCategory.SCHEMA_CONFORMANCE,
    ViolationCode.UNKNOWN_SLOT: ViolationCategory.SCHEMA_CONFORMANCE,
    ViolationCode.ENUM_VIOLATION: ViolationCategory.SCHEMA_CONFORMANCE,
    ViolationCode.FORMAT_VIOLATION: ViolationCategory.SCHEMA_CONFORMANCE,
    ViolationCode.GENERIC_REFERENCE: ViolationCategory.COREFERENCE_CONSISTENCY,
}

PARSE_FAILURE_MESSAGE = "could not parse action; follow the Thought/Action/Action Input format"


@dataclass(frozen=True)
class Violation:
    code: ViolationCode
    subject: str
    message: str

    def __post_init__(self) -> None:
        if not self.message:
            raise InternalFault("violation message must be non-empty")

    @property
    def category(self) -> ViolationCategory:
        return CATEGORY_OF[self.code]

    def to_json(self) -> Dict[str, str]:
        return {
            "category": self.category.value,
            "code": self.code.value,
            "subject": self.subject,
            "message": self.message,
        }

    @classmethod
    def from_json(cls, doc) -> "Violation":
        return cls(ViolationCode(doc["code"]), doc.get("subject", ""), doc["message"])


@dataclass(frozen=True)
class ValidationOutcome:
    violations: Tuple[Violation, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.passed


PASS = ValidationOutcome()


def fail(violations: Sequence[Violation]) -> ValidationOutcome:
    if not violations:
        raise InternalFault("a failing outcome needs at least one violation")
    return ValidationOutcome(tuple(violations))


# -- message templates ------------------------------------------------------


def _v(code: ViolationCode, subject: str, message: str) -> Violation:
    return Violation(code, subject, message)


def undefined_tool(name: str) -> Violation:
    return _v(
        ViolationCode.UNDEFINED_TOOL,
        name,
        f"undefined tool {name}: use one of {', '.join(TOOL_NAMES)}",
    )


def parse_failure() -> Violation:
    return _v(ViolationCode.PARSE_FAILURE, "", PARSE_FAILURE_MESSAGE)


def _format_hint(kind: str) -> str:
    return {
        TIME: "expected HH:MM",
        DATE: "expected YYYY-MM-DD",
        NUMBER: "expected a non-negative integer",
    }.get(kind, "expected a non-empty value")


# -- checks -----------------------------------------------------------------


def _turn_facts(trace: Optional["AgentTrace"]):
    """(active intent, short-circuit intent, executed call keys) for the current turn."""
    active = None
    short = None
    executed = set()
    for step in trace.steps if trace is not None else ():
        if step.call is None or not step.outcome.passed or step.result is None:
            continue
        executed.add((step.call.name, step.call.canonical_args()))
        if isinstance(step.result, IntentAccepted):
            active = step.result.intent_id
        elif isinstance(step.result, ShortCircuit):
            short = step.result.intent_id
    return active, short, executed


def check_action_compliance(call: ToolCall, trace: Optional["AgentTrace"]) -> List[Violation]:
    if call.tool is None:
        return [undefined_tool(call.name)]
    active, short, executed = _turn_facts(trace)
    out = []
    if short is not None:
        out.append(
            _v(
                ViolationCode.MISSING_PREREQUISITE_IC,
                call.name,
                f"turn already closed by non-transactional intent {short}: no further tool calls",
            )
        )
    elif call.tool is ToolId.SLOT_RESOLVE and active is None:
        out.append(
            _v(
                ViolationCode.MISSING_PREREQUISITE_IC,
                call.name,
                "slot_resolve called before intent_classify: call intent_classify first",
            )
        )
    if (call.name, call.canonical_args()) in executed:
        out.append(
            _v(
                ViolationCode.DUPLICATE_CALL,
                call.name,
                f"duplicate call to {call.name} with identical arguments in this turn: do not repeat it",
            )
        )
    return out


def _unknown_intent(intent_id: str, schema: Schema) -> Violation:
    return _v(
        ViolationCode.UNKNOWN_INTENT,
        intent_id,
        f"unknown intent {intent_id}: valid intents are {', '.join(schema.intent_ids)}",
    )


def check_schema_conformance(
    extractions: Sequence[SlotExtraction], intent_id: str, schema: Schema
) -> List[Violation]:
    if not schema.has_intent(intent_id):
        return [_unknown_intent(intent_id, schema)]
    slots = {s.id: s for s in schema.intent(intent_id).slots}
    out = []
    for e in extractions:
        slot = slots.get(e.slot_id)
        if slot is None:
            out.append(
                _v(
                    ViolationCode.UNKNOWN_SLOT,
                    e.slot_id,
                    f"unknown slot {e.slot_id} for intent {intent_id}: valid slots are "
                    + (", ".join(slots) or "(none)"),
                )
            )
            continue
        if not e.raw.strip():
            out.append(
                _v(
                    ViolationCode.FORMAT_VIOLATION,
                    e.slot_id,
                    f"invalid format for slot {e.slot_id}: raw must quote the text as it appears in the dialogue",
                )
            )
        norm = e.norm.strip()
        if norm.lower() in SPECIAL_VALUES:
            continue
        kind = slot.slot_type.kind
        if kind == CATEGORICAL:
            if not slot.slot_type.accepts(norm):
                out.append(
                    _v(
                        ViolationCode.ENUM_VIOLATION,
                        e.slot_id,
                        f"invalid value {norm!r} for slot {e.slot_id}: expected one of "
                        + ", ".join(slot.slot_type.values),
                    )
                )
            continue
        pattern = {TIME: TIME_RE, DATE: DATE_RE, NUMBER: NUMBER_RE}.get(kind)
        if (pattern is not None and not pattern.match(norm)) or (kind == FREEFORM and not norm):
            out.append(
                _v(
                    ViolationCode.FORMAT_VIOLATION,
                    e.slot_id,
                    f"invalid format for slot {e.slot_id}: {_format_hint(kind)}",
                )
            )
    return out


def check_coreference(extractions: Sequence[SlotExtraction], schema: Schema) -> List[Violation]:
    out = []
    for e in extractions:
        terms = schema.generic_terms.get(e.slot_id)
        if not terms:
            continue
        slot = schema.slot(e.slot_id)
        if slot is not None and slot.slot_type.kind != FREEFORM:
            continue
        if e.norm.strip().lower() in terms:
            out.append(
                _v(
                    ViolationCode.GENERIC_REFERENCE,
                    e.slot_id,
                    f"generic reference {e.norm.strip()!r} for slot {e.slot_id}: give the actual entity name; "
                    "call history_retrieve to find it in earlier turns",
                )
            )
    return out


def validate(call: ToolCall, turn_trace: Optional["AgentTrace"], schema: Schema) -> ValidationOutcome:
    violations = check_action_compliance(call, turn_trace)
    tool = call.tool
    if tool is None:
        return fail(violations)
    args = call.arguments if isinstance(call.arguments, dict) else {}

    extractions = None
    if tool is ToolId.INTENT_CLASSIFY:
        intent_id = args.get("intent")
        if not isinstance(intent_id, str) or not schema.has_intent(intent_id):
            violations.append(_unknown_intent(str(intent_id) if intent_id is not None else "", schema))
    elif tool is ToolId.SLOT_RESOLVE:
        extractions = parse_extractions(args)
        if extractions is None:
            violations.append(
                _v(
                    ViolationCode.FORMAT_VIOLATION,
                    call.name,
                    f"invalid arguments for {call.name}: expected "
                    '{"extractions": [{"slot": ..., "raw": ..., "norm": ...}]}',
                )
            )
        else:
            active, _, _ = _turn_facts(turn_trace)
            if active is not None:
                violations.extend(check_schema_conformance(extractions, active, schema))
    else:
        n = args.get("n")
        if isinstance(n, bool) or not isinstance(n, int) or n < 1:
            violations.append(
                _v(
                    ViolationCode.FORMAT_VIOLATION,
                    call.name,
                    f"invalid arguments for {call.name}: n must be an integer >= 1",
                )
            )

    if extractions:
        violations.extend(check_coreference(extractions, schema))
    return fail(violations) if violations else PASS


def render_feedback(outcome: ValidationOutcome) -> str:
    if outcome.passed:
        raise InternalFault("render_feedback called on a passing outcome")
    return "\n".join(v.message for v in outcome.violations)
