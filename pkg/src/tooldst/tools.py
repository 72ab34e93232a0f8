"""The tool library: intent classification, slot resolution and history retrieval."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .errors import InternalFault, InvalidArgument
from .schema import CATEGORICAL, DATE, FREEFORM, NUMBER, TIME, Schema, SlotDef
from .state import SlotValue, StateUpdate

log = logging.getLogger(__name__)


class ToolId(str, Enum):
    INTENT_CLASSIFY = "intent_classify"
    SLOT_RESOLVE = "slot_resolve"
    HISTORY_RETRIEVE = "history_retrieve"


TOOL_NAMES = tuple(t.value for t in ToolId)

TOOL_SIGNATURES = {
    ToolId.INTENT_CLASSIFY: '{"intent": "<intent id>"}',
    ToolId.SLOT_RESOLVE: '{"extractions": [{"slot": "<slot id>", "raw": "<surface form>", "norm": "<canonical value>"}]}',
    ToolId.HISTORY_RETRIEVE: '{"n": <number of previous turns>}',
}

TOOL_DESCRIPTIONS = {
    ToolId.INTENT_CLASSIFY: "Classify the user's intent. Returns the slot definitions of that intent.",
    ToolId.SLOT_RESOLVE: (
        "Submit the slots newly mentioned or changed in this turn. raw is the text as it appears "
        "in the dialogue, norm is its canonical value. Use \"<none>\" as norm to remove a slot. "
        "An empty list means nothing changed."
    ),
    ToolId.HISTORY_RETRIEVE: "Fetch the last n user/system turn pairs when the current turn refers back to earlier context.",
}

# JSON-schema parameter blocks for native tool calling.
TOOL_PARAMETERS: Dict[ToolId, Dict[str, Any]] = {
    ToolId.INTENT_CLASSIFY: {
        "type": "object",
        "properties": {"intent": {"type": "string"}},
        "required": ["intent"],
    },
    ToolId.SLOT_RESOLVE: {
        "type": "object",
        "properties": {
            "extractions": {
                "type": "array",
                "items": {
                    "type": "object",
                    "properties": {
                        "slot": {"type": "string"},
                        "raw": {"type": "string"},
                        "norm": {"type": "string"},
                    },
                    "required": ["slot", "raw", "norm"],
                },
            }
        },
        "required": ["extractions"],
    },
    ToolId.HISTORY_RETRIEVE: {
        "type": "object",
        "properties": {"n": {"type": "integer", "minimum": 1}},
        "required": ["n"],
    },
}


def tool_signatures() -> List[Dict[str, Any]]:
    """Chat-completions ``tools`` payload."""
    return [
        {
            "type": "function",
            "function": {
                "name": t.value,
                "description": TOOL_DESCRIPTIONS[t],
                "parameters": TOOL_PARAMETERS[t],
            },
        }
        for t in ToolId
    ]


def resolve_tool(name: str) -> Optional[ToolId]:
    try:
        return ToolId(name)
    except ValueError:
        return None


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: Mapping[str, Any] = field(default_factory=dict)
    step_index: int = 0

    @property
    def tool(self) -> Optional[ToolId]:
        """The resolved tool, or None for a name outside the library."""
        return resolve_tool(self.name)

    def canonical_args(self) -> str:
        return json.dumps(self.arguments, sort_keys=True, ensure_ascii=False, default=str)


@dataclass(frozen=True)
class SlotExtraction:
    slot_id: str
    raw: str
    norm: str

    def to_json(self) -> Dict[str, str]:
        return {"slot": self.slot_id, "raw": self.raw, "norm": self.norm}


@dataclass(frozen=True)
class IntentAccepted:
    intent_id: str
    slot_defs_rendered: str

    def render(self) -> str:
        return f"Intent {self.intent_id} accepted. Slots for this intent:\n{self.slot_defs_rendered}"


@dataclass(frozen=True)
class ShortCircuit:
    intent_id: str

    def render(self) -> str:
        return f"Intent {self.intent_id} is non-transactional. Turn closed without slot resolution."


@dataclass(frozen=True)
class SlotCandidates:
    extractions: Tuple[SlotExtraction, ...]

    def render(self) -> str:
        if not self.extractions:
            return "No slot changes recorded."
        return "Recorded: " + ", ".join(f"{e.slot_id}={e.norm}" for e in self.extractions)

    def to_update(self, turn: int = 0) -> StateUpdate:
        changes: Dict[str, SlotValue] = {}
        for e in self.extractions:
            if e.slot_id in changes:
                log.warning("duplicate extraction for %s; keeping the last one", e.slot_id)
            changes[e.slot_id] = SlotValue(raw=e.raw, norm=e.norm, source_turn=turn)
        return StateUpdate(changes)


@dataclass(frozen=True)
class History:
    turns_rendered: str

    def render(self) -> str:
        return self.turns_rendered


ToolResult = Union[IntentAccepted, ShortCircuit, SlotCandidates, History]


def render_slot_type(slot: SlotDef) -> str:
    kind = slot.slot_type.kind
    if kind == CATEGORICAL:
        return "categorical, one of: " + ", ".join(slot.slot_type.values)
    if kind == TIME:
        return "time, HH:MM 24-hour"
    if kind == DATE:
        return "date, YYYY-MM-DD"
    if kind == NUMBER:
        return "number, non-negative integer"
    assert kind == FREEFORM
    return "free text"


def render_slot_defs(slots: Sequence[SlotDef]) -> str:
    """Fixed template, one line per slot: ``- id | description | type/constraints | role``."""
    if not slots:
        return "(no slots)"
    return "\n".join(
        f"- {s.id} | {s.description} | {render_slot_type(s)} | {s.role}" for s in slots
    )


def parse_extractions(args: Mapping[str, Any]) -> Optional[List[SlotExtraction]]:
    """Extractions from slot_resolve arguments, or None when the shape is wrong."""
    items = args.get("extractions") if isinstance(args, Mapping) else None
    if not isinstance(items, list):
        return None
    out = []
    for item in items:
        if not isinstance(item, Mapping):
            return None
        slot, raw, norm = item.get("slot"), item.get("raw"), item.get("norm")
        if not all(isinstance(x, str) for x in (slot, raw, norm)):
            return None
        out.append(SlotExtraction(slot.strip().lower(), raw, norm.strip()))
    return out


def execute_intent_classify(args: Mapping[str, Any], schema: Schema) -> ToolResult:
    intent_id = args.get("intent") if isinstance(args, Mapping) else None
    if not isinstance(intent_id, str) or not schema.has_intent(intent_id):
        raise InternalFault(f"intent_classify executed with unvalidated intent {intent_id!r}")
    intent = schema.intent(intent_id)
    if not intent.transactional:
        return ShortCircuit(intent_id)
    return IntentAccepted(intent_id, render_slot_defs(intent.slots))


def execute_slot_resolve(args: Mapping[str, Any], active_intent: Optional[str], schema: Schema) -> SlotCandidates:
    extractions = parse_extractions(args)
    if extractions is None:
        raise InternalFault("slot_resolve executed with malformed arguments")
    return SlotCandidates(tuple(extractions))


@dataclass(frozen=True)
class DialogueTurn:
    user: str
    system: str = ""


def render_turns(turns: Sequence[DialogueTurn]) -> str:
    if not turns:
        return "(no earlier turns)"
    lines = []
    for t in turns:
        lines.append(f"User: {t.user}")
        if t.system:
            lines.append(f"System: {t.system}")
    return "\n".join(lines)


def execute_history_retrieve(args: Mapping[str, Any], dialogue: Sequence[DialogueTurn]) -> History:
    """Last ``n`` user/system pairs of ``dialogue``, oldest first, verbatim."""
    n = args.get("n") if isinstance(args, Mapping) else None
    if isinstance(n, bool) or not isinstance(n, int):
        raise InvalidArgument(f"n must be an integer, got {n!r}")
    if n < 1:
        raise InvalidArgument(f"n must be >= 1, got {n}")
    return History(render_turns(list(dialogue)[-n:]))
