"""Bounded ReAct loop: one turn of tool calls, gated by the validator, with a deferred commit."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .backend import (
    CompletionBackend,
    CompletionRequest,
    CompletionResult,
    Message,
    complete_with_retry,
)
from .errors import BackendError, InvalidArgument, ParseFailure
from .schema import Schema
from .state import EMPTY_UPDATE, BeliefState, StateUpdate, apply_update
from .tools import (
    TOOL_DESCRIPTIONS,
    TOOL_SIGNATURES,
    DialogueTurn,
    History,
    IntentAccepted,
    ShortCircuit,
    SlotCandidates,
    ToolCall,
    ToolId,
    ToolResult,
    execute_history_retrieve,
    execute_intent_classify,
    execute_slot_resolve,
    parse_extractions,
    tool_signatures,
)
from .validator import (
    PARSE_FAILURE_MESSAGE,
    PASS,
    ValidationOutcome,
    Violation,
    check_coreference,
    check_schema_conformance,
    fail,
    parse_failure,
    render_feedback,
    validate,
)

log = logging.getLogger(__name__)


class Mode(str, Enum):
    FULL = "full"
    NOLOOP = "noloop"
    NOVALIDATOR = "novalidator"


@dataclass(frozen=True)
class EngineConfig:
    k_max: int = 6
    temperature: float = 0.0
    mode: Mode = Mode.FULL
    max_output_tokens: int = 1024
    retries: int = 2
    backoff: float = 0.5

    def __post_init__(self) -> None:
        if self.k_max < 1:
            raise InvalidArgument("k_max must be >= 1")
        object.__setattr__(self, "mode", Mode(self.mode))

    def to_json(self) -> Dict[str, Any]:
        return {
            "mode": self.mode.value,
            "k_max": self.k_max,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
        }


@dataclass(frozen=True)
class TurnContext:
    user_utterance: str
    prev_system_action: str = ""
    prev_state: BeliefState = field(default_factory=BeliefState)
    prev_intents: Tuple[str, ...] = ()
    dialogue_log: Tuple[DialogueTurn, ...] = ()
    dialogue_id: str = ""
    turn: int = 0

    def __post_init__(self) -> None:
        if not self.user_utterance.strip():
            raise InvalidArgument("user utterance must be non-empty")


_RESULT_KIND = {
    IntentAccepted: "intent_accepted",
    ShortCircuit: "short_circuit",
    SlotCandidates: "slot_candidates",
    History: "history",
}


@dataclass
class AgentStep:
    thought: str
    call: Optional[ToolCall]
    outcome: ValidationOutcome
    result: Optional[ToolResult] = None
    output_tokens: int = 0
    observation: Optional[str] = None
    feedback: bool = False

    def to_json(self, index: int) -> Dict[str, Any]:
        return {
            "step": index,
            "thought": self.thought,
            "tool": self.call.name if self.call is not None else None,
            "args": dict(self.call.arguments) if self.call is not None else None,
            "validation": [dict(v.to_json(), step=index) for v in self.outcome.violations],
            "result": _RESULT_KIND.get(type(self.result)) if self.result is not None else None,
            "observation": self.observation,
            "feedback": self.feedback,
            "output_tokens": self.output_tokens,
        }


@dataclass
class AgentTrace:
    steps: List[AgentStep] = field(default_factory=list)

    @property
    def violations(self) -> List[Violation]:
        return [v for s in self.steps for v in s.outcome.violations]


@dataclass
class TurnOutcome:
    delta: StateUpdate
    new_state: BeliefState
    intent: str
    trace: AgentTrace
    degraded: bool
    llm_calls: int
    output_tokens: int = 0
    committed: bool = False
    error: Optional[str] = None


# -- prompts ----------------------------------------------------------------

TEXT_FORMAT = (
    "Reply with exactly one step in this format:\n"
    "Thought: <your reasoning>\n"
    "Action: <tool name>\n"
    "Action Input: <arguments as a single-line JSON object>"
)
NATIVE_FORMAT = "Reply with your reasoning followed by exactly one tool call."


def build_system_prompt(schema: Schema, native: bool = False) -> str:
    """Role, protocol, intent list and tool signatures. Never slot definitions or history."""
    fb = schema.fallback_intent_id
    lines = [
        "You are the language-understanding component of a task-oriented dialogue system.",
        "You keep track of the user's goal as a belief state of slot values, one user turn at a time.",
        "Each reply makes exactly one tool call.",
        "",
        "Protocol:",
        "1. Call intent_classify with the intent of the current user turn. It returns the slot definitions of that intent.",
        "2. Call slot_resolve with only the slots that are new or changed in this turn. Slots already in the state need not be repeated.",
        f"If the intent is {fb}, stop after intent_classify.",
        "If the user accepts something the system proposed in its previous utterance, take the value from that utterance.",
        "If the user refers to an entity mentioned in earlier turns, call history_retrieve before slot_resolve.",
        "If a tool call is rejected, read the error, fix the call and try again.",
        "",
        "Intents:",
    ]
    for intent in schema.intents:
        lines.append(f"- {intent.id}: {intent.description}")
    lines += ["", "Tools:"]
    for tool in ToolId:
        lines.append(f"- {tool.value}: {TOOL_DESCRIPTIONS[tool]}")
        lines.append(f"  arguments: {TOOL_SIGNATURES[tool]}")
    lines += ["", NATIVE_FORMAT if native else TEXT_FORMAT]
    return "\n".join(lines)


def render_state(state: BeliefState) -> str:
    if not state.entries:
        return "state: (empty)"
    return "state:\n" + "\n".join(f"- {k}: {v.norm}" for k, v in state.entries.items())


def build_turn_message(ctx: TurnContext) -> str:
    return "\n".join(
        [
            f"Previous system utterance: {ctx.prev_system_action or '(none)'}",
            f"Previous intents: {', '.join(ctx.prev_intents) if ctx.prev_intents else '(none)'}",
            render_state(ctx.prev_state),
            f"User: {ctx.user_utterance}",
        ]
    )


# -- parsing ----------------------------------------------------------------

_ACTION_RE = re.compile(r"^\s*Action\s*:\s*(.+?)\s*$", re.MULTILINE)
_INPUT_RE = re.compile(r"^\s*Action Input\s*:\s*(.*)$", re.MULTILINE | re.DOTALL)
_THOUGHT_RE = re.compile(r"Thought\s*:\s*(.*?)(?=^\s*Action\s*:)", re.MULTILINE | re.DOTALL)
_FENCE_RE = re.compile(r"^```(?:json)?\s*|\s*```$")


def _decode_args(blob: Any) -> Dict[str, Any]:
    if isinstance(blob, dict):
        return blob
    if not isinstance(blob, str):
        raise ParseFailure("arguments are neither an object nor a JSON string")
    text = _FENCE_RE.sub("", blob.strip())
    cut = text.find("\nObservation:")
    if cut >= 0:
        text = text[:cut]
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        first = text.splitlines()[0] if text else ""
        try:
            value = json.loads(first)
        except json.JSONDecodeError as exc:
            raise ParseFailure(f"Action Input is not JSON: {exc}") from exc
    if not isinstance(value, dict):
        raise ParseFailure("Action Input must be a JSON object")
    return value


def parse_agent_step(raw: CompletionResult, step_index: int = 0) -> Tuple[str, ToolCall]:
    """Turn one backend step into (thought, call). Raises ParseFailure on malformed output."""
    if raw.native_calls:
        if len(raw.native_calls) > 1:
            log.warning("%d native calls in one step; using the first", len(raw.native_calls))
        nc = raw.native_calls[0]
        return (raw.text or "").strip(), ToolCall(nc.name.strip(), _decode_args(nc.arguments), step_index)
    text = raw.text or ""
    action = _ACTION_RE.search(text)
    args = _INPUT_RE.search(text)
    if action is None or args is None or args.start() < action.start():
        raise ParseFailure("missing Action / Action Input lines")
    thought_m = _THOUGHT_RE.search(text)
    thought = thought_m.group(1).strip() if thought_m else text[: action.start()].strip()
    name = action.group(1).strip().strip("`\"'")
    return thought, ToolCall(name, _decode_args(args.group(1)), step_index)


# -- loop -------------------------------------------------------------------


class _Conversation:
    """Message list for one turn, aware of text vs native tool-call encoding."""

    def __init__(self, system: str, user: str, native: bool):
        self.native = native
        self.messages: List[Message] = [Message("system", system), Message("user", user)]

    def add_step(self, raw: CompletionResult, observation: str, step_index: int) -> None:
        if self.native and raw.native_calls:
            nc = raw.native_calls[0]
            call_id = nc.id or f"call_{step_index}"
            args = nc.arguments if isinstance(nc.arguments, str) else json.dumps(nc.arguments, ensure_ascii=False)
            self.messages.append(
                Message(
                    "assistant",
                    raw.text or "",
                    tool_calls=({"id": call_id, "type": "function", "function": {"name": nc.name, "arguments": args}},),
                )
            )
            self.messages.append(Message("tool", observation, tool_call_id=call_id))
        else:
            self.messages.append(Message("assistant", raw.text or ""))
            self.messages.append(Message("user", f"Observation: {observation}"))


def _request(conv_messages: Sequence[Message], backend: CompletionBackend, config: EngineConfig, label: str) -> CompletionRequest:
    return CompletionRequest(
        messages=tuple(conv_messages),
        tool_signatures=tuple(tool_signatures()) if backend.native_tools else None,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
        label=label,
    )


def _runtime_error(call: ToolCall, schema: Schema) -> Optional[str]:
    """Why ``call`` cannot execute at all. Only consulted when the validator is off."""
    tool = call.tool
    if tool is None:
        return f"tool error: no tool named {call.name}"
    if tool is ToolId.INTENT_CLASSIFY:
        intent = call.arguments.get("intent")
        if not isinstance(intent, str) or not schema.has_intent(intent):
            return f"tool error: cannot classify into {intent!r}"
    elif tool is ToolId.SLOT_RESOLVE:
        if parse_extractions(call.arguments) is None:
            return "tool error: malformed slot_resolve arguments"
    else:
        n = call.arguments.get("n")
        if isinstance(n, bool) or not isinstance(n, int) or n < 1:
            return "tool error: malformed history_retrieve arguments"
    return None


def _label(ctx: TurnContext, k: int) -> str:
    return f"{ctx.dialogue_id}:{ctx.turn}:{k}"


def run_turn(
    ctx: TurnContext,
    schema: Schema,
    backend: CompletionBackend,
    config: EngineConfig = EngineConfig(),
    sleep=None,
) -> TurnOutcome:
    if config.mode is Mode.NOLOOP:
        return _run_turn_noloop(ctx, schema, backend, config, sleep)

    use_validator = config.mode is Mode.FULL
    conv = _Conversation(
        build_system_prompt(schema, native=backend.native_tools),
        build_turn_message(ctx),
        backend.native_tools,
    )
    trace = AgentTrace()
    calls = tokens = 0
    active_intent: Optional[str] = None
    error = None
    retry_kwargs = {"retries": config.retries, "backoff": config.backoff}
    if sleep is not None:
        retry_kwargs["sleep"] = sleep

    for k in range(config.k_max):
        req = _request(conv.messages, backend, config, _label(ctx, k))
        try:
            raw = complete_with_retry(backend, req, **retry_kwargs)
        except BackendError as exc:
            error = f"{type(exc).__name__}: {exc}"
            log.warning("turn %s:%s degraded by backend error: %s", ctx.dialogue_id, ctx.turn, exc)
            break
        calls += 1
        tokens += raw.output_tokens

        try:
            thought, call = parse_agent_step(raw, k)
        except ParseFailure:
            trace.steps.append(
                AgentStep(
                    thought=(raw.text or "").strip(),
                    call=None,
                    outcome=fail([parse_failure()]),
                    output_tokens=raw.output_tokens,
                    observation=PARSE_FAILURE_MESSAGE,
                    feedback=True,
                )
            )
            conv.add_step(raw, PARSE_FAILURE_MESSAGE, k)
            continue

        if use_validator:
            outcome = validate(call, trace, schema)
            if not outcome.passed:
                feedback = render_feedback(outcome)
                trace.steps.append(AgentStep(thought, call, outcome, None, raw.output_tokens, feedback, True))
                conv.add_step(raw, feedback, k)
                continue
        else:
            outcome = PASS
            problem = _runtime_error(call, schema)
            if problem is not None:
                trace.steps.append(AgentStep(thought, call, outcome, None, raw.output_tokens, problem, False))
                conv.add_step(raw, problem, k)
                continue

        tool = call.tool
        if tool is ToolId.INTENT_CLASSIFY:
            result = execute_intent_classify(call.arguments, schema)
            step = AgentStep(thought, call, outcome, result, raw.output_tokens, result.render())
            trace.steps.append(step)
            if isinstance(result, ShortCircuit):
                return TurnOutcome(
                    EMPTY_UPDATE, ctx.prev_state, result.intent_id, trace, False, calls, tokens, committed=False
                )
            active_intent = result.intent_id
            conv.add_step(raw, step.observation, k)
        elif tool is ToolId.HISTORY_RETRIEVE:
            result = execute_history_retrieve(call.arguments, ctx.dialogue_log)
            step = AgentStep(thought, call, outcome, result, raw.output_tokens, result.render())
            trace.steps.append(step)
            conv.add_step(raw, step.observation, k)
        else:
            result = execute_slot_resolve(call.arguments, active_intent, schema)
            delta = result.to_update(ctx.turn)
            trace.steps.append(AgentStep(thought, call, outcome, result, raw.output_tokens, result.render()))
            new_state = apply_update(ctx.prev_state, delta, ctx.turn)
            return TurnOutcome(
                delta, new_state, active_intent or "", trace, False, calls, tokens, committed=True
            )

    return TurnOutcome(
        EMPTY_UPDATE, ctx.prev_state, active_intent or "", trace, True, calls, tokens, committed=False, error=error
    )


NOLOOP_IC_INSTRUCTION = "Call intent_classify for the current user turn."
NOLOOP_SR_INSTRUCTION = "Call slot_resolve with the slots that are new or changed in this turn."


def _run_turn_noloop(ctx, schema, backend, config, sleep) -> TurnOutcome:
    """Two independent calls (IC, then SR), no feedback. Rejected extractions are dropped."""
    system = build_system_prompt(schema, native=backend.native_tools)
    base = build_turn_message(ctx)
    trace = AgentTrace()
    calls = tokens = 0
    retry_kwargs = {"retries": config.retries, "backoff": config.backoff}
    if sleep is not None:
        retry_kwargs["sleep"] = sleep

    def ask(user: str, k: int):
        nonlocal calls, tokens
        req = _request([Message("system", system), Message("user", user)], backend, config, _label(ctx, k))
        raw = complete_with_retry(backend, req, **retry_kwargs)
        calls += 1
        tokens += raw.output_tokens
        try:
            thought, call = parse_agent_step(raw, k)
        except ParseFailure:
            trace.steps.append(
                AgentStep((raw.text or "").strip(), None, fail([parse_failure()]), output_tokens=raw.output_tokens)
            )
            return None
        return thought, call, raw.output_tokens

    def degraded(error=None, intent=""):
        return TurnOutcome(EMPTY_UPDATE, ctx.prev_state, intent, trace, True, calls, tokens, error=error)

    intent_result = None
    try:
        first = ask(f"{base}\n\n{NOLOOP_IC_INSTRUCTION}", 0)
        if first is not None:
            thought, call, n_tok = first
            outcome = validate(call, trace, schema)
            if outcome.passed and call.tool is ToolId.INTENT_CLASSIFY:
                intent_result = execute_intent_classify(call.arguments, schema)
                trace.steps.append(AgentStep(thought, call, outcome, intent_result, n_tok, intent_result.render()))
            else:
                trace.steps.append(AgentStep(thought, call, outcome, None, n_tok))

        sr_prompt = base
        if isinstance(intent_result, IntentAccepted):
            sr_prompt += f"\n\nSlots for intent {intent_result.intent_id}:\n{intent_result.slot_defs_rendered}"
        second = ask(f"{sr_prompt}\n\n{NOLOOP_SR_INSTRUCTION}", 1)
    except BackendError as exc:
        return degraded(f"{type(exc).__name__}: {exc}")

    if isinstance(intent_result, ShortCircuit):
        if second is not None:
            thought, call, n_tok = second
            trace.steps.append(AgentStep(thought, call, PASS, None, n_tok, "ignored: turn short-circuited"))
        return TurnOutcome(EMPTY_UPDATE, ctx.prev_state, intent_result.intent_id, trace, False, calls, tokens)
    if second is None:
        return degraded(intent=intent_result.intent_id if intent_result else "")

    thought, call, n_tok = second
    outcome = validate(call, trace, schema)
    action_ok = call.tool is ToolId.SLOT_RESOLVE and not any(
        v.category.value == "action_compliance" for v in outcome.violations
    )
    extractions = parse_extractions(call.arguments) if action_ok else None
    if not isinstance(intent_result, IntentAccepted) or extractions is None:
        trace.steps.append(AgentStep(thought, call, outcome, None, n_tok))
        return degraded(intent=intent_result.intent_id if intent_result else "")

    kept = tuple(
        e
        for e in extractions
        if not check_schema_conformance([e], intent_result.intent_id, schema) and not check_coreference([e], schema)
    )
    result = SlotCandidates(kept)
    delta = result.to_update(ctx.turn)
    trace.steps.append(AgentStep(thought, call, outcome, result, n_tok, result.render()))
    return TurnOutcome(
        delta,
        apply_update(ctx.prev_state, delta, ctx.turn),
        intent_result.intent_id,
        trace,
        False,
        calls,
        tokens,
        committed=True,
    )


# -- gating audit -------------------------------------------------------------


def audit_gating(outcome: TurnOutcome, prev_state: BeliefState, mode: Mode = Mode.FULL) -> None:
    """Raise AssertionError unless the turn committed state only through a validated slot_resolve."""
    commits = [s for s in outcome.trace.steps if isinstance(s.result, SlotCandidates)]
    if outcome.committed:
        assert len(commits) == 1, "exactly one commit per turn"
        assert outcome.trace.steps[-1] is commits[0], "commit must be the terminal step"
        if mode is Mode.FULL:
            assert commits[0].outcome.passed, "commit without a Pass outcome"
        assert outcome.new_state == apply_update(prev_state, outcome.delta)
    else:
        assert not commits, "slot candidates produced without a commit"
        assert not outcome.delta
        assert outcome.new_state == prev_state
    if outcome.degraded:
        assert outcome.new_state == prev_state and not outcome.delta


def audit_trace_record(rec: Dict[str, Any]) -> None:
    """Same audit on a serialized trace record."""
    steps = rec["steps"]
    commits = [i for i, s in enumerate(steps) if s.get("result") == "slot_candidates"]
    if rec["committed"]:
        assert commits == [len(steps) - 1], "exactly one commit, at the terminal step"
        if rec["mode"] == Mode.FULL.value:
            assert not steps[-1]["validation"], "commit without a Pass outcome"
    else:
        assert not commits and not rec["delta"]
    if rec["mode"] != Mode.NOLOOP.value:
        assert rec["llm_calls"] <= rec["k_max"]


# -- dialogues ---------------------------------------------------------------


@dataclass
class DialogueResult:
    dialogue_id: str
    outcomes: List[TurnOutcome]
    turns: List[Any]

    @property
    def predicted_states(self) -> List[BeliefState]:
        return [o.new_state for o in self.outcomes]

    def trace_records(self, config: EngineConfig, schema: Optional[Schema] = None) -> List[Dict[str, Any]]:
        return [
            trace_record(self.dialogue_id, gt, out, config, schema) for gt, out in zip(self.turns, self.outcomes)
        ]


def trace_record(dialogue_id: str, gold_turn: Any, out: TurnOutcome, config: EngineConfig, schema: Optional[Schema] = None) -> Dict[str, Any]:
    rec: Dict[str, Any] = {
        "dialogue_id": dialogue_id,
        "turn": getattr(gold_turn, "turn", 0),
        "mode": config.mode.value,
        "k_max": config.k_max,
        "llm_calls": out.llm_calls,
        "output_tokens": out.output_tokens,
        "degraded": out.degraded,
        "committed": out.committed,
        "intent": out.intent,
        "delta": out.delta.to_json(),
        "state": out.new_state.to_json(),
        "error": out.error,
        "steps": [s.to_json(i) for i, s in enumerate(out.trace.steps)],
    }
    gold = getattr(gold_turn, "gold_state", None)
    if gold is not None:
        rec["gold"] = {
            "state": gold.norms(),
            "active_domains": list(gold_turn.active_domains),
            "service": getattr(gold_turn, "service", None),
            "categorical": sorted(s for s in gold.entries if schema is not None and schema.is_categorical(s)),
        }
    return rec


def run_dialogue(
    dialogue: Sequence[Any],
    schema: Schema,
    backend: CompletionBackend,
    config: EngineConfig = EngineConfig(),
    sleep=None,
) -> DialogueResult:
    """Thread predicted (never gold) state through the turns of one dialogue.

    ``dialogue`` holds GoldTurn-like objects: ``dialogue_id``, ``turn``,
    ``user_utterance`` and ``system_utterance``.
    """
    state = BeliefState()
    prev_action = ""
    intents: List[str] = []
    history: List[DialogueTurn] = []
    outcomes: List[TurnOutcome] = []
    dialogue_id = getattr(dialogue[0], "dialogue_id", "") if dialogue else ""
    for n, gt in enumerate(dialogue):
        ctx = TurnContext(
            user_utterance=gt.user_utterance,
            prev_system_action=prev_action,
            prev_state=state,
            prev_intents=tuple(intents),
            dialogue_log=tuple(history),
            dialogue_id=dialogue_id,
            turn=getattr(gt, "turn", n),
        )
        out = run_turn(ctx, schema, backend, config, sleep=sleep)
        outcomes.append(out)
        state = out.new_state
        if out.committed and out.delta and out.intent and out.intent not in intents:
            intents.append(out.intent)
        prev_action = getattr(gt, "system_utterance", "") or ""
        history.append(DialogueTurn(gt.user_utterance, prev_action))
    return DialogueResult(dialogue_id, outcomes, list(dialogue))
