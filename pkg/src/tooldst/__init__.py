"""Zero-shot dialogue state tracking as validated tool calls inside a bounded ReAct loop."""

from importlib import resources
import json

from .backend import CompletionRequest, CompletionResult, HttpBackend, ScriptedBackend
from .engine import EngineConfig, Mode, TurnContext, TurnOutcome, run_dialogue, run_turn
from .schema import Schema, derive_multiwoz_schema, derive_sgd_schema, load_schema, slots_for_intent
from .state import NULL_SENTINEL, BeliefState, SlotValue, StateUpdate, apply_update, gold_delta
from .validator import validate

__version__ = "0.1.0"


def _data(name: str):
    return json.loads(resources.files(__package__).joinpath("data", name).read_text(encoding="utf-8"))


def multiwoz_schema() -> Schema:
    """The five-domain MultiWOZ schema derived from the bundled 2.2 metadata and slot-type table."""
    return derive_multiwoz_schema(_data("multiwoz22_schema.json"), _data("multiwoz_slot_types.json"))


__all__ = [
    "BeliefState",
    "CompletionRequest",
    "CompletionResult",
    "EngineConfig",
    "HttpBackend",
    "Mode",
    "NULL_SENTINEL",
    "Schema",
    "ScriptedBackend",
    "SlotValue",
    "StateUpdate",
    "TurnContext",
    "TurnOutcome",
    "apply_update",
    "derive_multiwoz_schema",
    "derive_sgd_schema",
    "gold_delta",
    "load_schema",
    "multiwoz_schema",
    "run_dialogue",
    "run_turn",
    "slots_for_intent",
    "validate",
]
