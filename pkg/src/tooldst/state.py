"""Persistent multi-domain belief table with deferred, upsert-only updates."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, Iterator, Mapping, Optional, Tuple

from .errors import InternalFault, UnknownDomain

# Writing this value for a slot removes the slot at apply time.
NULL_SENTINEL = "<none>"


@dataclass(frozen=True)
class SlotValue:
    """Surface form plus its canonical normalization.

    Equality looks at ``norm`` only; ``raw`` and ``source_turn`` are provenance.
    """

    raw: str = field(compare=False)
    norm: str
    source_turn: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        if not self.norm:
            raise InternalFault("slot value norm must be non-empty")
        if self.source_turn < 0:
            raise InternalFault("source_turn must be >= 0")

    @property
    def is_null(self) -> bool:
        return self.norm == NULL_SENTINEL

    @classmethod
    def of(cls, norm: str, raw: Optional[str] = None, turn: int = 0) -> "SlotValue":
        return cls(raw=norm if raw is None else raw, norm=norm, source_turn=turn)

    def to_json(self) -> Dict[str, str]:
        return {"raw": self.raw, "norm": self.norm}


def _freeze(entries: Mapping[str, SlotValue]) -> Mapping[str, SlotValue]:
    return MappingProxyType(dict(sorted(entries.items())))


@dataclass(frozen=True)
class BeliefState:
    entries: Mapping[str, SlotValue] = field(default_factory=dict)
    turn_index: int = field(default=0, compare=False)

    def __post_init__(self) -> None:
        frozen = _freeze(self.entries)
        for slot_id, value in frozen.items():
            if value.is_null:
                raise InternalFault(f"null sentinel stored for {slot_id}")
        object.__setattr__(self, "entries", frozen)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __contains__(self, slot_id: object) -> bool:
        return slot_id in self.entries

    def __getitem__(self, slot_id: str) -> SlotValue:
        return self.entries[slot_id]

    def __hash__(self) -> int:
        return hash(tuple((k, v.norm) for k, v in self.entries.items()))

    def norms(self) -> Dict[str, str]:
        return {k: v.norm for k, v in self.entries.items()}

    def to_json(self) -> Dict[str, Dict[str, str]]:
        return {k: v.to_json() for k, v in self.entries.items()}

    @classmethod
    def from_norms(cls, values: Mapping[str, str], turn: int = 0) -> "BeliefState":
        return cls({k: SlotValue.of(v, turn=turn) for k, v in values.items()}, turn)

    @classmethod
    def from_json(cls, doc: Mapping[str, Mapping[str, str]], turn: int = 0) -> "BeliefState":
        return cls(
            {k: SlotValue(raw=v.get("raw", v["norm"]), norm=v["norm"], source_turn=turn) for k, v in doc.items()},
            turn,
        )


@dataclass(frozen=True)
class StateUpdate:
    changes: Mapping[str, SlotValue] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "changes", _freeze(self.changes))

    def __len__(self) -> int:
        return len(self.changes)

    def __bool__(self) -> bool:
        return bool(self.changes)

    def to_json(self) -> Dict[str, Dict[str, str]]:
        return {k: v.to_json() for k, v in self.changes.items()}

    @classmethod
    def from_norms(cls, values: Mapping[str, str], turn: int = 0) -> "StateUpdate":
        return cls({k: SlotValue.of(v, turn=turn) for k, v in values.items()})


EMPTY_UPDATE = StateUpdate()


def apply_update(prev: BeliefState, delta: StateUpdate, turn: Optional[int] = None) -> BeliefState:
    """``prev`` upserted with ``delta``; sentinel values delete. ``prev`` is left untouched."""
    entries = dict(prev.entries)
    for slot_id, value in delta.changes.items():
        if value.is_null:
            entries.pop(slot_id, None)
        else:
            entries[slot_id] = value
    return BeliefState(entries, prev.turn_index if turn is None else turn)


def gold_delta(prev_gold: BeliefState, curr_gold: BeliefState) -> StateUpdate:
    changes: Dict[str, SlotValue] = {}
    for slot_id, value in curr_gold.entries.items():
        old = prev_gold.entries.get(slot_id)
        if old is None or old.norm != value.norm:
            changes[slot_id] = value
    for slot_id in prev_gold.entries:
        if slot_id not in curr_gold.entries:
            changes[slot_id] = SlotValue(NULL_SENTINEL, NULL_SENTINEL, curr_gold.turn_index)
    return StateUpdate(changes)


def slot_domain(slot_id: str) -> str:
    return slot_id.split("-", 1)[0]


def project_domain(state: BeliefState, domain: str, known_domains: Optional[Tuple[str, ...]] = None) -> BeliefState:
    """Entries of ``state`` whose slot id prefix is ``domain``.

    When ``known_domains`` is given, an unlisted ``domain`` raises UnknownDomain.
    """
    if known_domains is not None and domain not in known_domains:
        raise UnknownDomain(domain)
    return BeliefState(
        {k: v for k, v in state.entries.items() if slot_domain(k) == domain},
        state.turn_index,
    )
