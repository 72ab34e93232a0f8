"""Loaders for the MultiWOZ 2.1 and SGD test splits."""

from __future__ import annotations

import glob
import json
import os
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import ParseError, SplitListMissing
from .schema import MULTIWOZ_DOMAINS, sgd_slot_id
from .state import BeliefState, SlotValue, slot_domain


@dataclass(frozen=True)
class GoldTurn:
    dialogue_id: str
    turn: int
    user_utterance: str
    system_utterance: str
    gold_state: BeliefState
    active_domains: Tuple[str, ...] = ()
    service: Optional[str] = None


Dialogue = List[GoldTurn]

# -- MultiWOZ 2.1 --------------------------------------------------------------

_EMPTY_VALUES = {"", "not mentioned", "none", "not given"}
_DONTCARE = {"dontcare", "dont care", "don't care", "do n't care", "doesn't care", "do nt care"}


def normalize_multiwoz_value(value: str) -> Optional[str]:
    v = " ".join(value.strip().lower().split())
    if v in _EMPTY_VALUES:
        return None
    if v in _DONTCARE:
        return "dontcare"
    return v


def multiwoz_slot_id(domain: str, key: str, book: bool) -> str:
    key = key.lower().replace(" ", "")
    return f"{domain}-book{key}" if book else f"{domain}-{key}"


def parse_multiwoz_metadata(metadata: Mapping[str, Any], domains: Sequence[str] = MULTIWOZ_DOMAINS) -> Dict[str, str]:
    """Flat ``domain-slot -> value`` map from one system-turn metadata block."""
    out: Dict[str, str] = {}
    for domain in domains:
        block = metadata.get(domain)
        if not block:
            continue
        for section, is_book in (("book", True), ("semi", False)):
            for key, raw in (block.get(section) or {}).items():
                if key == "booked" or not isinstance(raw, str):
                    continue
                value = normalize_multiwoz_value(raw)
                if value is not None:
                    out[multiwoz_slot_id(domain, key, is_book)] = value
    return out


def _read_split_list(path: str) -> List[str]:
    for name in ("testListFile.txt", "testListFile.json", "testListFile"):
        candidate = os.path.join(path, name)
        if os.path.exists(candidate):
            with open(candidate, encoding="utf-8") as fh:
                return [ln.strip() for ln in fh if ln.strip()]
    raise SplitListMissing(f"no testListFile in {path}")


def multiwoz_dialogue_turns(dialogue_id: str, dialogue: Mapping[str, Any]) -> Dialogue:
    log = dialogue.get("log")
    if not isinstance(log, list):
        raise ParseError(f"{dialogue_id}: missing log")
    turns: Dialogue = []
    for t in range(len(log) // 2):
        user, system = log[2 * t], log[2 * t + 1]
        metadata = system.get("metadata")
        if not isinstance(metadata, Mapping):
            raise ParseError(f"{dialogue_id}: turn {t} system entry has no metadata")
        values = parse_multiwoz_metadata(metadata)
        state = BeliefState({k: SlotValue(v, v, t) for k, v in values.items()}, t)
        active = tuple(d for d in MULTIWOZ_DOMAINS if any(slot_domain(k) == d for k in values))
        turns.append(
            GoldTurn(
                dialogue_id=dialogue_id,
                turn=t,
                user_utterance=user.get("text", "").strip(),
                system_utterance=system.get("text", "").strip(),
                gold_state=state,
                active_domains=active,
            )
        )
    return turns


def load_multiwoz(path: str, split_ids: Optional[Sequence[str]] = None) -> List[Dialogue]:
    """Test-split dialogues from a MultiWOZ 2.1 distribution directory (``data.json`` + ``testListFile.txt``)."""
    data_file = os.path.join(path, "data.json")
    if not os.path.exists(data_file):
        raise ParseError(f"no data.json in {path}")
    ids = list(split_ids) if split_ids is not None else _read_split_list(path)
    try:
        with open(data_file, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{data_file}: {exc}") from exc
    dialogues = []
    for did in ids:
        if did not in data:
            raise ParseError(f"test-list dialogue {did} not in data.json")
        dialogues.append(multiwoz_dialogue_turns(did, data[did]))
    return dialogues


# -- SGD -----------------------------------------------------------------------


def load_sgd_schema(dir_path: str) -> List[Dict[str, Any]]:
    path = os.path.join(dir_path, "schema.json")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ParseError(f"no schema.json in {dir_path}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def sgd_dialogue_turns(dialogue: Mapping[str, Any]) -> Dialogue:
    did = dialogue["dialogue_id"]
    raw_turns = dialogue.get("turns", [])
    per_service: Dict[str, Dict[str, str]] = {}
    out: Dialogue = []
    for i, turn in enumerate(raw_turns):
        if turn.get("speaker") != "USER":
            continue
        services = []
        for frame in turn.get("frames", []):
            service = frame["service"]
            services.append(service.lower())
            values = {}
            for slot, vals in (frame.get("state", {}).get("slot_values") or {}).items():
                if vals:
                    values[sgd_slot_id(service, slot)] = vals[0]
            per_service[service.lower()] = values
        merged: Dict[str, SlotValue] = {}
        t = len(out)
        for svc_values in per_service.values():
            for k, v in svc_values.items():
                merged[k] = SlotValue(v, v, t)
        nxt = raw_turns[i + 1] if i + 1 < len(raw_turns) else None
        system = nxt["utterance"] if nxt is not None and nxt.get("speaker") == "SYSTEM" else ""
        out.append(
            GoldTurn(
                dialogue_id=did,
                turn=t,
                user_utterance=turn.get("utterance", ""),
                system_utterance=system,
                gold_state=BeliefState(merged, t),
                active_domains=tuple(services),
                service=services[0] if services else None,
            )
        )
    return out


def load_sgd(dir_path: str) -> List[Dialogue]:
    """Dialogues from an SGD split directory (``schema.json`` + ``dialogues_*.json``)."""
    schema = load_sgd_schema(dir_path)
    known = {svc["service_name"] for svc in schema}
    files = sorted(glob.glob(os.path.join(dir_path, "dialogues_*.json")))
    if not files:
        raise ParseError(f"no dialogues_*.json in {dir_path}")
    dialogues = []
    for path in files:
        try:
            with open(path, encoding="utf-8") as fh:
                batch = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc}") from exc
        for d in batch:
            for service in d.get("services", []):
                if service not in known:
                    raise ParseError(f"dialogue {d.get('dialogue_id')} uses service {service} missing from schema.json")
            for turn in d.get("turns", []):
                for frame in turn.get("frames", []):
                    if frame.get("service") not in known:
                        raise ParseError(
                            f"dialogue {d.get('dialogue_id')} uses service {frame.get('service')} missing from schema.json"
                        )
            dialogues.append(sgd_dialogue_turns(d))
    return dialogues


def sgd_services(dialogues: Sequence[Dialogue]) -> List[str]:
    seen: Dict[str, None] = {}
    for d in dialogues:
        for t in d:
            for s in t.active_domains:
                seen.setdefault(s, None)
    return list(seen)
