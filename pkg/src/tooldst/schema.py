"""Domain ontology: intents, typed slots, and derivation from MultiWOZ 2.2 / SGD metadata.

Schema file format (UTF-8 JSON)::

    {
      "name": "multiwoz",
      "fallback_intent": "fallback",
      "intents": [
        {"id": "hotel", "description": "...", "transactional": true,
         "slots": [{"id": "hotel-area", "description": "...", "type": "categorical",
                    "role": "filter", "values": ["centre", "east", "north", "south", "west"]}]}
      ],
      "generic_terms": {"hotel-name": ["hotel", "hotels"]}
    }

``type`` is one of categorical, time, date, number, freeform. ``values`` is only
present for categorical slots. ``role`` is required or filter.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .errors import InvariantError, MissingAnnotation, ParseError, UnknownIntent

CATEGORICAL = "categorical"
TIME = "time"
DATE = "date"
NUMBER = "number"
FREEFORM = "freeform"
SLOT_KINDS = (CATEGORICAL, TIME, DATE, NUMBER, FREEFORM)

REQUIRED = "required"
FILTER = "filter"
ROLES = (REQUIRED, FILTER)

DEFAULT_FALLBACK_ID = "fallback"
FALLBACK_DESCRIPTION = (
    "Non-transactional turn: greetings, thanks, goodbyes, acknowledgements or requests "
    "outside every supported domain. Carries no slots."
)

MULTIWOZ_DOMAINS = ("attraction", "hotel", "restaurant", "taxi", "train")

_SLOT_ID_RE = re.compile(r"^[a-z0-9_]+-[a-z0-9_]+$")


@dataclass(frozen=True)
class SlotType:
    kind: str
    values: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in SLOT_KINDS:
            raise InvariantError(f"unknown slot type {self.kind!r}")
        if self.kind == CATEGORICAL:
            if not self.values:
                raise InvariantError("categorical slot type needs a non-empty value list")
            folded = [v.strip().lower() for v in self.values]
            if len(set(folded)) != len(folded):
                raise InvariantError(f"duplicate categorical values in {list(self.values)}")
        elif self.values:
            raise InvariantError(f"{self.kind} slot type cannot carry enum values")

    @classmethod
    def categorical(cls, values: Iterable[str]) -> "SlotType":
        return cls(CATEGORICAL, tuple(values))

    def accepts(self, value: str) -> bool:
        """Case-insensitive, whitespace-trimmed enum membership. Non-categorical types accept anything."""
        if self.kind != CATEGORICAL:
            return True
        v = value.strip().lower()
        return any(v == x.strip().lower() for x in self.values)


@dataclass(frozen=True)
class SlotDef:
    id: str
    description: str
    slot_type: SlotType
    role: str = FILTER

    def __post_init__(self) -> None:
        if not self.id or self.id != self.id.lower():
            raise InvariantError(f"slot id must be lowercase and non-empty: {self.id!r}")
        if self.role not in ROLES:
            raise InvariantError(f"slot {self.id}: unknown role {self.role!r}")

    @property
    def domain(self) -> str:
        return self.id.split("-", 1)[0]

    @property
    def name(self) -> str:
        return self.id.split("-", 1)[-1]


@dataclass(frozen=True)
class IntentDef:
    id: str
    description: str
    transactional: bool
    slots: Tuple[SlotDef, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise InvariantError("intent id must be non-empty")
        if not self.transactional and self.slots:
            raise InvariantError(f"non-transactional intent {self.id} cannot carry slots")
        ids = [s.id for s in self.slots]
        if len(set(ids)) != len(ids):
            raise InvariantError(f"intent {self.id}: duplicate slot ids")


@dataclass(frozen=True)
class Schema:
    name: str
    intents: Tuple[IntentDef, ...]
    fallback_intent_id: str = DEFAULT_FALLBACK_ID
    generic_terms: Mapping[str, Tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [i.id for i in self.intents]
        if len(set(ids)) != len(ids):
            dup = sorted({x for x in ids if ids.count(x) > 1})
            raise InvariantError(f"duplicate intent ids: {dup}")
        by_id = {i.id: i for i in self.intents}
        fb = by_id.get(self.fallback_intent_id)
        if fb is None:
            raise InvariantError(f"fallback intent {self.fallback_intent_id!r} is not declared")
        if fb.transactional:
            raise InvariantError("fallback intent must be non-transactional")
        object.__setattr__(
            self, "generic_terms", {k: tuple(v) for k, v in dict(self.generic_terms).items()}
        )
        object.__setattr__(self, "_by_id", by_id)
        slot_index: Dict[str, SlotDef] = {}
        for intent in self.intents:
            for s in intent.slots:
                slot_index.setdefault(s.id, s)
        object.__setattr__(self, "_slots", slot_index)

    def intent(self, intent_id: str) -> IntentDef:
        try:
            return self._by_id[intent_id]  # type: ignore[attr-defined]
        except KeyError:
            raise UnknownIntent(intent_id) from None

    def has_intent(self, intent_id: str) -> bool:
        return intent_id in self._by_id  # type: ignore[attr-defined]

    @property
    def intent_ids(self) -> List[str]:
        return [i.id for i in self.intents]

    def slot(self, slot_id: str) -> Optional[SlotDef]:
        """First declaration of ``slot_id`` across intents, or None."""
        return self._slots.get(slot_id)  # type: ignore[attr-defined]

    @property
    def slot_ids(self) -> List[str]:
        return list(self._slots)  # type: ignore[attr-defined]

    @property
    def domains(self) -> List[str]:
        seen: Dict[str, None] = {}
        for sid in self._slots:  # type: ignore[attr-defined]
            seen.setdefault(sid.split("-", 1)[0], None)
        return list(seen)

    def is_categorical(self, slot_id: str) -> bool:
        s = self.slot(slot_id)
        return s is not None and s.slot_type.kind == CATEGORICAL


def slots_for_intent(schema: Schema, intent_id: str) -> List[SlotDef]:
    return list(schema.intent(intent_id).slots)


# -- serialization ---------------------------------------------------------


def schema_to_dict(schema: Schema) -> Dict[str, Any]:
    intents = []
    for intent in schema.intents:
        slots = []
        for s in intent.slots:
            d: Dict[str, Any] = {
                "id": s.id,
                "description": s.description,
                "type": s.slot_type.kind,
                "role": s.role,
            }
            if s.slot_type.kind == CATEGORICAL:
                d["values"] = list(s.slot_type.values)
            slots.append(d)
        intents.append(
            {
                "id": intent.id,
                "description": intent.description,
                "transactional": intent.transactional,
                "slots": slots,
            }
        )
    return {
        "name": schema.name,
        "fallback_intent": schema.fallback_intent_id,
        "intents": intents,
        "generic_terms": {k: list(v) for k, v in schema.generic_terms.items()},
    }


def dump_schema(schema: Schema) -> str:
    return json.dumps(schema_to_dict(schema), indent=2, ensure_ascii=False) + "\n"


def _require(obj: Mapping[str, Any], key: str, kind: type, where: str) -> Any:
    if key not in obj:
        raise ParseError(f"{where}: missing field {key!r}")
    value = obj[key]
    if not isinstance(value, kind):
        raise ParseError(f"{where}: field {key!r} must be {kind.__name__}")
    return value


def schema_from_dict(doc: Mapping[str, Any]) -> Schema:
    if not isinstance(doc, Mapping):
        raise ParseError("schema document must be a JSON object")
    name = _require(doc, "name", str, "schema")
    fallback = _require(doc, "fallback_intent", str, "schema")
    raw_intents = _require(doc, "intents", list, "schema")
    generic = doc.get("generic_terms", {})
    if not isinstance(generic, Mapping):
        raise ParseError("schema: generic_terms must be an object")
    intents = []
    for n, ri in enumerate(raw_intents):
        where = f"intents[{n}]"
        if not isinstance(ri, Mapping):
            raise ParseError(f"{where}: must be an object")
        slots = []
        for m, rs in enumerate(ri.get("slots", [])):
            swhere = f"{where}.slots[{m}]"
            if not isinstance(rs, Mapping):
                raise ParseError(f"{swhere}: must be an object")
            kind = _require(rs, "type", str, swhere)
            values = rs.get("values", [])
            if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
                raise ParseError(f"{swhere}: values must be a list of strings")
            slots.append(
                SlotDef(
                    id=_require(rs, "id", str, swhere),
                    description=rs.get("description", ""),
                    slot_type=SlotType(kind, tuple(values)),
                    role=rs.get("role", FILTER),
                )
            )
        intents.append(
            IntentDef(
                id=_require(ri, "id", str, where),
                description=ri.get("description", ""),
                transactional=_require(ri, "transactional", bool, where),
                slots=tuple(slots),
            )
        )
    return Schema(
        name=name,
        intents=tuple(intents),
        fallback_intent_id=fallback,
        generic_terms={k: tuple(v) for k, v in generic.items()},
    )


def load_schema(document: str | bytes | Mapping[str, Any]) -> Schema:
    """Parse a schema document (JSON text or an already-decoded mapping)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ParseError(f"schema is not valid JSON: {exc}") from exc
    return schema_from_dict(document)


def load_schema_file(path) -> Schema:
    with open(path, encoding="utf-8") as fh:
        return load_schema(fh.read())


def fallback_intent(fallback_id: str = DEFAULT_FALLBACK_ID) -> IntentDef:
    return IntentDef(fallback_id, FALLBACK_DESCRIPTION, transactional=False)


def default_generic_terms(intents: Sequence[IntentDef]) -> Dict[str, Tuple[str, ...]]:
    """Domain noun and its plural for every freeform ``*-name`` slot."""
    terms: Dict[str, Tuple[str, ...]] = {}
    for intent in intents:
        for s in intent.slots:
            if s.name == "name" and s.slot_type.kind == FREEFORM:
                noun = s.domain.lower()
                terms[s.id] = (noun, noun + "s")
    return terms


# -- MultiWOZ 2.2 ----------------------------------------------------------


def _parse_raw(raw: Any, what: str) -> Any:
    if isinstance(raw, (str, bytes)):
        if not raw.strip():
            raise ParseError(f"empty {what} input")
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{what} is not valid JSON: {exc}") from exc
    if not raw:
        raise ParseError(f"empty {what} input")
    return raw


def _slot_type_from_annotation(ann: Any, possible_values: Sequence[str], slot_id: str) -> SlotType:
    if isinstance(ann, Mapping):
        kind = ann.get("type")
        values = ann.get("values")
    else:
        kind, values = ann, None
    if kind == CATEGORICAL:
        vals = list(values) if values else list(possible_values)
        # drop exact duplicates while keeping source order and casing
        deduped = list(dict.fromkeys(vals))
        folded: Dict[str, str] = {}
        for v in deduped:
            folded.setdefault(v.strip().lower(), v)
        if not folded:
            raise InvariantError(f"categorical slot {slot_id} has no values")
        return SlotType.categorical(folded.values())
    if kind not in SLOT_KINDS:
        raise ParseError(f"slot {slot_id}: unknown annotated type {kind!r}")
    return SlotType(kind)


def derive_multiwoz_schema(
    raw: Any,
    type_annotations: Mapping[str, Any],
    domains: Sequence[str] = MULTIWOZ_DOMAINS,
    fallback_id: str = DEFAULT_FALLBACK_ID,
) -> Schema:
    """Merge the per-domain intents of a MultiWOZ 2.2 ``schema.json`` into one intent per domain.

    Slot membership is the union of every intent's required and optional slots,
    in first-seen order. Each slot takes its type from ``type_annotations``
    (``"time"`` or ``{"type": "categorical", "values": [...]}``); categorical
    annotations without values inherit ``possible_values`` from the source.
    """
    services = _parse_raw(raw, "MultiWOZ schema")
    if not isinstance(services, list):
        raise ParseError("MultiWOZ schema must be a list of services")
    by_name = {}
    for svc in services:
        if not isinstance(svc, Mapping) or "service_name" not in svc:
            raise ParseError("MultiWOZ service entry without service_name")
        by_name[svc["service_name"]] = svc
    missing = [d for d in domains if d not in by_name]
    if missing:
        raise ParseError(f"MultiWOZ schema lacks domains {missing}")

    intents: List[IntentDef] = []
    for domain in domains:
        svc = by_name[domain]
        slot_meta = {s["name"].lower(): s for s in svc.get("slots", [])}
        order: Dict[str, str] = {}
        for it in svc.get("intents", []):
            for sid in it.get("required_slots", []):
                order.setdefault(sid.lower(), REQUIRED)
            for sid in it.get("optional_slots", {}):
                order.setdefault(sid.lower(), FILTER)
        slots = []
        for sid, role in order.items():
            if sid not in type_annotations:
                raise MissingAnnotation(f"no type annotation for slot {sid}")
            meta = slot_meta.get(sid, {})
            slots.append(
                SlotDef(
                    id=sid,
                    description=meta.get("description", ""),
                    slot_type=_slot_type_from_annotation(
                        type_annotations[sid], meta.get("possible_values", []), sid
                    ),
                    role=role,
                )
            )
        intents.append(
            IntentDef(
                id=domain,
                description=svc.get("description", domain),
                transactional=True,
                slots=tuple(slots),
            )
        )
    intents.append(fallback_intent(fallback_id))
    return Schema(
        name="multiwoz",
        intents=tuple(intents),
        fallback_intent_id=fallback_id,
        generic_terms=default_generic_terms(intents),
    )


# -- SGD -------------------------------------------------------------------


def _sgd_slot_kind(slot_name: str) -> str:
    tokens = slot_name.lower().split("_")
    if "date" in tokens:
        return DATE
    if "time" in tokens:
        return TIME
    return FREEFORM


def sgd_slot_id(service: str, slot: str) -> str:
    return f"{service.lower()}-{slot.lower()}"


def sgd_intent_id(service: str, intent: str) -> str:
    return f"{service.lower()}-{intent.lower()}"


def derive_sgd_schema(raw: Any, fallback_id: str = DEFAULT_FALLBACK_ID) -> Schema:
    """Build one intent per SGD service intent.

    Roles: ``required_slots`` become Required, ``optional_slots`` Filter.
    Slots that appear only in ``result_slots`` across the whole service are left
    out. A result slot of a search intent (SGD ``is_transactional: false``) that
    some transactional sibling takes as an argument is promoted into that search
    intent with role Filter, so it can be tracked while the user is still
    browsing. Date/time slots are typed Date/Time, everything else Freeform.
    """
    if isinstance(raw, (str, bytes)):
        raw = _parse_raw(raw, "SGD schema")
    if isinstance(raw, Mapping):
        raw = [raw]
    if not isinstance(raw, list):
        raise ParseError("SGD schema must be a list of services")

    intents: List[IntentDef] = []
    for svc in raw:
        if not isinstance(svc, Mapping) or "service_name" not in svc:
            raise ParseError("SGD service entry without service_name")
        service = svc["service_name"]
        slot_meta = {s["name"]: s for s in svc.get("slots", [])}
        svc_intents = svc.get("intents", [])
        arg_slots = set()
        for it in svc_intents:
            arg_slots.update(it.get("required_slots", []))
            arg_slots.update(it.get("optional_slots", {}))
        transactional_args = set()
        for it in svc_intents:
            if it.get("is_transactional", False):
                transactional_args.update(it.get("required_slots", []))
                transactional_args.update(it.get("optional_slots", {}))

        for it in svc_intents:
            if "name" not in it:
                raise ParseError(f"{service}: intent without name")
            order: Dict[str, str] = {}
            for s in it.get("required_slots", []):
                order.setdefault(s, REQUIRED)
            for s in it.get("optional_slots", {}):
                order.setdefault(s, FILTER)
            if not it.get("is_transactional", False):
                for s in it.get("result_slots", []):
                    if s in transactional_args and s not in order:
                        order[s] = FILTER
            slots = []
            for s, role in order.items():
                if s not in slot_meta:
                    raise ParseError(f"{service}: intent {it['name']} references undeclared slot {s}")
                slots.append(
                    SlotDef(
                        id=sgd_slot_id(service, s),
                        description=slot_meta[s].get("description", ""),
                        slot_type=SlotType(_sgd_slot_kind(s)),
                        role=role,
                    )
                )
            intents.append(
                IntentDef(
                    id=sgd_intent_id(service, it["name"]),
                    description=f"{service}: {it.get('description', it['name'])}",
                    transactional=True,
                    slots=tuple(slots),
                )
            )
    intents.append(fallback_intent(fallback_id))
    return Schema(
        name="sgd",
        intents=tuple(intents),
        fallback_intent_id=fallback_id,
        generic_terms=default_generic_terms(intents),
    )


def sgd_result_only_slots(svc: Mapping[str, Any]) -> set:
    """Slot ids that appear only in ``result_slots`` across a raw SGD service."""
    args = set()
    results = set()
    for it in svc.get("intents", []):
        args.update(it.get("required_slots", []))
        args.update(it.get("optional_slots", {}))
        results.update(it.get("result_slots", []))
    return {sgd_slot_id(svc["service_name"], s) for s in results - args}
