"""Joint goal accuracy, fuzzy slot matching, percentiles and validator activation statistics."""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from rapidfuzz.distance import Levenshtein

from .errors import AlignmentError, EmptyInput
from .state import BeliefState, slot_domain

FUZZY_THRESHOLD = 0.95

OVERALL = "overall"
PER_DOMAIN = "domain"
PER_SERVICE = "service"

_PUNCT = str.maketrans("", "", string.punctuation)


def token_sort_key(s: str) -> str:
    return " ".join(sorted(s.lower().translate(_PUNCT).split()))


def fuzzy_match(a: str, b: str) -> float:
    """Token-sort similarity in [0, 1]: 1 - levenshtein / max_len on the normalized strings."""
    x, y = token_sort_key(a), token_sort_key(b)
    if x == y:
        return 1.0
    return Levenshtein.normalized_similarity(x, y)


def slot_matches(pred: str, gold: str, categorical: bool, fuzzy: bool = True, threshold: float = FUZZY_THRESHOLD) -> bool:
    if categorical or not fuzzy:
        return pred.strip().lower() == gold.strip().lower()
    return fuzzy_match(pred, gold) >= threshold


def states_match(
    pred: Mapping[str, str],
    gold: Mapping[str, str],
    categorical: Iterable[str] = (),
    fuzzy: bool = True,
    threshold: float = FUZZY_THRESHOLD,
) -> bool:
    """Both-direction match: every gold slot matched and no spurious predicted slot."""
    if set(pred) != set(gold):
        return False
    cat = set(categorical)
    return all(slot_matches(pred[k], gold[k], k in cat, fuzzy, threshold) for k in gold)


@dataclass(frozen=True)
class ScoredTurn:
    """What JGA needs from one turn: predicted and gold norms, active domains, categorical slot ids."""

    pred: Mapping[str, str]
    gold: Mapping[str, str]
    active_domains: Tuple[str, ...] = ()
    categorical: frozenset = frozenset()


def _norms(state: Any) -> Dict[str, str]:
    if isinstance(state, BeliefState):
        return state.norms()
    return dict(state)


def align(predictions: Sequence[Any], golds: Sequence[Any], schema=None) -> List[ScoredTurn]:
    if len(predictions) != len(golds):
        raise AlignmentError(f"{len(predictions)} predictions for {len(golds)} gold turns")
    out = []
    for pred, gt in zip(predictions, golds):
        gold = _norms(gt.gold_state)
        cat = frozenset(k for k in gold if schema is not None and schema.is_categorical(k))
        out.append(ScoredTurn(_norms(pred), gold, tuple(gt.active_domains), cat))
    return out


def _project(values: Mapping[str, str], domain: str) -> Dict[str, str]:
    return {k: v for k, v in values.items() if slot_domain(k) == domain}


def _turn_ok(t: ScoredTurn, fuzzy: bool, threshold: float, domain: Optional[str] = None) -> bool:
    pred, gold = (t.pred, t.gold) if domain is None else (_project(t.pred, domain), _project(t.gold, domain))
    return states_match(pred, gold, t.categorical, fuzzy, threshold)


def _per_domain(turns: Sequence[ScoredTurn], fuzzy: bool, threshold: float) -> Dict[str, float]:
    hits: Counter = Counter()
    totals: Counter = Counter()
    for t in turns:
        for d in dict.fromkeys(t.active_domains):
            totals[d] += 1
            hits[d] += _turn_ok(t, fuzzy, threshold, d)
    return {d: hits[d] / totals[d] for d in sorted(totals)}


def _mean(values: Iterable[float]) -> Optional[float]:
    vals = list(values)
    return sum(vals) / len(vals) if vals else None


def jga_scored(turns: Sequence[ScoredTurn], scope: str = OVERALL, fuzzy: bool = True, threshold: float = FUZZY_THRESHOLD) -> Dict[str, Any]:
    if scope == OVERALL:
        if not turns:
            return {"overall_jga": None}
        return {"overall_jga": sum(_turn_ok(t, fuzzy, threshold) for t in turns) / len(turns)}
    per = _per_domain(turns, fuzzy, threshold)
    if scope == PER_DOMAIN:
        return {"domain_jga": per, "domain_avg_jga": _mean(per.values())}
    if scope == PER_SERVICE:
        return {"service_jga": per, "avg_service_jga": _mean(per.values())}
    raise ValueError(f"unknown JGA scope {scope!r}")


def joint_goal_accuracy(
    predictions: Sequence[Any],
    golds: Sequence[Any],
    scope: str = OVERALL,
    schema=None,
    fuzzy: bool = True,
    threshold: float = FUZZY_THRESHOLD,
) -> Dict[str, Any]:
    """JGA over turns aligned 1:1.

    ``overall``: the whole predicted state must match the whole gold state.
    ``domain`` / ``service``: the same test on the per-domain (per-service)
    projection, over turns where that domain is active, then macro-averaged.
    Categorical slots (per ``schema``) compare exactly, the rest by fuzzy match.
    """
    return jga_scored(align(predictions, golds, schema), scope, fuzzy, threshold)


def percentile(values: Sequence[float], p: float) -> float:
    """Linear interpolation between closest ranks; 1-based rank = 1 + p/100 * (n - 1)."""
    if not values:
        raise EmptyInput("percentile of an empty list")
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    xs = sorted(values)
    rank = (p / 100) * (len(xs) - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (rank - lo) * (xs[hi] - xs[lo])


def summary_stats(values: Sequence[float]) -> Dict[str, Optional[float]]:
    if not values:
        return {"avg": None, "p50": None, "p99": None}
    return {"avg": sum(values) / len(values), "p50": percentile(values, 50), "p99": percentile(values, 99)}


# -- validator activation ------------------------------------------------------

CATEGORIES = ("action_compliance", "schema_conformance", "coreference_consistency")


def validator_activation_report(records: Iterable[Mapping[str, Any]]) -> Dict[str, Any]:
    """Statistics over trace records: which turns hit the validator and whether they recovered."""
    total = impacted = recovered = 0
    messages: Counter = Counter()
    cat_impacted: Counter = Counter()
    cat_recovered: Counter = Counter()
    for rec in records:
        total += 1
        violations = [v for s in rec["steps"] for v in s["validation"]]
        if not violations:
            continue
        impacted += 1
        ok = not rec["degraded"]
        recovered += ok
        messages.update(v["code"] for v in violations)
        for cat in {v["category"] for v in violations}:
            cat_impacted[cat] += 1
            cat_recovered[cat] += ok
    by_category = {}
    for cat in CATEGORIES:
        n = cat_impacted[cat]
        by_category[cat] = {
            "impacted_turns": n,
            "impacted_fraction": n / total if total else None,
            "recovered": cat_recovered[cat],
            "recovery_rate": cat_recovered[cat] / n if n else None,
        }
    return {
        "total_turns": total,
        "impacted_turns": impacted,
        "impacted_fraction": impacted / total if total else None,
        "messages_total": sum(messages.values()),
        "messages_by_code": dict(sorted(messages.items())),
        "recovered": recovered,
        "exhausted": impacted - recovered,
        "recovery_rate": recovered / impacted if impacted else None,
        "by_category": by_category,
    }


# -- report ---------------------------------------------------------------------


@dataclass
class EvalReport:
    turns: int = 0
    overall_jga: Optional[float] = None
    domain_jga: Optional[Dict[str, float]] = None
    domain_avg_jga: Optional[float] = None
    service_jga: Optional[Dict[str, float]] = None
    avg_service_jga: Optional[float] = None
    calls_stats: Dict[str, Optional[float]] = field(default_factory=dict)
    token_stats: Dict[str, Optional[float]] = field(default_factory=dict)
    degraded_turns: int = 0
    activation: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> Dict[str, Any]:
        return asdict(self)


def scored_turns_from_records(records: Sequence[Mapping[str, Any]]) -> List[ScoredTurn]:
    out = []
    for rec in records:
        gold = rec.get("gold")
        if gold is None:
            continue
        out.append(
            ScoredTurn(
                pred={k: v["norm"] for k, v in rec["state"].items()},
                gold=dict(gold["state"]),
                active_domains=tuple(gold.get("active_domains", ())),
                categorical=frozenset(gold.get("categorical", ())),
            )
        )
    return out


def build_report(records: Sequence[Mapping[str, Any]], fuzzy: bool = True, threshold: float = FUZZY_THRESHOLD) -> EvalReport:
    """Everything in the report is recomputed from trace records alone."""
    records = list(records)
    report = EvalReport(turns=len(records))
    scored = scored_turns_from_records(records)
    if scored:
        report.overall_jga = jga_scored(scored, OVERALL, fuzzy, threshold)["overall_jga"]
        is_sgd = any(rec["gold"].get("service") for rec in records if rec.get("gold"))
        if is_sgd:
            r = jga_scored(scored, PER_SERVICE, fuzzy, threshold)
            report.service_jga, report.avg_service_jga = r["service_jga"], r["avg_service_jga"]
        else:
            r = jga_scored(scored, PER_DOMAIN, fuzzy, threshold)
            report.domain_jga, report.domain_avg_jga = r["domain_jga"], r["domain_avg_jga"]
    report.calls_stats = summary_stats([rec["llm_calls"] for rec in records])
    report.token_stats = summary_stats([rec["output_tokens"] for rec in records])
    report.degraded_turns = sum(1 for rec in records if rec["degraded"])
    report.activation = validator_activation_report(records)
    return report


def _pct(x: Optional[float]) -> str:
    return "n/a" if x is None else f"{100 * x:.2f}%"


def _num(x: Optional[float]) -> str:
    return "n/a" if x is None else f"{x:.2f}"


def render_text(report: EvalReport) -> str:
    lines = ["Joint goal accuracy", f"  {'Overall JGA':<24}{_pct(report.overall_jga):>10}"]
    if report.domain_jga is not None:
        lines.append(f"  {'Domain Avg. JGA':<24}{_pct(report.domain_avg_jga):>10}")
        for d, v in report.domain_jga.items():
            lines.append(f"    {d:<22}{_pct(v):>10}")
    if report.service_jga is not None:
        lines.append(f"  {'Avg. Svc. JGA':<24}{_pct(report.avg_service_jga):>10}")
        for s, v in report.service_jga.items():
            lines.append(f"    {s:<22}{_pct(v):>10}")
    lines += [
        "",
        f"{'Efficiency':<24}{'Avg':>10}{'P50':>10}{'P99':>10}",
    ]
    for label, st in (("LLM calls / turn", report.calls_stats), ("Output tokens / turn", report.token_stats)):
        lines.append(f"  {label:<22}{_num(st.get('avg')):>10}{_num(st.get('p50')):>10}{_num(st.get('p99')):>10}")
    act = report.activation
    lines += [
        "",
        "Validator activation",
        f"  {'turns':<24}{act.get('total_turns', 0):>10}",
        f"  {'impacted turns':<24}{act.get('impacted_turns', 0):>10}  ({_pct(act.get('impacted_fraction'))})",
        f"  {'feedback messages':<24}{act.get('messages_total', 0):>10}",
    ]
    for code, n in act.get("messages_by_code", {}).items():
        lines.append(f"    {code:<22}{n:>10}")
    lines.append(f"  {'recovered / exhausted':<24}{act.get('recovered', 0):>10} / {act.get('exhausted', 0)}")
    lines.append(f"  {'recovery rate':<24}{_pct(act.get('recovery_rate')):>10}")
    for cat, st in act.get("by_category", {}).items():
        lines.append(f"    {cat:<22}{st['impacted_turns']:>10}  recovery {_pct(st['recovery_rate'])}")
    lines.append(f"  {'degraded turns':<24}{report.degraded_turns:>10}")
    return "\n".join(lines) + "\n"
