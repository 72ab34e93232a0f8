
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import train_only_schema
from tooldst.errors import InternalFault, InvalidArgument
from tooldst.state import BeliefState
from tooldst.tools import (
    TOOL_NAMES,
    DialogueTurn,
    IntentAccepted,
    ShortCircuit,
    SlotCandidates,
    SlotExtraction,
    ToolCall,
    ToolId,
    execute_history_retrieve,
    execute_intent_classify,
    execute_slot_resolve,
    parse_extractions,
    render_slot_defs,
    tool_signatures,
)
from tooldst.validator import TIME_RE

LOG = [DialogueTurn(f"user {i}", f"system {i}") for i in range(5)]


def test_library_has_three_tools():
    assert TOOL_NAMES == ("intent_classify", "slot_resolve", "history_retrieve")
    assert [s["function"]["name"] for s in tool_signatures()] == list(TOOL_NAMES)
    assert ToolCall("lookup_weather").tool is None
    assert ToolCall("slot_resolve").tool is ToolId.SLOT_RESOLVE


def test_intent_classify_hotel(mwoz):
    res = execute_intent_classify({"intent": "hotel"}, mwoz)
    assert isinstance(res, IntentAccepted)
    assert "- hotel-area | " in res.slot_defs_rendered
    assert "one of: centre, east, north, south, west" in res.render()


def test_intent_classify_fallback_short_circuits(mwoz):
    assert execute_intent_classify({"intent": "fallback"}, mwoz) == ShortCircuit("fallback")


def test_single_domain_schema():
    s = train_only_schema()
    res = execute_intent_classify({"intent": "train"}, s)
    rows = res.slot_defs_rendered.splitlines()
    assert [r.split(" | ")[0] for r in rows] == ["- train-leaveat", "- train-day", "- train-destination"]


def test_intent_classify_rejects_unvalidated(mwoz):
    with pytest.raises(InternalFault):
        execute_intent_classify({"intent": "bookflight"}, mwoz)


def test_slot_resolve_time_norm(mwoz):
    res = execute_slot_resolve({"extractions": [{"slot": "train-leaveat", "raw": "quarter past nine", "norm": "09:15"}]}, "train", mwoz)
    (e,) = res.extractions
    assert e.norm == "09:15"
    assert TIME_RE.match(e.norm) and not TIME_RE.match(e.raw)


def test_slot_resolve_date_shape(mwoz):
    res = execute_slot_resolve({"extractions": [{"slot": "train-day", "raw": "tmrw", "norm": "2024-03-15"}]}, "train", mwoz)
    assert res.extractions == (SlotExtraction("train-day", "tmrw", "2024-03-15"),)


def test_slot_resolve_empty(mwoz):
    res = execute_slot_resolve({"extractions": []}, "hotel", mwoz)
    assert res == SlotCandidates(()) and not res.to_update()


def test_duplicate_extraction_last_wins(caplog):
    c = SlotCandidates((SlotExtraction("hotel-area", "n", "north"), SlotExtraction("hotel-area", "s", "south")))
    assert c.to_update().changes["hotel-area"].norm == "south"
    assert "duplicate extraction" in caplog.text


@pytest.mark.parametrize(
    "args",
    [{}, {"extractions": "x"}, {"extractions": [{"slot": "a-b", "raw": "x"}]}, {"extractions": [["a-b", "x", "y"]]}],
)
def test_parse_extractions_bad_shape(args):
    assert parse_extractions(args) is None


def test_history_windowing():
    out = execute_history_retrieve({"n": 2}, LOG).render()
    assert out == "User: user 3\nSystem: system 3\nUser: user 4\nSystem: system 4"
    assert execute_history_retrieve({"n": 100}, LOG[:3]).render().count("User:") == 3
    for bad in (0, -1, "2", True, None):
        with pytest.raises(InvalidArgument):
            execute_history_retrieve({"n": bad}, LOG)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.text(min_size=1, max_size=30).filter(lambda s: s.strip()), st.text(max_size=30)), min_size=1, max_size=6), st.integers(1, 8))
def test_history_is_verbatim(pairs, n):
    log = [DialogueTurn(u, s) for u, s in pairs]
    out = execute_history_retrieve({"n": n}, log).render()
    for t in log[-n:]:
        assert f"User: {t.user}" in out
        if t.system:
            assert f"System: {t.system}" in out


def test_tools_do_not_touch_state(mwoz):
    b = BeliefState.from_norms({"hotel-area": "north"})
    snapshot = b.to_json()
    execute_intent_classify({"intent": "taxi"}, mwoz)
    execute_slot_resolve({"extractions": [{"slot": "hotel-area", "raw": "s", "norm": "south"}]}, "hotel", mwoz)
    assert b.to_json() == snapshot


def test_slot_def_template():
    s = train_only_schema()
    assert render_slot_defs(s.intent("train").slots).splitlines()[0] == "- train-leaveat | departure time | time, HH:MM 24-hour | filter"
    assert render_slot_defs(()) == "(no slots)"
