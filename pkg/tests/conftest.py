import os
import sys
from pathlib import Path

import pytest

from tooldst import multiwoz_schema
from tooldst.schema import FREEFORM, TIME, IntentDef, Schema, SlotDef, SlotType, fallback_intent

FIXTURES = Path(__file__).parent / "fixtures"
MULTIWOZ_MINI = FIXTURES / "multiwoz_mini"
SGD_MINI = FIXTURES / "sgd_mini"
SCRIPT = MULTIWOZ_MINI / "script.jsonl"


@pytest.fixture(scope="session")
def mwoz():
    return multiwoz_schema()


def train_only_schema() -> Schema:
    slots = (
        SlotDef("train-leaveat", "departure time", SlotType(TIME)),
        SlotDef("train-day", "day of travel", SlotType.categorical(["monday", "friday"])),
        SlotDef("train-destination", "arrival station", SlotType(FREEFORM)),
    )
    return Schema("trains", (IntentDef("train", "book a train", True, slots), fallback_intent()))


@pytest.fixture
def train_schema():
    return train_only_schema()


def env_path(name: str):
    value = os.environ.get(name)
    return value if value and os.path.isdir(value) else None


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
