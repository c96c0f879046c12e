import importlib.util
from pathlib import Path

import pytest

from retflip.cli import FIXTURES, fixture_config

TOOL = Path(__file__).resolve().parents[1] / "tools" / "make_golden.py"


@pytest.fixture(scope="module")
def make_golden():
    spec = importlib.util.spec_from_file_location("make_golden", TOOL)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.mark.parametrize("name", FIXTURES)
def test_fixture_matches_golden(make_golden, name):
    assert make_golden.golden_text(name) == fixture_config(name).with_suffix(".golden").read_text()
