from dataclasses import dataclass
from pathlib import Path

import pytest

from retflip.asm import assemble, load_program
from retflip.cli import FIXTURES, fixture_config
from retflip.config import load_config

DATA = Path(__file__).parent / "data"


@dataclass
class Fixture:
    name: str
    cfg: object
    program: object
    correct: bytes
    incorrect: bytes

    @property
    def rules(self):
        return self.cfg.classification_rules()


def load_fixture(name):
    cfg = load_config(fixture_config(name))
    return Fixture(name, cfg, load_program(cfg.program), cfg.correct_input.read_bytes(),
                   cfg.incorrect_input.read_bytes())


_CACHE = {}


def fixture(name):
    if name not in _CACHE:
        _CACHE[name] = load_fixture(name)
    return _CACHE[name]


@pytest.fixture(params=FIXTURES)
def corpus(request):
    return fixture(request.param)


@pytest.fixture
def authgate():
    return fixture("authgate")


@pytest.fixture
def fib():
    return load_program(DATA / "fib.asm")


def asm(text):
    return assemble(text)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
