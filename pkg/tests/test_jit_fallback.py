"""The numba kernels and their pure-Python fallback give identical outputs."""

import os
import subprocess
import sys

import pytest

PROBE = r"""
import json, sys
from retflip._jit import backend_name
from retflip.cli import main
from retflip.memmodel import (BaitModel, FlipRequirement, FlipStatistics, bait_simulation,
                              page_probability_mc)
print(backend_name())
for argv in (["scan", "--fixture", "authgate"], ["scan", "--fixture", "straightline",
             "--candidate-mode", "exhaustive_offset", "--step2", "off"]):
    main(argv)
st = FlipStatistics(100, 100, 32768, 2200)
print(page_probability_mc(st, FlipRequirement(1, 1), trials=20_000, seed=3))
print(json.dumps(bait_simulation(BaitModel(0, 10, 0.3), 2_000, 1, range(25))))
"""


def run_probe(no_jit):
    env = dict(os.environ)
    env.pop("RETFLIP_NO_JIT", None)
    if no_jit:
        env["RETFLIP_NO_JIT"] = "1"
    out = subprocess.run([sys.executable, "-c", PROBE], capture_output=True, text=True,
                         env=env, timeout=600)
    assert out.returncode == 0, out.stderr
    backend, _, body = out.stdout.partition("\n")
    return backend, body


@pytest.mark.slow
def test_fallback_matches_jit():
    jit_backend, jit_out = run_probe(False)
    py_backend, py_out = run_probe(True)
    assert (jit_backend, py_backend) == ("numba", "python")
    assert jit_out == py_out and '"misauthentication": 1' in jit_out
