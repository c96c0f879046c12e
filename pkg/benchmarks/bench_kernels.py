"""Time the numba kernels against the pure-Python fallback.

Each backend runs in its own interpreter (the backend is chosen at import
time from RETFLIP_NO_JIT). Workloads are sized so the pure path finishes in
seconds; JIT compile time is excluded by a warm-up call. Without the JIT,
scan_pairs switches to a vectorised numpy routine instead of looping.

    python benchmarks/bench_kernels.py [--repeat 3] [--json]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r'''
import json, sys, time
import numpy as np
from retflip._jit import backend_name
from retflip._scan import scan_pairs
from retflip.asm import assemble
from retflip.memmodel import (BaitModel, FlipRequirement, FlipStatistics,
                              bait_simulation, page_probability_mc)
from retflip.vm import run

repeat = int(sys.argv[1])
LOOP = assemble("""
    movi r1, 0
    movi r2, 1
    movi r3, 5000
top:
    add r1, r2
    cmp r1, r3
    jnz top
    halt 0
""")
rng = np.random.default_rng(1)
srcs = rng.integers(0, 1 << 40, 300, dtype=np.uint64)
dests = rng.integers(0, 1 << 40, 3000, dtype=np.uint64)
stats = FlipStatistics(100, 100, 32768, 2200)
req = FlipRequirement(1, 1)

work = {
    "vm.run (15k instructions)": lambda: run(LOOP),
    "scan_pairs (300 x 3000, d=3)": lambda: scan_pairs(srcs, dests, 3, False),
    "page_probability_mc (500 trials)": lambda: page_probability_mc(stats, req, 500, 1),
    "bait_simulation (200 trials x 21 B)": lambda: bait_simulation(
        BaitModel(0, 30, noise_rate=0.3), 200, 1, list(range(20, 41))),
}
out = {"backend": backend_name(), "seconds": {}}
for name, fn in work.items():
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    out["seconds"][name] = best
print(json.dumps(out))
'''


def measure(no_jit, repeat):
    env = dict(os.environ, RETFLIP_NO_JIT="1" if no_jit else "0")
    proc = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                          capture_output=True, text=True, check=True)
    return json.loads(proc.stdout)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3, help="timed runs per workload (best kept)")
    ap.add_argument("--json", action="store_true", help="print raw timings as JSON")
    args = ap.parse_args()
    jit, pure = measure(False, args.repeat), measure(True, args.repeat)
    if args.json:
        print(json.dumps({"jit": jit, "pure": pure}, indent=2))
        return
    print(f"{'workload':<38}{jit['backend']:>10}{pure['backend']:>10}{'speedup':>10}")
    for name, t_jit in jit["seconds"].items():
        t_pure = pure["seconds"][name]
        print(f"{name:<38}{t_jit:>9.4f}s{t_pure:>9.4f}s{t_pure / t_jit:>9.1f}x")


if __name__ == "__main__":
    main()
