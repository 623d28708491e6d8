#!/usr/bin/env python3
"""Benchmark the compiled physics kernel against the pure-numpy fallback.

Runs the same workloads through both backends, reports per-substep wall
time and the speedup, and cross-checks that the trajectories agree.

Usage: python benchmarks/bench_physics.py [--substeps N]
"""

import argparse
import time

import numpy as np

from fallguard.datagen import make_controller
from fallguard.model import default_model
from fallguard.physics import HAVE_KERNEL, Engine, SimState


def run(engine: Engine, state: SimState, targets, n_frames: int):
    s = state.copy()
    t0 = time.perf_counter()
    for _ in range(n_frames):
        s, _ = engine.step_frame(s, targets, 4)
    return time.perf_counter() - t0, s


def falling_state(engine):
    s = engine.standing_state()
    s.base_pose[1] += 0.2
    s.base_pose[2] = 0.9
    s.base_vel[:] = (1.5, 0.0, 2.0)
    return s


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--frames", type=int, default=2000,
                        help="control frames per workload (4 substeps each)")
    args = parser.parse_args()

    if not HAVE_KERNEL:
        print("compiled kernel not built; run pip install -e . first")

    model = default_model()
    workloads = {}
    eng = Engine(model, backend="python")
    workloads["standing"] = eng.standing_state()
    workloads["falling"] = falling_state(eng)

    print(f"{args.frames} control frames x 4 substeps per workload\n")
    print(f"{'workload':<10} {'python us/substep':>18} "
          f"{'compiled us/substep':>20} {'speedup':>8}")
    for name, init in workloads.items():
        times = {}
        finals = {}
        for backend in ("python", "compiled") if HAVE_KERNEL else ("python",):
            engine = Engine(model, backend=backend)
            targets = engine.arrays.default_q
            elapsed, final = run(engine, init, targets, args.frames)
            times[backend] = elapsed / (args.frames * 4) * 1e6
            finals[backend] = final
        if HAVE_KERNEL:
            drift = np.max(np.abs(
                finals["python"].base_pose - finals["compiled"].base_pose))
            assert drift < 1e-6, f"backends disagree by {drift}"
            print(f"{name:<10} {times['python']:>18.2f} "
                  f"{times['compiled']:>20.2f} "
                  f"{times['python'] / times['compiled']:>7.1f}x")
        else:
            print(f"{name:<10} {times['python']:>18.2f} {'-':>20} {'-':>8}")


if __name__ == "__main__":
    main()
