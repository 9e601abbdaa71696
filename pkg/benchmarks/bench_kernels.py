"""Time the compiled and numpy backends of the pipelined cost-floor kernel.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Runs the kernel on the desk instance (12 layers x 4 experts, every beta
up to the largest expert load), checks both backends agree and prints
the best-of-N wall time of each.
"""
import argparse
import timeit

import numpy as np

from faasmoe import kernels
from faasmoe.config import PlannerConfig, canonical_model, canonical_profile
from faasmoe.costmodel import ExpertDemand
from faasmoe.planner import _PipelinedBounds, _gmin_lookup, cost_options


def desk_instance():
    profile, model = canonical_profile(), canonical_model()
    demand = ExpertDemand([[6000, 2500, 1200, 540]] * model.n_layers)
    return _PipelinedBounds(demand, _gmin_lookup(profile, None), profile, model,
                            cost_options(PlannerConfig()), 6000)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    inst = desk_instance()
    lam = 0.5 * inst.heavy
    call_args = (inst.r, inst.feas, inst.head, inst.unit, inst.mem_gb, lam, *inst.consts,
                 1, inst.beta_hi, inst.multiplier)
    results, times = {}, {}
    for name, fn in kernels.backends().items():
        results[name] = fn(*call_args)
        times[name] = min(timeit.repeat(lambda: fn(*call_args), number=1, repeat=args.repeat))
    ref = results["python"]
    for name, t in sorted(times.items()):
        same = np.array_equal(results[name], ref)
        print(f"{name:8s} {t * 1e3:9.2f} ms  identical_to_python={same}")
    if "cython" in times:
        print(f"speedup  {times['python'] / times['cython']:.1f}x")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
