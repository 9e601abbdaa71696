"""Command-line entry point: profile, plan, simulate, tune and compare.

Every output file starts with a ``#`` line carrying the configuration
hash and the seed.  Exit codes: 0 success, 2 unreadable or invalid
input, 3 no deployment meets the constraints, 4 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import bo
from .compare import compare, write_compare_csv
from .config import (ConfigError, PlannerConfig, TunerConfig, WorkloadConfig, canonical_model,
                     canonical_profile, config_hash, load_model, load_profile, load_workload)
from .costmodel import (ExpertDemand, evaluate_plan, format_plan, parse_plan,
                        structure_violations, write_breakdown_csv)
from .planner import NoPlanError, cost_options, plan_deployment
from .predictor import write_batch_csv
from .sim import simulate, write_events_csv, write_report_csv
from .workload import generate_workload

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("faasmoe")


class Infeasible(RuntimeError):
    pass


@dataclasses.dataclass
class RunConfig:
    profile: object
    model: object
    workload: WorkloadConfig
    tuner: TunerConfig
    planner: PlannerConfig
    seed: int
    out: Path
    k: int

    def digest(self, *extra) -> str:
        return config_hash(self.profile, self.model, self.workload, self.tuner, self.planner,
                           self.k, *extra)

    def header(self, command: str, *extra) -> str:
        return f"faasmoe {command} config={self.digest(*extra)} seed={self.seed}"


def _demand_csv(path, demand: ExpertDemand, header: str):
    lines = [f"# {header}", "layer,expert,tokens"]
    for e, row in enumerate(demand.tokens):
        lines += [f"{e},{i},{d}" for i, d in enumerate(row)]
    Path(path).write_text("\n".join(lines) + "\n")


def _load(args) -> RunConfig:
    profile = load_profile(args.profile) if args.profile else canonical_profile()
    model = load_model(args.model) if args.model else canonical_model()
    if args.workload:
        workload, tuner, planner = load_workload(args.workload)
    else:
        workload, tuner, planner = WorkloadConfig(), TunerConfig(), PlannerConfig()
    changes = {}
    if args.beta_max is not None:
        changes["beta_max"] = args.beta_max
    if args.time_budget_s is not None:
        changes["time_budget_s"] = args.time_budget_s
    if args.block_multiplier is not None:
        changes["block_multiplier"] = args.block_multiplier
    if args.printed_direct_constraint:
        changes["printed_direct_constraint"] = True
    if args.worst_layer is not None:
        changes["worst_layer"] = args.worst_layer
    try:
        planner = dataclasses.replace(planner, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.seed < 0 or args.seed >= 2 ** 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    k = workload.top_k if args.k is None else args.k
    if not 1 <= k <= min(model.experts_per_layer):
        raise ConfigError(f"k={k} outside [1, {min(model.experts_per_layer)}]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return RunConfig(profile, model, workload, tuner, planner, int(args.seed), out, k)


def _workload(rc: RunConfig, seed: int | None = None):
    return generate_workload(rc.workload, rc.model.experts_per_layer,
                             rc.seed if seed is None else seed)


def _eval_batches(rc: RunConfig, wl):
    if rc.tuner.batches > len(wl.batches):
        raise ConfigError(f"tuner.batches={rc.tuner.batches} exceeds workload.n_batches="
                          f"{len(wl.batches)}")
    return wl.batches[:rc.tuner.batches]


# ---------------------------------------------------------------- commands

def cmd_profile(rc: RunConfig, args) -> int:
    if rc.workload.profile_sequences == 0:
        raise ConfigError("workload.profile_sequences is 0: nothing to profile")
    wl = _workload(rc)
    header = rc.header("profile")
    table = wl.feature_table()
    table.to_csv(rc.out / "table.csv", header)
    for j, b in enumerate(wl.batches):
        write_batch_csv(rc.out / f"batch_{j}.csv", b.tokens.tolist(), header)
    log.info("profiled %d keys from %d tokens", len(table), wl.profile_batch.n_tokens)
    return EXIT_OK


def cmd_plan(rc: RunConfig, args) -> int:
    wl = _workload(rc)
    header = rc.header("plan")
    predicted = bo.pooled_prediction(wl.feature_table(), _eval_batches(rc, wl), rc.k,
                                     rc.workload.seq_len)
    _demand_csv(rc.out / "demand.csv", predicted, header)
    try:
        result, sols = plan_deployment(predicted, rc.profile, rc.model, rc.planner)
    except NoPlanError as exc:
        (rc.out / "plan_status.txt").write_text(f"# {header}\nno_plan {exc}\n")
        raise Infeasible(str(exc)) from exc
    (rc.out / "plan.txt").write_text(format_plan(result.plan, header))
    rows, _, _ = evaluate_plan(result.plan, predicted, rc.profile, rc.model, cost_options(rc.planner))
    write_breakdown_csv(rc.out / "plan_costs.csv", rows, header)
    lines = [f"# {header}", "solution,cost_GBs,e2e_latency_s,latency_ok,beta,optimal"]
    for s in sols:
        lines.append(f"method_{s.method},{s.cost:.9f},{s.e2e_latency:.9f},{int(s.latency_ok)},"
                     f"{s.beta},{int(s.optimal)}")
    lines.append(f"ods,{result.cost:.9f},{result.e2e_latency:.9f},{int(result.latency_ok)},"
                 f"{result.plan.beta},")
    (rc.out / "plan_summary.csv").write_text("\n".join(lines) + "\n")
    if not result.latency_ok:
        (rc.out / "plan_status.txt").write_text(f"# {header}\nlatency_limit_missed\n")
        raise Infeasible(f"best plan takes {result.e2e_latency:.3f} s, limit "
                         f"{rc.model.latency_limit:.3f} s")
    (rc.out / "plan_status.txt").write_text(f"# {header}\nok\n")
    return EXIT_OK


def cmd_simulate(rc: RunConfig, args) -> int:
    try:
        plan = parse_plan(Path(args.plan).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read plan: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    bad = structure_violations(plan, rc.profile, rc.model)
    if plan.beta < 1:
        raise ConfigError("plan beta must be >= 1")
    if bad:
        raise ConfigError(f"plan does not fit the model or platform: {bad[0]}")
    wl = _workload(rc)
    if args.empty_batch:
        real, n_tokens = ExpertDemand.zeros(rc.model.experts_per_layer), 0
    else:
        if not 0 <= args.batch < len(wl.batches):
            raise ConfigError(f"batch {args.batch} outside [0, {len(wl.batches) - 1}]")
        b = wl.batches[args.batch]
        real, n_tokens = b.demand(rc.model.experts_per_layer), b.n_tokens
    header = rc.header("simulate", plan.to_dict(), args.batch, args.empty_batch, args.noise_sigma)
    report = simulate(plan, real, rc.profile, rc.model, cost_options(rc.planner),
                      noise_sigma=args.noise_sigma, seed=rc.seed, n_tokens=n_tokens)
    write_report_csv(rc.out / "sim_report.csv", report, header)
    write_events_csv(rc.out / "sim_events.csv", report.events, header)
    return EXIT_OK


def cmd_tune(rc: RunConfig, args) -> int:
    wl = _workload(rc)
    header = rc.header("tune")
    result = bo.run(wl.feature_table(), _eval_batches(rc, wl), rc.profile, rc.model, rc.tuner,
                    rc.planner, rc.k, rc.workload.seq_len, rc.seed, rc.workload.vocab_size)
    bo.write_trace_csv(rc.out / "trace.csv", result, header)
    bo.write_pairs_csv(rc.out / "best_pairs.csv", result.best.pairs, header)
    if result.best.plan is None:
        raise Infeasible("no trial produced a deployment plan")
    (rc.out / "best_plan.txt").write_text(format_plan(result.best.plan, header))
    log.info("tuning stopped after %d iterations, best cost %.6f", result.iterations, result.best.cost)
    return EXIT_OK


def cmd_compare(rc: RunConfig, args) -> int:
    header = rc.header("compare", args.seeds)
    rows = []
    for s in range(args.seeds):
        seed = rc.seed + s
        wl = _workload(rc, seed)
        batches = _eval_batches(rc, wl)
        tuned = bo.run(wl.feature_table(), batches, rc.profile, rc.model, rc.tuner, rc.planner,
                       rc.k, rc.workload.seq_len, seed, rc.workload.vocab_size)
        rows += [(seed, o) for o in compare(tuned, batches, rc.profile, rc.model, rc.planner)]
    write_compare_csv(rc.out / "compare.csv", rows, header)
    return EXIT_OK


COMMANDS = {"profile": cmd_profile, "plan": cmd_plan, "simulate": cmd_simulate,
            "tune": cmd_tune, "compare": cmd_compare}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", help="platform profile YAML (default: built-in desk profile)")
    common.add_argument("--model", help="model spec YAML (default: 12 layers x 4 experts)")
    common.add_argument("--workload", help="workload/tuner/planner YAML (default: built-in)")
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--k", type=int, help="experts predicted per token (default: workload top_k)")
    common.add_argument("--beta-max", type=int, help="cap on the pipeline degree")
    common.add_argument("--time-budget-s", type=float, help="per-solve time budget in seconds")
    common.add_argument("--block-multiplier", choices=("blocks", "beta"),
                        help="pipelined replica time: multiply by block count or by beta as printed")
    common.add_argument("--printed-direct-constraint", action="store_true",
                        help="use the payload constraint exactly as printed (input size only)")
    common.add_argument("--worst-layer", choices=("highest", "lowest"),
                        help="layer struck by method selection when the latency limit is missed")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="faasmoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("profile", parents=[common], help="generate a workload and write the feature table")
    sub.add_parser("plan", parents=[common], help="predict demand and plan a deployment")
    p = sub.add_parser("simulate", parents=[common], help="run a plan on a serving batch")
    p.add_argument("--plan", required=True, help="plan file written by 'plan' or 'tune'")
    p.add_argument("--batch", type=int, default=0, help="serving batch index")
    p.add_argument("--empty-batch", action="store_true", help="simulate a batch with no tokens")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="log-normal timing noise")
    sub.add_parser("tune", parents=[common], help="tune the feature table against simulated cost")
    p = sub.add_parser("compare", parents=[common], help="tuned plan against baselines")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if getattr(args, "seeds", 1) < 1:
            raise ConfigError("--seeds must be >= 1")
        if getattr(args, "noise_sigma", 0.0) < 0:
            raise ConfigError("--noise-sigma must be >= 0")
        rc = _load(args)
        return COMMANDS[args.command](rc, args)
    except ConfigError as exc:
        print(f"faasmoe: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Infeasible as exc:
        print(f"faasmoe: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001
        print(f"faasmoe: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
