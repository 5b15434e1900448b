"""Command-line front end.

Subcommands: ``plan`` (one-shot recovery decision), ``estimate`` (step time
and memory of a plan file), ``simulate`` (failure simulation, trace CSVs and
a summary), ``validate`` (schema and invariant checks). Exit codes: 0 ok,
2 bad input, 3 infeasible. ``ODYSSEY_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .domain import (
    InfeasibleError,
    Policy,
    SchemaError,
    dumps_canonical,
    loads_document,
    plan_from_dict,
    plan_to_dict,
    profile_from_dict,
    state_from_dict,
    validate_plan,
)
from .estimator import (
    memory_violations,
    plan_peak_memory,
    plan_step_time,
    pipeline_step_seconds,
)
from .planner import SearchConfig, select_policy
from .restorer import plan_sync_time
from .simulator import (
    SimPolicy,
    compare_policies,
    run_simulation,
    scenario_from_dict,
    trace_csv_lines,
)

log = logging.getLogger("odyssey")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3


def _read_json(path: str, what: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read {what} file {path}: {exc}") from None
    return loads_document(text, what)


def _sha256(path: str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_manifest(out_dir: Path, inputs: dict[str, str], seeds: list[int], outputs: list[str]) -> None:
    manifest = {
        "tool_version": __version__,
        "inputs": {
            name: {"path": path, "sha256": _sha256(path)}
            for name, path in inputs.items()
        },
        "seeds": seeds,
        "out_dir": str(out_dir),
        "outputs": sorted(outputs),
    }
    _write_atomic(out_dir / "manifest.json", dumps_canonical(manifest))


def _search_overrides(args: argparse.Namespace) -> SearchConfig:
    return SearchConfig(
        dp_range=tuple(args.dp_range) if args.dp_range else None,
        pp_range=tuple(args.pp_range) if args.pp_range else None,
        max_faults_lookahead=args.max_faults,
        expected_residence_seconds=args.residence,
    )


def _format_gib(n_bytes: int) -> str:
    return f"{n_bytes / 2**30:.2f} GiB"


def _print_plan_layout(plan, profile) -> None:
    print(f"  policy: {plan.policy.value}")
    print(f"  dp_degree: {plan.parallel.dp_degree}  nodes: {plan.parallel.n_nodes}")
    memory = plan_peak_memory(plan, profile)
    for p in range(plan.parallel.dp_degree):
        intervals = " ".join(
            f"[{start},{end})" for start, end in plan.layer_assignment[p]
        )
        peaks = " ".join(_format_gib(m) for m in memory[p])
        print(
            f"  pipeline {p}: stages={plan.parallel.stage_counts[p]} "
            f"micro_batches={plan.batch_assignment[p]} layers={intervals}"
        )
        print(f"    peak memory per stage: {peaks} (limit {_format_gib(profile.device_memory_limit)})")
    if plan.policy is Policy.DATA_REROUTING:
        print(f"  failures per stage: {list(plan.failure_distribution)}")


def cmd_plan(args: argparse.Namespace) -> int:
    profile = profile_from_dict(_read_json(args.profile, "profile"))
    state = state_from_dict(_read_json(args.state, "state"))
    problems = validate_plan(state.current_plan, state, profile)
    if problems:
        for p in problems:
            print(f"state error: {p}", file=sys.stderr)
        return EXIT_INPUT
    if not state.failed_nodes:
        print("no fault; current plan retained")
        return EXIT_OK
    cfg = _search_overrides(args)
    decision = select_policy(state, profile, cfg)
    print(f"chosen policy: {decision.chosen.policy.value}")
    _print_plan_layout(decision.chosen, profile)
    print(f"estimated step time: {decision.estimated_step_seconds:.6f} s")
    print(f"estimated transition time: {decision.estimated_transition_seconds:.6f} s")
    print(f"objective (effective samples/s): {decision.objective_value:.6f}")
    if decision.rejected_alternatives:
        print("rejected alternatives:")
        for summary, objective in decision.rejected_alternatives:
            print(f"  {summary}  objective={objective:.6f}")
    else:
        print("rejected alternatives: none")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_atomic(out_dir / "plan.json", dumps_canonical(plan_to_dict(decision.chosen)))
        _write_manifest(
            out_dir,
            {"profile": args.profile, "state": args.state},
            [],
            ["plan.json"],
        )
    return EXIT_OK


def cmd_estimate(args: argparse.Namespace) -> int:
    profile = profile_from_dict(_read_json(args.profile, "profile"))
    plan = plan_from_dict(_read_json(args.plan, "plan"))
    structural = _plan_structure_problems(plan, profile)
    if structural:
        for p in structural:
            print(f"invalid plan: {p}", file=sys.stderr)
        return EXIT_INFEASIBLE
    step = plan_step_time(plan, profile)
    print(f"step time: {step:.6f} s")
    for p in range(plan.parallel.dp_degree):
        if plan.batch_assignment[p] > 0:
            span = pipeline_step_seconds(
                plan.stage_layer_counts(p), plan.batch_assignment[p], profile
            )
        else:
            span = 0.0
        print(f"  pipeline {p}: makespan {span:.6f} s")
    rounds, sync_seconds = plan_sync_time(plan, profile)
    print(f"sync rounds: {rounds}  sync time: {sync_seconds:.6f} s")
    _print_plan_layout(plan, profile)
    over = memory_violations(plan, profile)
    if over:
        for item in over:
            print(f"memory violation: {item}", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


def _plan_structure_problems(plan, profile) -> list[str]:
    """Plan-only invariant checks (no cluster state required)."""
    out = []
    par = plan.parallel
    if par.dp_degree < 1 or len(par.stage_counts) != par.dp_degree:
        out.append("dp_degree must match stage_counts length and be >= 1")
        return out
    if len(plan.layer_assignment) != par.dp_degree:
        out.append("layer_assignment must cover every pipeline")
        return out
    for p, intervals in enumerate(plan.layer_assignment):
        if len(intervals) != par.stage_counts[p]:
            out.append(f"pipeline {p} interval count != stage count")
            continue
        cursor = 0
        for start, end in intervals:
            if start != cursor or end <= start:
                out.append(f"pipeline {p} intervals are not contiguous from 0")
                break
            cursor = end
        else:
            if cursor != profile.num_layers:
                out.append(
                    f"pipeline {p} covers {cursor} layers, profile has {profile.num_layers}"
                )
    if len(plan.batch_assignment) != par.dp_degree:
        out.append("batch_assignment must have one entry per pipeline")
    if plan.policy is Policy.DATA_REROUTING:
        if not par.is_symmetric:
            out.append("data rerouting requires equal stage counts")
        elif len(plan.failure_distribution) != par.stage_counts[0]:
            out.append("failure_distribution needs one entry per stage")
        elif any(f >= par.dp_degree for f in plan.failure_distribution):
            out.append("some stage has no surviving data-parallel peer")
    return out


def cmd_simulate(args: argparse.Namespace) -> int:
    profile = profile_from_dict(_read_json(args.profile, "profile"))
    doc = _read_json(args.scenario, "scenario")
    scenario = scenario_from_dict(doc)
    seeds = args.seed if args.seed else [scenario.seed]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    # --policy overrides; an explicit policy in the scenario file also picks
    # the single-policy mode. Neither present: compare all three.
    single = args.policy or ("policy" in doc and doc["policy"])
    if single:
        policies = [SimPolicy(single)]
        rows = []
        summary: dict = {"seeds": seeds, "per_policy": {}}
        for policy in policies:
            values = []
            for seed in seeds:
                trace = run_simulation(replace(scenario, policy=policy, seed=seed), profile)
                name = f"trace_{policy.value}_seed{seed}.csv"
                _write_atomic(out_dir / name, "\n".join(trace_csv_lines(trace)) + "\n")
                outputs.append(name)
                values.append(trace.average_throughput)
            summary["per_policy"][policy.value] = {
                "average_throughput_per_seed": values,
                "mean_average_throughput": sum(values) / len(values),
            }
            rows.append((policy.value, sum(values) / len(values)))
    else:
        summary, traces = compare_policies(scenario, profile, seeds)
        for (policy_name, seed), trace in sorted(traces.items()):
            name = f"trace_{policy_name}_seed{seed}.csv"
            _write_atomic(out_dir / name, "\n".join(trace_csv_lines(trace)) + "\n")
            outputs.append(name)
        rows = [
            (name, stats["mean_average_throughput"])
            for name, stats in summary["per_policy"].items()
        ]

    _write_atomic(out_dir / "summary.json", dumps_canonical(summary))
    outputs.append("summary.json")
    _write_manifest(
        out_dir,
        {"profile": args.profile, "scenario": args.scenario},
        seeds,
        outputs,
    )

    print(f"{'policy':<22}{'mean samples/s':>16}")
    for name, mean in rows:
        print(f"{name:<22}{mean:>16.4f}")
    if "ratios" in summary:
        for key, stats in summary["ratios"].items():
            print(
                f"{key}: min={stats['min']:.4f} mean={stats['mean']:.4f} "
                f"max={stats['max']:.4f}"
            )
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    profile = profile_from_dict(_read_json(args.profile, "profile"))
    violations: list[str] = []
    if args.plan and args.state:
        plan = plan_from_dict(_read_json(args.plan, "plan"))
        state = state_from_dict(_read_json(args.state, "state"))
        violations = validate_plan(plan, state, profile)
    elif args.plan:
        plan = plan_from_dict(_read_json(args.plan, "plan"))
        violations = _plan_structure_problems(plan, profile)
    elif args.state:
        state = state_from_dict(_read_json(args.state, "state"))
        violations = validate_plan(state.current_plan, state, profile)
    if violations:
        for v in violations:
            print(f"violation: {v}")
        return EXIT_INFEASIBLE
    print("ok")
    return EXIT_OK


def _parse_seed_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="odyssey",
        description="Fault-tolerance planning and failure simulation for "
        "pipeline/data-parallel training clusters.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    plan_p = sub.add_parser("plan", help="decide the recovery policy for a faulted state")
    plan_p.add_argument("--profile", required=True)
    plan_p.add_argument("--state", required=True)
    plan_p.add_argument("--out", default=None)
    plan_p.add_argument("--dp-range", nargs=2, type=int, metavar=("LO", "HI"))
    plan_p.add_argument("--pp-range", nargs=2, type=int, metavar=("LO", "HI"))
    plan_p.add_argument("--max-faults", type=int, default=None)
    plan_p.add_argument(
        "--residence",
        type=float,
        default=3600.0,
        help="expected seconds until the next fault (objective horizon)",
    )
    plan_p.set_defaults(func=cmd_plan)

    est_p = sub.add_parser("estimate", help="estimate step time and memory of a plan")
    est_p.add_argument("--profile", required=True)
    est_p.add_argument("--plan", required=True)
    est_p.set_defaults(func=cmd_estimate)

    sim_p = sub.add_parser("simulate", help="run the failure simulation")
    sim_p.add_argument("--profile", required=True)
    sim_p.add_argument("--scenario", required=True)
    sim_p.add_argument("--out", required=True)
    sim_p.add_argument(
        "--seed",
        type=_parse_seed_list,
        default=None,
        help="comma-separated seed list overriding the scenario seed",
    )
    sim_p.add_argument(
        "--policy",
        choices=[p.value for p in SimPolicy],
        default=None,
        help="run a single policy instead of the three-way comparison",
    )
    sim_p.set_defaults(func=cmd_simulate)

    val_p = sub.add_parser("validate", help="validate input documents")
    val_p.add_argument("--profile", required=True)
    val_p.add_argument("--state", default=None)
    val_p.add_argument("--plan", default=None)
    val_p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("ODYSSEY_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        # bad numeric arguments (for example an empty search range)
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
