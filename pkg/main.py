#!/usr/bin/env python3
"""
Adapt-by-pruning command line.

Learns task-specific binary masks over a frozen pre-trained network, runs the
comparison pruners and ablations, and sweeps experiment plans.
"""

import argparse
import logging
import os
import sys
import tomllib
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional

from analysis import (
    SensitivityConfig,
    compare_profiles,
    network_layout,
    recovery_report,
    sensitivity_report,
    sparsity_profile,
    write_csv,
    write_json,
)
from harness import (
    DEFAULT_SEEDS,
    ExperimentPlan,
    MethodKind,
    default_gamma_grid,
    default_workers,
    grid_search,
    run_method,
    run_plan,
)
from model import Batch, evaluate
from serialization import (
    artifact_size_report,
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    load_mask,
    save_checkpoint,
    save_mask,
)
from tasks import GeneratedTask, TaskSpec, generate_task

logger = logging.getLogger(__name__)

BASE_CHECKPOINT = "base.abpc"
DATA_FILE = "data.abpc"
BASELINE_METHODS = [str(m) for m in MethodKind if not m.learns_mask]


def setup_logging() -> None:
    """Configure logging; ABP_LOG_LEVEL overrides the INFO default."""
    level = os.environ.get("ABP_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adapt-by-pruning", description=__doc__)
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("--config", type=Path, help="TOML config file")
        sub.add_argument("--out", type=Path, default=Path("out"))
        sub.add_argument(
            "--task-dir",
            type=Path,
            help="Directory written by 'pretrain'; reused instead of regenerating",
        )
        sub.add_argument(
            "--sparsity",
            type=float,
            default=0.5,
            help="Target sparsity; sweep uses the [plan] grid, pretrain ignores it",
        )

    add_common(commands.add_parser("pretrain", help="Generate a task and base"))
    adapt = commands.add_parser("adapt", help="Learn a mask by adapt-by-pruning")
    add_common(adapt)
    adapt.add_argument("--no-recovery", action="store_true")

    baseline = commands.add_parser("baseline", help="Run a comparison pruner")
    add_common(baseline)
    baseline.add_argument("--method", choices=BASELINE_METHODS, default="mp")

    analyze = commands.add_parser("analyze", help="Layer and component sparsity")
    add_common(analyze)
    analyze.add_argument("--mask", type=Path, required=True)
    analyze.add_argument("--compare", type=Path, help="Second mask to compare with")

    add_common(commands.add_parser("sensitivity", help="Shuffle/reinit ablation"))

    add_common(commands.add_parser("sweep", help="Run an experiment plan"))

    grid = commands.add_parser("grid-search", help="Tune the sparsity penalty")
    add_common(grid)
    grid.add_argument(
        "--method",
        choices=[str(m) for m in MethodKind if m.learns_mask],
        default=str(MethodKind.OURS),
    )
    return parser


def load_config(path: Optional[Path]) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as e:
        raise SystemExit(f"Cannot read config file {path}: {e}")


def resolve_seed(seed: int) -> int:
    override = os.environ.get("ABP_SEED")
    if not override:
        return seed
    try:
        return int(override)
    except ValueError:
        raise SystemExit(
            f"Environment variable ABP_SEED must be an integer, got {override}"
        )


def save_task(task: GeneratedTask, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(task.base_net, directory / BASE_CHECKPOINT)
    splits = {"train": task.train, "validation": task.validation, "eval": task.eval}
    tensors = {}
    for name, split in splits.items():
        tensors[f"{name}/inputs"] = split.inputs
        tensors[f"{name}/targets"] = split.targets
    (directory / DATA_FILE).write_bytes(encode_tensors(tensors))


def load_task(spec: TaskSpec, directory: Path) -> GeneratedTask:
    tensors = decode_tensors((directory / DATA_FILE).read_bytes())
    splits = {
        name: Batch(tensors[f"{name}/inputs"], tensors[f"{name}/targets"])
        for name in ("train", "validation", "eval")
    }
    return GeneratedTask(
        spec=spec,
        train=splits["train"],
        validation=splits["validation"],
        eval=splits["eval"],
        base_net=load_checkpoint(directory / BASE_CHECKPOINT),
    )


def _task(args: argparse.Namespace, plan: ExperimentPlan) -> GeneratedTask:
    if args.task_dir is not None:
        logger.info(f"Loading task from {args.task_dir}")
        return load_task(plan.task, args.task_dir)
    return generate_task(plan.task)


def _run_single(
    args: argparse.Namespace,
    plan: ExperimentPlan,
    method: MethodKind,
    seed: int,
) -> int:
    task = _task(args, plan)
    net, result = run_method(
        task, method, args.sparsity, seed, plan.training, plan.pruner
    )
    evaluation = evaluate(net, task.eval, mask=result.mask)
    args.out.mkdir(parents=True, exist_ok=True)
    result.metrics.write_jsonl(args.out / "metrics.jsonl")
    save_mask(result.mask, args.out / "mask.abpm")
    write_json(
        {
            "method": str(method),
            "seed": seed,
            "target_sparsity": args.sparsity,
            "achieved_sparsity": result.achieved_sparsity,
            "steps_run": result.steps_run,
            "stopped_early": result.stopped_early,
            "eval_loss": evaluation.loss,
            "eval_metric": evaluation.task_metric,
            "metric_name": evaluation.metric_name,
        },
        args.out / "summary.json",
    )
    logger.info(
        f"{method} at sparsity {result.achieved_sparsity:.4f}: "
        f"{evaluation.metric_name} {evaluation.task_metric:.4f}"
    )
    return 0


def _pretrain(args: argparse.Namespace, plan: ExperimentPlan) -> int:
    task = generate_task(plan.task)
    save_task(task, args.out)
    sizes = artifact_size_report(task.base_net)
    write_json(
        {"weight_bytes": sizes.weight_bytes, "mask_bytes": sizes.mask_bytes},
        args.out / "artifact_sizes.json",
    )
    logger.info(
        f"Saved task to {args.out}; masked weights take {sizes.weight_bytes} bytes, "
        f"a mask {sizes.mask_bytes} bytes"
    )
    return 0


def _analyze(args: argparse.Namespace, plan: ExperimentPlan) -> int:
    task = _task(args, plan)
    layout = network_layout(task.base_net)
    profile = sparsity_profile(load_mask(args.mask), layout)
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(profile.to_rows(), args.out / "profile.csv")
    report: dict[str, Any] = {
        "target_sparsity": args.sparsity,
        "overall": profile.overall,
        "by_layer": profile.by_layer(),
        "by_component": {str(k): v for k, v in profile.by_component().items()},
    }
    if args.compare is not None:
        other = sparsity_profile(load_mask(args.compare), layout)
        delta = compare_profiles(profile, other)
        report["delta"] = {
            "overall": delta.overall,
            "by_layer": delta.by_layer,
            "by_component": {str(k): v for k, v in delta.by_component.items()},
        }
    write_json(report, args.out / "profile.json")
    logger.info(f"Overall sparsity {profile.overall:.4f}")
    return 0


def _sensitivity(
    args: argparse.Namespace,
    plan: ExperimentPlan,
    seed: int,
    config: dict[str, Any],
) -> int:
    task = _task(args, plan)
    try:
        sensitivity = SensitivityConfig.from_mapping(
            {**config.get("sensitivity", {}), "seed": seed}
        )
    except (TypeError, ValueError) as e:
        raise SystemExit(f"Invalid sensitivity config: {e}")
    head_init = task.base_net.head_params()
    net, result = run_method(
        task, MethodKind.OURS, args.sparsity, seed, plan.training, plan.pruner
    )
    report = sensitivity_report(
        net, result.mask, task.train, task.eval, sensitivity, head_init=head_init
    )
    args.out.mkdir(parents=True, exist_ok=True)
    write_csv(report.to_rows(), args.out / "sensitivity.csv")
    write_json(asdict(report), args.out / "sensitivity.json")
    return 0


def _sweep(args: argparse.Namespace, plan: ExperimentPlan) -> int:
    store = run_plan(plan, args.out)
    methods = set(plan.methods)
    if {MethodKind.OURS, MethodKind.OURS_NO_RECOVERY} <= methods:
        with_recovery = {}
        without_recovery = {}
        for sparsity in plan.sparsities:
            with_row = store.cell(MethodKind.OURS, sparsity)
            without_row = store.cell(MethodKind.OURS_NO_RECOVERY, sparsity)
            if with_row and without_row and with_row.mean is not None:
                if without_row.mean is not None:
                    with_recovery[sparsity] = with_row.mean
                    without_recovery[sparsity] = without_row.mean
        table = recovery_report(with_recovery, without_recovery)
        write_csv(table.to_rows(), args.out / "recovery.csv")
    if not store.all_completed:
        logger.error("Some arms failed; see summary.json files under the output")
        return 1
    return 0


def _grid_search(args: argparse.Namespace, plan: ExperimentPlan, seed: int) -> int:
    task = _task(args, plan)
    result = grid_search(
        task,
        MethodKind(args.method),
        default_gamma_grid(),
        args.sparsity,
        seed=seed,
        training=plan.training,
        pruner=plan.pruner,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    write_json(
        {
            "best_index": result.best_index,
            "best_overrides": result.best_overrides,
            "arms": [asdict(arm) for arm in result.arms],
        },
        args.out / "grid_search.json",
    )
    save_mask(result.mask, args.out / "mask.abpm")
    logger.info(f"Best grid entry {result.best_index}: {result.best_overrides}")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    setup_logging()
    try:
        return _main(argv)
    except (RuntimeError, ValueError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1


def _main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    seed = resolve_seed(args.seed)
    config = load_config(args.config)
    plan_values = dict(config.get("plan", {}))
    plan_values.setdefault("workers", default_workers())
    if args.command == "sweep":
        plan_values.setdefault("seeds", [seed + k for k in range(len(DEFAULT_SEEDS))])
    try:
        plan = ExperimentPlan.from_mapping({**config, "plan": plan_values})
    except (TypeError, ValueError) as e:
        raise SystemExit(f"Invalid configuration: {e}")
    logger.info(f"Running '{args.command}' with seed {seed}")

    if args.command == "pretrain":
        return _pretrain(args, plan)
    if args.command == "adapt":
        method = MethodKind.OURS_NO_RECOVERY if args.no_recovery else MethodKind.OURS
        return _run_single(args, plan, method, seed)
    if args.command == "baseline":
        return _run_single(args, plan, MethodKind(args.method), seed)
    if args.command == "analyze":
        return _analyze(args, plan)
    if args.command == "sensitivity":
        return _sensitivity(args, plan, seed, config)
    if args.command == "grid-search":
        return _grid_search(args, plan, seed)
    return _sweep(args, plan)


if __name__ == "__main__":
    sys.exit(main())
