"""
Experiment runner: method x sparsity x seed sweeps, grid search over
sparsity-penalty schedules, and the on-disk result store.

Result store layout::

    <out>/<method>/s<sparsity>/seed<seed>/metrics.jsonl
    <out>/<method>/s<sparsity>/seed<seed>/mask.abpm
    <out>/<method>/s<sparsity>/seed<seed>/summary.json
    <out>/summary.csv

``summary.csv`` is recomputed from the per-arm ``summary.json`` files only.
"""

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from enum import StrEnum
from functools import lru_cache
from itertools import product
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import ttest_ind

from analysis import write_csv
from baselines import PrunerConfig, PrunerKind, run_fine_tuning, run_pruner
from mask_core import BinaryMask, PenaltyMode
from model import MaskedNetwork, evaluate
from serialization import save_mask
from tasks import GeneratedTask, TaskSpec, generate_task
from trainer import (
    InitSpread,
    PruningResult,
    TrainingConfig,
    adapt_by_pruning,
    expected_initial_sparsity,
)

logger = logging.getLogger(__name__)

DEFAULT_SPARSITIES = (0.2, 0.5, 0.7, 0.9, 0.95, 0.99)
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_GAMMAS = (1e-5, 1e-4, 1e-3)
SPARSITY_TOLERANCE = 0.05

STATUS_COMPLETED = "completed"
STATUS_FAILED = "failed"


class GridSearchError(RuntimeError):
    """Raised when every arm of a grid search failed."""


class MethodKind(StrEnum):
    OURS = "ours"
    OURS_NO_RECOVERY = "ours_no_recovery"
    RND = "rnd"
    MP = "mp"
    IMP = "imp"
    FEATURE_EXTRACTION = "feature_extraction"
    FINE_TUNING = "fine_tuning"

    @property
    def learns_mask(self) -> bool:
        return self in (MethodKind.OURS, MethodKind.OURS_NO_RECOVERY)


@dataclass(frozen=True)
class ExperimentPlan:
    """
    A sweep over methods, sparsity levels and seeds on one task.

    ``training`` and ``pruner`` hold config overrides applied to every arm;
    the arm's sparsity and seed always win.
    """

    task: TaskSpec = field(default_factory=TaskSpec)
    methods: tuple[MethodKind, ...] = (MethodKind.OURS,)
    sparsities: tuple[float, ...] = DEFAULT_SPARSITIES
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    training: Mapping[str, Any] = field(default_factory=dict)
    pruner: Mapping[str, Any] = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(MethodKind(m) for m in self.methods))
        object.__setattr__(self, "sparsities", tuple(float(s) for s in self.sparsities))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.methods or not self.sparsities or not self.seeds:
            raise ValueError("A plan needs at least one method, sparsity and seed")
        if any(not 0.0 < s < 1.0 for s in self.sparsities):
            raise ValueError(f"Sparsities must lie in (0, 1), got {self.sparsities}")
        if any(b <= a for a, b in zip(self.sparsities, self.sparsities[1:])):
            raise ValueError(
                f"Sparsities must be strictly increasing, got {self.sparsities}"
            )
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        # Fail fast on bad overrides rather than inside every arm.
        TrainingConfig.from_mapping({**self.training, "target_sparsity": 0.5})
        PrunerConfig.from_mapping({**self.pruner, "target_sparsity": 0.5})

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ExperimentPlan":
        """
        Build a plan from a parsed config document with optional ``task``,
        ``training``, ``pruner`` and ``plan`` tables.
        """
        tables = {"task", "training", "pruner", "plan", "sensitivity"}
        unknown = sorted(set(values) - tables)
        if unknown:
            raise ValueError(f"Unknown config tables: {', '.join(unknown)}")
        plan_values = dict(values.get("plan", {}))
        known = {f.name for f in fields(cls)} - {"task", "training", "pruner"}
        bad = sorted(set(plan_values) - known)
        if bad:
            raise ValueError(f"Unknown plan keys: {', '.join(bad)}")
        return cls(
            task=TaskSpec.from_mapping(values.get("task", {})),
            training=dict(values.get("training", {})),
            pruner=dict(values.get("pruner", {})),
            **plan_values,
        )


@dataclass(frozen=True)
class ArmResult:
    method: MethodKind
    sparsity: float
    seed: int
    status: str
    eval_metric: Optional[float] = None
    validation_metric: Optional[float] = None
    achieved_sparsity: Optional[float] = None
    steps_run: Optional[int] = None
    error: Optional[str] = None

    @property
    def completed(self) -> bool:
        return self.status == STATUS_COMPLETED


def arm_directory(root: Path, method: MethodKind, sparsity: float, seed: int) -> Path:
    return Path(root) / str(method) / f"s{sparsity:g}" / f"seed{seed}"


@lru_cache(maxsize=4)
def _cached_task(spec: TaskSpec) -> GeneratedTask:
    return generate_task(spec)


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def run_method(
    task: GeneratedTask,
    method: MethodKind,
    sparsity: float,
    seed: int,
    training: Mapping[str, Any],
    pruner: Mapping[str, Any],
) -> tuple[MaskedNetwork, PruningResult]:
    """
    Run one method on a copy of the task's base network.

    Returns:
        Tuple of (network to evaluate, result)
    """
    method = MethodKind(method)
    net = task.base_net.copy()
    if method.learns_mask:
        config = TrainingConfig.from_mapping(
            {
                **training,
                "target_sparsity": sparsity,
                "seed": seed,
                "allow_recovery": method == MethodKind.OURS,
            }
        )
        return net, adapt_by_pruning(net, task.train, config, eval_data=task.validation)

    config = PrunerConfig.from_mapping(
        {
            **pruner,
            "kind": PrunerKind(str(method)),
            "target_sparsity": sparsity,
            "seed": seed,
        }
    )
    if config.kind == PrunerKind.FINE_TUNING:
        return run_fine_tuning(net, task.train, config, eval_data=task.validation)
    return net, run_pruner(net, task.train, config, eval_data=task.validation)


def _validation_metric(result: PruningResult) -> float:
    final = result.metrics.final
    if final is None or final.task_metric is None:
        return math.nan
    return final.task_metric


def run_arm(
    task_spec: TaskSpec,
    method: MethodKind,
    sparsity: float,
    seed: int,
    training: Mapping[str, Any],
    pruner: Mapping[str, Any],
    out_dir: Path,
) -> ArmResult:
    """
    Run and persist one (method, sparsity, seed) cell.

    Failures are recorded in the arm's summary.json instead of raised.
    """
    directory = arm_directory(out_dir, method, sparsity, seed)
    directory.mkdir(parents=True, exist_ok=True)
    try:
        task = _cached_task(task_spec)
        net, result = run_method(task, method, sparsity, seed, training, pruner)
        evaluation = evaluate(net, task.eval, mask=result.mask)
        result.metrics.write_jsonl(directory / "metrics.jsonl")
        save_mask(result.mask, directory / "mask.abpm")
        arm = ArmResult(
            method=MethodKind(method),
            sparsity=sparsity,
            seed=seed,
            status=STATUS_COMPLETED,
            eval_metric=_finite_or_none(evaluation.task_metric),
            validation_metric=_finite_or_none(_validation_metric(result)),
            achieved_sparsity=result.achieved_sparsity,
            steps_run=result.steps_run,
        )
    except Exception as e:
        logger.warning(f"Arm {method} s={sparsity:g} seed={seed} failed: {e}")
        arm = ArmResult(
            method=MethodKind(method),
            sparsity=sparsity,
            seed=seed,
            status=STATUS_FAILED,
            error=f"{type(e).__name__}: {e}",
        )
    (directory / "summary.json").write_text(
        json.dumps(asdict(arm), indent=2, sort_keys=True)
    )
    logger.info(f"Arm {method} s={sparsity:g} seed={seed}: {arm.status}")
    return arm


@dataclass(frozen=True)
class SummaryRow:
    method: str
    sparsity: float
    completed: int
    failed: int
    mean: Optional[float]
    std: Optional[float]
    mean_achieved_sparsity: Optional[float]
    p_value_vs_ours: Optional[float]


def _load_arms(root: Path) -> list[ArmResult]:
    arms = []
    for path in sorted(Path(root).glob("*/s*/seed*/summary.json")):
        values = json.loads(path.read_text())
        values["method"] = MethodKind(values["method"])
        arms.append(ArmResult(**values))
    return arms


def summarize(root: Path) -> list[SummaryRow]:
    """
    Mean and sample standard deviation (ddof=1) of the eval metric per
    (method, sparsity) cell, with a two-sided Welch t-test against ``ours``.

    Reads only the stored per-arm summaries and writes ``summary.csv``.
    """
    cells: dict[tuple[str, float], list[ArmResult]] = {}
    for arm in _load_arms(root):
        cells.setdefault((str(arm.method), arm.sparsity), []).append(arm)

    def values_of(arms: list[ArmResult]) -> list[float]:
        return [
            a.eval_metric for a in arms if a.completed and a.eval_metric is not None
        ]

    rows = []
    for (method, sparsity), arms in sorted(cells.items()):
        values = values_of(arms)
        achieved = [a.achieved_sparsity for a in arms if a.completed]
        p_value = None
        reference = values_of(cells.get((str(MethodKind.OURS), sparsity), []))
        if method != MethodKind.OURS and len(values) >= 2 and len(reference) >= 2:
            statistic = ttest_ind(values, reference, equal_var=False)
            if math.isfinite(statistic.pvalue):
                p_value = float(statistic.pvalue)
        rows.append(
            SummaryRow(
                method=method,
                sparsity=sparsity,
                completed=sum(a.completed for a in arms),
                failed=sum(not a.completed for a in arms),
                mean=float(np.mean(values)) if values else None,
                std=float(np.std(values, ddof=1)) if len(values) >= 2 else None,
                mean_achieved_sparsity=float(np.mean(achieved)) if achieved else None,
                p_value_vs_ours=p_value,
            )
        )
    write_csv([asdict(row) for row in rows], Path(root) / "summary.csv")
    return rows


@dataclass(frozen=True)
class ResultStore:
    root: Path
    arms: list[ArmResult]
    summary: list[SummaryRow]

    @property
    def all_completed(self) -> bool:
        return all(arm.completed for arm in self.arms)

    def cell(self, method: MethodKind, sparsity: float) -> Optional[SummaryRow]:
        for row in self.summary:
            if row.method == str(method) and row.sparsity == sparsity:
                return row
        return None


def default_workers() -> int:
    return int(os.environ.get("ABP_WORKERS", "1"))


def run_plan(plan: ExperimentPlan, out_dir: Path) -> ResultStore:
    """
    Execute every (method, sparsity, seed) arm of the plan.

    Arms run in up to ``plan.workers`` processes, each with its own seed and
    output directory. A failed arm is recorded and the sweep continues.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = list(product(plan.methods, plan.sparsities, plan.seeds))
    logger.info(f"Running plan with {len(cells)} arms on {plan.workers} worker(s)")
    arguments = [
        (plan.task, method, sparsity, seed, plan.training, plan.pruner, out_dir)
        for method, sparsity, seed in cells
    ]
    if plan.workers == 1:
        arms = [run_arm(*args) for args in arguments]
    else:
        with ProcessPoolExecutor(max_workers=plan.workers) as executor:
            futures = [executor.submit(run_arm, *args) for args in arguments]
            arms = [future.result() for future in futures]

    failed = [arm for arm in arms if not arm.completed]
    if failed:
        logger.warning(f"{len(failed)} of {len(arms)} arms failed")
    return ResultStore(root=out_dir, arms=arms, summary=summarize(out_dir))


def default_gamma_grid(
    gammas: Sequence[float] = DEFAULT_GAMMAS,
) -> list[dict[str, Any]]:
    """Constant and linearly ramped penalty schedules for each gamma."""
    return [
        {"gamma": gamma, "gamma_mode": str(mode)}
        for gamma in gammas
        for mode in (PenaltyMode.CONSTANT, PenaltyMode.LINEAR_RAMP)
    ]


def with_initial_spread_arms(
    grid: Sequence[Mapping[str, Any]],
    training: Mapping[str, Any],
    target_sparsity: float,
) -> list[dict[str, Any]]:
    """
    Add a standard-deviation reading of theta_init_spread for every entry
    whose theta_0 already starts within tolerance of the target sparsity.

    Under the variance reading about 38% of theta_0 is non-positive, so low
    targets would stop at the first step.
    """
    extra = []
    for overrides in grid:
        config = TrainingConfig.from_mapping({**training, **overrides})
        if (
            config.theta_init_spread_kind == InitSpread.VARIANCE
            and expected_initial_sparsity(config)
            > target_sparsity - SPARSITY_TOLERANCE
        ):
            extra.append({**overrides, "theta_init_spread_kind": str(InitSpread.STD)})
    return [*(dict(overrides) for overrides in grid), *extra]


@dataclass(frozen=True)
class GridArm:
    index: int
    overrides: dict[str, Any]
    status: str
    validation_metric: Optional[float] = None
    achieved_sparsity: Optional[float] = None
    error: Optional[str] = None

    def overshoot(self, target: float) -> float:
        return abs(self.achieved_sparsity - target)


@dataclass(frozen=True)
class GridSearchResult:
    best_index: int
    best_overrides: dict[str, Any]
    arms: list[GridArm]
    mask: Optional[BinaryMask] = None


def _selection_key(arm: GridArm, target: float) -> tuple:
    metric = arm.validation_metric
    score = metric if metric is not None and math.isfinite(metric) else -math.inf
    return (-score, arm.overshoot(target), arm.index)


def grid_search(
    task: GeneratedTask,
    method: MethodKind,
    grid: Sequence[Mapping[str, Any]],
    target_sparsity: float,
    seed: int = 0,
    training: Optional[Mapping[str, Any]] = None,
    pruner: Optional[Mapping[str, Any]] = None,
) -> GridSearchResult:
    """
    Pick the grid entry with the best validation metric at the target sparsity.

    Grid entries are config overrides for the method (training overrides for
    the mask-learning methods, pruner overrides otherwise). Mask-learning grids
    are extended by ``with_initial_spread_arms``. Arms landing within
    SPARSITY_TOLERANCE above the target are preferred, then arms that reached
    it; ties go to the smaller sparsity overshoot, then to the earlier entry.

    Raises:
        GridSearchError: If the grid is empty or every arm failed
    """
    if not grid:
        raise GridSearchError("Grid search needs at least one configuration")
    method = MethodKind(method)
    training = dict(training or {})
    pruner = dict(pruner or {})
    if method.learns_mask:
        grid = with_initial_spread_arms(grid, training, target_sparsity)
    arms = []
    masks = {}
    for index, overrides in enumerate(grid):
        arm_training = {**training, **overrides} if method.learns_mask else training
        arm_pruner = pruner if method.learns_mask else {**pruner, **overrides}
        try:
            _, result = run_method(
                task, method, target_sparsity, seed, arm_training, arm_pruner
            )
        except Exception as e:
            logger.warning(f"Grid arm {index} {dict(overrides)} failed: {e}")
            arms.append(GridArm(index, dict(overrides), STATUS_FAILED, error=str(e)))
            continue
        masks[index] = result.mask
        arms.append(
            GridArm(
                index=index,
                overrides=dict(overrides),
                status=STATUS_COMPLETED,
                validation_metric=_validation_metric(result),
                achieved_sparsity=result.achieved_sparsity,
            )
        )
        logger.info(
            f"Grid arm {index} {dict(overrides)}: validation "
            f"{arms[-1].validation_metric:.4f}, sparsity {result.achieved_sparsity:.4f}"
        )

    completed = [arm for arm in arms if arm.status == STATUS_COMPLETED]
    if not completed:
        raise GridSearchError(f"All {len(arms)} grid arms failed")
    ceiling = target_sparsity + SPARSITY_TOLERANCE
    in_band = [
        arm
        for arm in completed
        if target_sparsity <= arm.achieved_sparsity <= ceiling
    ]
    reached = [arm for arm in completed if arm.achieved_sparsity >= target_sparsity]
    candidates = in_band or reached or completed
    if not in_band:
        logger.warning(
            f"No grid arm landed in [{target_sparsity}, {ceiling}], best of "
            f"{len(candidates)} arms is used"
        )
    best = min(candidates, key=lambda arm: _selection_key(arm, target_sparsity))
    return GridSearchResult(
        best_index=best.index,
        best_overrides=best.overrides,
        arms=arms,
        mask=masks[best.index],
    )
