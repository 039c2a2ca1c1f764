import csv
import json
import math
import os
from unittest.mock import patch

import numpy as np
import pytest
from scipy.stats import ttest_ind

from analysis import recovery_report
from harness import (
    SPARSITY_TOLERANCE,
    STATUS_COMPLETED,
    STATUS_FAILED,
    ExperimentPlan,
    GridSearchError,
    MethodKind,
    arm_directory,
    default_gamma_grid,
    default_workers,
    grid_search,
    run_arm,
    run_method,
    run_plan,
    summarize,
    with_initial_spread_arms,
)
from mask_core import BinaryMask
from tasks import generate_task
from trainer import MetricRecord, PruningResult, RunMetrics

TINY_TRAINING = {"step_budget": 30, "batch_size": 8, "eval_every": 10}
TINY_PRUNER = {"total_steps": 30, "batch_size": 8, "eval_every": 10}


def _fake_result(metric, achieved):
    metrics = RunMetrics()
    metrics.append(MetricRecord(10, 0.5, achieved, 0.0, 0.0, 0.1, 0.4, metric))
    return PruningResult(
        mask=BinaryMask.ones({"w": (4,)}),
        head_params=[],
        metrics=metrics,
        steps_run=10,
        stopped_early=False,
        achieved_sparsity=achieved,
    )


def _write_summary(root, method, sparsity, seed, metric, status=STATUS_COMPLETED):
    directory = arm_directory(root, method, sparsity, seed)
    directory.mkdir(parents=True)
    (directory / "summary.json").write_text(
        json.dumps(
            {
                "method": str(method),
                "sparsity": sparsity,
                "seed": seed,
                "status": status,
                "eval_metric": metric,
                "validation_metric": metric,
                "achieved_sparsity": sparsity,
                "steps_run": 100,
                "error": None,
            }
        )
    )


def test_method_kind_learns_mask():
    """Test which methods learn a mask with adapt-by-pruning."""
    assert MethodKind.OURS.learns_mask
    assert MethodKind.OURS_NO_RECOVERY.learns_mask
    assert not MethodKind.IMP.learns_mask


def test_arm_directory(tmp_path):
    """Test the result store layout."""
    path = arm_directory(tmp_path, MethodKind.MP, 0.95, 3)
    assert path == tmp_path / "mp" / "s0.95" / "seed3"


def test_experiment_plan_from_mapping():
    """Test parsing a full config document."""
    plan = ExperimentPlan.from_mapping(
        {
            "task": {"n_train": 40, "hidden_dims": [6]},
            "training": {"step_budget": 30, "gamma": 0.01},
            "pruner": {"total_steps": 30},
            "plan": {"methods": ["ours", "rnd"], "sparsities": [0.5], "seeds": [0]},
        }
    )

    assert plan.methods == (MethodKind.OURS, MethodKind.RND)
    assert plan.sparsities == (0.5,)
    assert plan.task.hidden_dims == (6,)
    assert plan.training["gamma"] == 0.01


def test_experiment_plan_defaults():
    """Test the default sparsity grid and seeds."""
    plan = ExperimentPlan()

    assert plan.sparsities == (0.2, 0.5, 0.7, 0.9, 0.95, 0.99)
    assert plan.seeds == (0, 1, 2, 3, 4)


@pytest.mark.parametrize(
    "values",
    [
        {"extra": {}},
        {"plan": {"repeats": 3}},
        {"plan": {"sparsities": [0.5, 0.2]}},
        {"plan": {"sparsities": [1.0]}},
        {"plan": {"methods": ["magic"]}},
        {"plan": {"workers": 0}},
        {"training": {"learning_rate": 0.1}},
        {"pruner": {"pruning_rate": 0.1}},
    ],
)
def test_experiment_plan_rejects_bad_config(values):
    """Test that invalid plans fail before any arm runs."""
    with pytest.raises(ValueError):
        ExperimentPlan.from_mapping(values)


@patch.dict(os.environ, {"ABP_WORKERS": "4"})
def test_default_workers_from_environment():
    """Test the worker count environment variable."""
    assert default_workers() == 4


def test_default_workers_unset():
    """Test a single worker when the variable is unset."""
    with patch.dict(os.environ, {}, clear=True):
        assert default_workers() == 1


def test_summarize_statistics(tmp_path):
    """Test means, sample standard deviations and the Welch p-value."""
    ours = [0.80, 0.82, 0.84]
    rnd = [0.50, 0.52, 0.55]
    for seed, (a, b) in enumerate(zip(ours, rnd)):
        _write_summary(tmp_path, MethodKind.OURS, 0.5, seed, a)
        _write_summary(tmp_path, MethodKind.RND, 0.5, seed, b)
    _write_summary(tmp_path, MethodKind.RND, 0.5, 3, None, status=STATUS_FAILED)

    rows = {row.method: row for row in summarize(tmp_path)}

    assert rows["ours"].mean == pytest.approx(0.82)
    assert rows["ours"].std == pytest.approx(0.02)
    assert rows["ours"].p_value_vs_ours is None
    assert rows["rnd"].completed == 3
    assert rows["rnd"].failed == 1
    expected = ttest_ind(rnd, ours, equal_var=False).pvalue
    assert rows["rnd"].p_value_vs_ours == pytest.approx(expected)
    with open(tmp_path / "summary.csv", newline="") as handle:
        assert len(list(csv.DictReader(handle))) == 2


def test_summarize_single_seed_has_no_spread(tmp_path):
    """Test that one seed gives a mean but no standard deviation."""
    _write_summary(tmp_path, MethodKind.MP, 0.9, 0, 0.6)

    (row,) = summarize(tmp_path)

    assert row.mean == 0.6
    assert row.std is None
    assert row.p_value_vs_ours is None


@patch("harness._cached_task")
@patch("harness.run_method")
def test_run_arm_records_failure(mock_run_method, mock_cached_task, tmp_path):
    """Test that a crashing arm writes a failed summary instead of raising."""
    mock_run_method.side_effect = FloatingPointError("loss diverged")

    arm = run_arm("spec", MethodKind.IMP, 0.5, 1, {}, {}, tmp_path)

    assert arm.status == STATUS_FAILED
    assert "FloatingPointError" in arm.error
    summary = json.loads(
        (arm_directory(tmp_path, MethodKind.IMP, 0.5, 1) / "summary.json").read_text()
    )
    assert summary["status"] == STATUS_FAILED
    assert summary["eval_metric"] is None


def test_run_method_leaves_task_network_untouched(tiny_task_spec):
    """Test that every method works on a copy of the base network."""
    task = generate_task(tiny_task_spec)
    before = task.base_net.base_layers[0].w0.tobytes()
    head_before = task.base_net.head_layers[0].weights.copy()

    net, result = run_method(
        task, MethodKind.FINE_TUNING, 0.5, 0, TINY_TRAINING, TINY_PRUNER
    )

    assert task.base_net.base_layers[0].w0.tobytes() == before
    np.testing.assert_array_equal(task.base_net.head_layers[0].weights, head_before)
    assert net is not task.base_net
    assert result.achieved_sparsity == 0.0


@patch("harness.run_method")
def test_grid_search_prefers_arms_within_tolerance(mock_run_method):
    """Test that arms short of the target or far above it lose to one in band."""
    mock_run_method.side_effect = [
        (None, _fake_result(0.95, 0.4)),
        (None, _fake_result(0.80, 0.52)),
        (None, _fake_result(0.85, 0.60)),
    ]
    grid = [{"gamma": 1e-5}, {"gamma": 1e-4}, {"gamma": 1e-3}]

    result = grid_search("task", MethodKind.OURS, grid, 0.5)

    assert result.best_index == 1
    assert result.best_overrides == {"gamma": 1e-4}
    assert mock_run_method.call_args_list[1][0][4]["gamma"] == 1e-4


@patch("harness.run_method")
def test_grid_search_falls_back_to_arms_reaching_target(mock_run_method):
    """Test that without an arm in band, an arm that reached the target wins."""
    mock_run_method.side_effect = [
        (None, _fake_result(0.95, 0.4)),
        (None, _fake_result(0.80, 0.70)),
        (None, _fake_result(0.85, 0.60)),
    ]

    result = grid_search("task", MethodKind.OURS, [{}, {}, {}], 0.5)

    assert result.best_index == 2


@patch("harness.run_method")
def test_grid_search_adds_spread_arms_below_initial_sparsity(mock_run_method):
    """Test that a low target also tries theta_init_spread as a deviation."""
    mock_run_method.side_effect = [
        (None, _fake_result(0.80, 0.40)),
        (None, _fake_result(0.75, 0.22)),
    ]

    result = grid_search("task", MethodKind.OURS, [{"gamma": 1e-4}], 0.2)

    assert len(result.arms) == 2
    assert mock_run_method.call_args_list[1][0][4]["theta_init_spread_kind"] == "std"
    assert result.best_index == 1
    assert result.best_overrides["theta_init_spread_kind"] == "std"


def test_with_initial_spread_arms():
    """Test which targets get the extra initial-spread arms."""
    grid = default_gamma_grid()

    low = with_initial_spread_arms(grid, {}, 0.2)
    high = with_initial_spread_arms(grid, {}, 0.5)
    already_std = with_initial_spread_arms(
        grid, {"theta_init_spread_kind": "std"}, 0.2
    )

    assert len(low) == 12
    assert low[:6] == grid
    assert {entry["theta_init_spread_kind"] for entry in low[6:]} == {"std"}
    assert high == grid
    assert already_std == grid


@patch("harness.run_method")
def test_grid_search_ties_go_to_smaller_overshoot(mock_run_method):
    """Test tie-breaking on overshoot, then on grid order."""
    mock_run_method.side_effect = [
        (None, _fake_result(0.8, 0.7)),
        (None, _fake_result(0.8, 0.55)),
        (None, _fake_result(0.8, 0.55)),
    ]

    result = grid_search("task", MethodKind.OURS, [{}, {}, {}], 0.5)

    assert result.best_index == 1


@patch("harness.run_method")
def test_grid_search_skips_failed_arms(mock_run_method):
    """Test that failed arms are recorded but never selected."""
    mock_run_method.side_effect = [
        RuntimeError("boom"),
        (None, _fake_result(0.3, 0.6)),
    ]

    result = grid_search("task", MethodKind.MP, [{"prune_every": 1}, {}], 0.5)

    assert result.best_index == 1
    assert result.arms[0].status == STATUS_FAILED
    assert mock_run_method.call_args_list[0][0][5] == {"prune_every": 1}


@patch("harness.run_method")
def test_grid_search_all_failed(mock_run_method):
    """Test that a grid with no completed arm raises."""
    mock_run_method.side_effect = RuntimeError("boom")

    with pytest.raises(GridSearchError):
        grid_search("task", MethodKind.OURS, [{}, {}], 0.5)


def test_grid_search_empty_grid():
    """Test that an empty grid is rejected."""
    with pytest.raises(GridSearchError):
        grid_search("task", MethodKind.OURS, [], 0.5)


def test_default_gamma_grid():
    """Test constant and ramped schedules for each default gamma."""
    grid = default_gamma_grid()

    assert len(grid) == 6
    assert {entry["gamma_mode"] for entry in grid} == {"constant", "linear_ramp"}


@pytest.mark.integration
def test_run_plan_end_to_end(tiny_task_spec, tmp_path):
    """Test a small sweep writes every arm and the summary."""
    plan = ExperimentPlan(
        task=tiny_task_spec,
        methods=(MethodKind.OURS, MethodKind.RND),
        sparsities=(0.5,),
        seeds=(0, 1),
        training=TINY_TRAINING,
        pruner=TINY_PRUNER,
    )

    store = run_plan(plan, tmp_path)

    assert store.all_completed
    assert len(store.arms) == 4
    for arm in store.arms:
        directory = arm_directory(tmp_path, arm.method, arm.sparsity, arm.seed)
        assert (directory / "metrics.jsonl").exists()
        assert (directory / "mask.abpm").exists()
        assert (directory / "summary.json").exists()
    cell = store.cell(MethodKind.RND, 0.5)
    assert cell.completed == 2
    assert cell.failed == 0
    assert (tmp_path / "summary.csv").exists()
    assert math.isclose(cell.mean_achieved_sparsity, 0.5, abs_tol=0.3)


@pytest.fixture(scope="module")
def blobs_task(blobs_task_spec):
    return generate_task(blobs_task_spec)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("target", [0.2, 0.5, 0.9])
def test_grid_search_lands_in_sparsity_band(blobs_task, target, seed):
    """Test that the tuned mask is at most five points above the target."""
    result = grid_search(
        blobs_task, MethodKind.OURS, default_gamma_grid(), target, seed=seed
    )

    best = result.arms[result.best_index]
    assert target <= best.achieved_sparsity <= target + SPARSITY_TOLERANCE


SWEEP_SPARSITIES = (0.5, 0.9, 0.95)


@pytest.fixture(scope="module")
def blobs_sweep(blobs_task_spec, tmp_path_factory):
    plan = ExperimentPlan(
        task=blobs_task_spec,
        methods=(
            MethodKind.OURS,
            MethodKind.OURS_NO_RECOVERY,
            MethodKind.RND,
            MethodKind.MP,
        ),
        sparsities=SWEEP_SPARSITIES,
        seeds=(0, 1, 2, 3, 4),
        training={"gamma": 1e-4},
    )
    return run_plan(plan, tmp_path_factory.mktemp("sweep"))


def _median_metric(store, method, sparsity):
    return float(
        np.median(
            [
                arm.eval_metric
                for arm in store.arms
                if arm.method == method and arm.sparsity == sparsity
            ]
        )
    )


@pytest.mark.slow
def test_sweep_orders_ours_above_baselines(blobs_sweep):
    """Test that learned masks beat random masks everywhere and MP when sparse."""
    assert blobs_sweep.all_completed
    for sparsity in SWEEP_SPARSITIES:
        ours = blobs_sweep.cell(MethodKind.OURS, sparsity).mean
        assert ours >= blobs_sweep.cell(MethodKind.RND, sparsity).mean
        if sparsity >= 0.9:
            assert ours >= blobs_sweep.cell(MethodKind.MP, sparsity).mean


@pytest.mark.slow
def test_sweep_recovery_ablation_direction(blobs_sweep):
    """Test that forbidding recovery hurts at high sparsity, and more so there."""
    table = recovery_report(
        {s: _median_metric(blobs_sweep, MethodKind.OURS, s) for s in SWEEP_SPARSITIES},
        {
            s: _median_metric(blobs_sweep, MethodKind.OURS_NO_RECOVERY, s)
            for s in SWEEP_SPARSITIES
        },
    )
    median_delta = table.deltas()

    assert median_delta[0.9] < 0
    assert median_delta[0.95] < 0
    assert abs(median_delta[0.95]) >= abs(median_delta[0.5])
