import json
import os
from unittest.mock import patch

import pytest

import main
from mask_core import sparsity
from serialization import load_mask


@pytest.fixture
def clean_environment():
    """Run with a single worker and no seed override."""
    with patch.dict(os.environ, {"ABP_WORKERS": "1"}):
        os.environ.pop("ABP_SEED", None)
        yield


def test_parser_adapt_defaults():
    """Test the adapt sub-command defaults."""
    args = main.build_parser().parse_args(["adapt"])

    assert args.command == "adapt"
    assert args.sparsity == 0.5
    assert args.seed == 0
    assert not args.no_recovery


@pytest.mark.parametrize(
    "command",
    [
        ["pretrain"],
        ["adapt"],
        ["baseline"],
        ["analyze", "--mask", "m.abpm"],
        ["sensitivity"],
        ["sweep"],
        ["grid-search"],
    ],
)
def test_parser_sparsity_is_common(command):
    """Test that every sub-command accepts --sparsity."""
    args = main.build_parser().parse_args([*command, "--sparsity", "0.9"])

    assert args.sparsity == 0.9


def test_parser_requires_command():
    """Test that a sub-command is mandatory."""
    with pytest.raises(SystemExit):
        main.build_parser().parse_args([])


def test_parser_rejects_unknown_baseline():
    """Test that only comparison pruners are accepted by baseline."""
    with pytest.raises(SystemExit):
        main.build_parser().parse_args(["baseline", "--method", "ours"])


def test_parser_analyze_requires_mask():
    """Test that analyze needs a mask file."""
    with pytest.raises(SystemExit):
        main.build_parser().parse_args(["analyze"])


def test_resolve_seed_from_environment():
    """Test that ABP_SEED overrides the --seed flag."""
    with patch.dict(os.environ, {"ABP_SEED": "42"}):
        assert main.resolve_seed(7) == 42


def test_resolve_seed_without_override(clean_environment):
    """Test that the flag is used when ABP_SEED is unset."""
    assert main.resolve_seed(7) == 7


def test_resolve_seed_rejects_non_integer():
    """Test that a malformed ABP_SEED stops the run."""
    with patch.dict(os.environ, {"ABP_SEED": "seven"}):
        with pytest.raises(SystemExit) as exc_info:
            main.resolve_seed(0)

    assert "ABP_SEED" in str(exc_info.value)


def test_load_config_missing_file(tmp_path):
    """Test that an unreadable config file stops the run."""
    with pytest.raises(SystemExit) as exc_info:
        main.load_config(tmp_path / "missing.toml")

    assert "missing.toml" in str(exc_info.value)


def test_load_config_invalid_toml(tmp_path):
    """Test that a malformed config file stops the run."""
    path = tmp_path / "broken.toml"
    path.write_text("[training\nstep_budget = ")

    with pytest.raises(SystemExit):
        main.load_config(path)


@patch("main.setup_logging")
def test_main_rejects_unknown_config_key(mock_setup_logging, tmp_path):
    """Test that an unknown training key is a configuration error."""
    path = tmp_path / "config.toml"
    path.write_text("[training]\nlearning_rate = 0.1\n")

    with pytest.raises(SystemExit) as exc_info:
        main.main(["adapt", "--config", str(path), "--out", str(tmp_path / "out")])

    assert "learning_rate" in str(exc_info.value)


@patch("main.setup_logging")
def test_main_rejects_unknown_config_table(mock_setup_logging, tmp_path):
    """Test that an unknown table is a configuration error."""
    path = tmp_path / "config.toml"
    path.write_text("[optimizer]\nlr = 0.1\n")

    with pytest.raises(SystemExit):
        main.main(["adapt", "--config", str(path)])


@patch("main.setup_logging")
@patch("main.generate_task")
def test_main_returns_one_on_runtime_error(
    mock_generate_task, mock_setup_logging, clean_environment, tmp_path
):
    """Test that runtime failures become a non-zero exit code."""
    mock_generate_task.side_effect = RuntimeError("out of memory")

    assert main.main(["pretrain", "--out", str(tmp_path)]) == 1


@patch("main.setup_logging")
def test_main_returns_one_on_corrupt_mask(
    mock_setup_logging, clean_environment, tiny_config_file, tmp_path
):
    """Test that a mask file failing its checksum becomes a non-zero exit code."""
    path = tmp_path / "mask.abpm"
    path.write_bytes(b"ABPM\x01\x00" + bytes(10))

    code = main.main(
        [
            "analyze",
            "--config",
            str(tiny_config_file),
            "--mask",
            str(path),
            "--out",
            str(tmp_path / "profile"),
        ]
    )

    assert code == 1
    assert not (tmp_path / "profile" / "profile.json").exists()


@pytest.mark.integration
@patch("main.setup_logging")
def test_adapt_is_reproducible(
    mock_setup_logging, clean_environment, tiny_config_file, tmp_path
):
    """Test that the same seed writes byte-identical metrics and masks."""
    for name in ("first", "second"):
        code = main.main(
            [
                "adapt",
                "--config",
                str(tiny_config_file),
                "--seed",
                "5",
                "--out",
                str(tmp_path / name),
            ]
        )
        assert code == 0

    for artifact in ("metrics.jsonl", "mask.abpm"):
        first = (tmp_path / "first" / artifact).read_bytes()
        second = (tmp_path / "second" / artifact).read_bytes()
        assert first == second
    summary = json.loads((tmp_path / "first" / "summary.json").read_text())
    assert summary["method"] == "ours"
    assert summary["seed"] == 5
    mask = load_mask(tmp_path / "first" / "mask.abpm")
    assert sparsity(mask) == pytest.approx(summary["achieved_sparsity"])


@pytest.mark.integration
@patch("main.setup_logging")
def test_environment_seed_is_used(
    mock_setup_logging, clean_environment, tiny_config_file, tmp_path
):
    """Test that ABP_SEED reaches the run summary."""
    os.environ["ABP_SEED"] = "9"

    main.main(
        [
            "baseline",
            "--method",
            "rnd",
            "--config",
            str(tiny_config_file),
            "--out",
            str(tmp_path),
        ]
    )

    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["seed"] == 9
    assert summary["method"] == "rnd"


@pytest.mark.integration
@patch("main.setup_logging")
def test_pretrain_adapt_analyze(
    mock_setup_logging, clean_environment, tiny_config_file, tmp_path
):
    """Test the stored-task workflow from pre-training to the sparsity profile."""
    task_dir = tmp_path / "task"
    config = ["--config", str(tiny_config_file)]

    assert main.main(["pretrain", *config, "--out", str(task_dir)]) == 0
    assert (task_dir / main.BASE_CHECKPOINT).exists()
    sizes = json.loads((task_dir / "artifact_sizes.json").read_text())
    assert sizes["weight_bytes"] > sizes["mask_bytes"]

    run_dir = tmp_path / "adapt"
    code = main.main(
        ["adapt", *config, "--task-dir", str(task_dir), "--out", str(run_dir)]
    )
    assert code == 0

    profile_dir = tmp_path / "profile"
    code = main.main(
        [
            "analyze",
            *config,
            "--task-dir",
            str(task_dir),
            "--mask",
            str(run_dir / "mask.abpm"),
            "--compare",
            str(run_dir / "mask.abpm"),
            "--out",
            str(profile_dir),
        ]
    )
    assert code == 0
    report = json.loads((profile_dir / "profile.json").read_text())
    assert report["delta"]["overall"] == 0.0
    assert (profile_dir / "profile.csv").exists()


@pytest.mark.integration
@patch("main.setup_logging")
def test_sensitivity_command(
    mock_setup_logging, clean_environment, tiny_config_file, tmp_path
):
    """Test that the ablation writes one row per arm."""
    code = main.main(
        ["sensitivity", "--config", str(tiny_config_file), "--out", str(tmp_path)]
    )

    assert code == 0
    rows = (tmp_path / "sensitivity.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 4


@patch("main.setup_logging")
@patch("harness.run_method")
def test_sweep_reports_failed_arms(
    mock_run_method, mock_setup_logging, clean_environment, tiny_config_file, tmp_path
):
    """Test that a sweep with failed arms exits non-zero but writes summaries."""
    mock_run_method.side_effect = FloatingPointError("loss diverged")
    with open(tiny_config_file, "a") as handle:
        handle.write(
            '\n[plan]\nmethods = ["ours", "ours_no_recovery"]\n'
            "sparsities = [0.5]\nseeds = [0]\n"
        )

    code = main.main(
        ["sweep", "--config", str(tiny_config_file), "--out", str(tmp_path / "out")]
    )

    assert code == 1
    summary = json.loads(
        (tmp_path / "out" / "ours" / "s0.5" / "seed0" / "summary.json").read_text()
    )
    assert summary["status"] == "failed"
    assert (tmp_path / "out" / "summary.csv").exists()
