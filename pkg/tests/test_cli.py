import json

import pytest
import yaml
from click.testing import CliRunner

from conftest import micro_config
from treecrs.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, **overrides):
    config = micro_config(tmp_path, **overrides)
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(config.to_dict()))
    return path, config


def all_output(result):
    try:
        return result.output + result.stderr
    except ValueError:
        return result.output


def test_train_writes_checkpoints_and_log(runner, tmp_path):
    config_path, config = write_config(tmp_path)
    result = runner.invoke(main, ["train", "--config", str(config_path)])
    assert result.exit_code == 0, result.output
    out_dir = tmp_path / "out"
    assert (out_dir / "checkpoints" / "manifest.json").exists()
    for group in ("plm", "user", "tree", "prompt"):
        assert (out_dir / "checkpoints" / f"{group}.npz").exists()
    log_lines = (out_dir / "train_log.jsonl").read_text().splitlines()
    assert log_lines, "training log is empty"
    summary = json.loads((out_dir / "summary.json").read_text())
    assert summary["plm_hash_before"] == summary["plm_hash_after"]
    assert "checkpoints written" in result.output


def test_train_seed_override_lands_in_summary(runner, tmp_path):
    config_path, _ = write_config(tmp_path)
    result = runner.invoke(main, ["train", "--config", str(config_path), "--seed", "3"])
    assert result.exit_code == 0, result.output
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["config"]["training"]["seed_init"] == 3
    assert summary["config"]["training"]["seed_shuffle"] == 4
    assert summary["config"]["training"]["seed_split"] == 5


def test_eval_fresh_weights_warns_and_reports(runner, tmp_path):
    config_path, _ = write_config(tmp_path)
    result = runner.invoke(main, ["eval", "--config", str(config_path)])
    assert result.exit_code == 0, result.output
    assert "freshly initialized" in all_output(result)
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert set(report["metrics"]) >= {"recall@1", "recall@10", "recall@50"}
    assert "recall@10\t" in result.output


def test_eval_loads_trained_checkpoint(runner, tmp_path):
    config_path, _ = write_config(tmp_path)
    train_result = runner.invoke(main, ["train", "--config", str(config_path)])
    assert train_result.exit_code == 0, train_result.output
    result = runner.invoke(
        main,
        [
            "eval",
            "--config", str(config_path),
            "--checkpoint", str(tmp_path / "out" / "checkpoints"),
        ],
    )
    assert result.exit_code == 0, result.output
    assert "freshly initialized" not in all_output(result)


def test_eval_task_override(runner, tmp_path):
    config_path, _ = write_config(tmp_path)
    result = runner.invoke(main, ["eval", "--config", str(config_path), "--task", "conv"])
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["task"] == "conv"
    assert "conv_loss_mean" in report["metrics"]


def test_config_error_is_usage_error(runner, tmp_path):
    config_path, config = write_config(tmp_path)
    payload = config.to_dict()
    payload["loss"]["gamma"] = 1.0
    config_path.write_text(yaml.safe_dump(payload))
    result = runner.invoke(main, ["train", "--config", str(config_path)])
    assert result.exit_code == 2
    assert "loss.gamma" in all_output(result)


def test_missing_config_file_is_usage_error(runner, tmp_path):
    result = runner.invoke(main, ["train", "--config", str(tmp_path / "nope.yaml")])
    assert result.exit_code == 2


def test_missing_input_file_is_run_error(runner, tmp_path):
    config_path, _ = write_config(tmp_path, **{"paths.corpus": str(tmp_path / "void.jsonl")})
    result = runner.invoke(main, ["train", "--config", str(config_path)])
    assert result.exit_code == 1
    assert "void.jsonl" in all_output(result)


def test_sweep_single_value(runner, tmp_path):
    config_path, _ = write_config(tmp_path)
    result = runner.invoke(
        main,
        ["sweep", "--config", str(config_path), "--axis", "tree_degree", "--values", "2"],
    )
    assert result.exit_code == 0, result.output
    table = (tmp_path / "out" / "sweep_tree_degree.tsv").read_text()
    assert result.output == table
    header, row = table.strip().split("\n")
    assert header.startswith("tree_degree\t")
    assert row.split("\t")[0] == "2"
    assert (tmp_path / "out" / "sweep_tree_degree.json").exists()


def test_sweep_bad_values_is_usage_error(runner, tmp_path):
    config_path, _ = write_config(tmp_path)
    result = runner.invoke(
        main,
        ["sweep", "--config", str(config_path), "--axis", "alpha", "--values", "x,y"],
    )
    assert result.exit_code == 2


def test_build_trees_then_cache_hit(runner, tmp_path):
    config_path, _ = write_config(tmp_path)
    first = runner.invoke(main, ["build-trees", "--config", str(config_path)])
    assert first.exit_code == 0, first.output
    assert first.output.startswith("built:")
    second = runner.invoke(main, ["build-trees", "--config", str(config_path)])
    assert second.exit_code == 0, second.output
    assert second.output.startswith("cache hit:")


def test_ablate_writes_report_and_table(runner, tmp_path):
    config_path, _ = write_config(tmp_path, **{"eval.n_seeds": 1})
    result = runner.invoke(main, ["ablate", "--config", str(config_path)])
    assert result.exit_code == 0, result.output
    report = json.loads((tmp_path / "out" / "ablation.json").read_text())
    assert set(report["variants"]) == {"full", "-tree", "-user", "-align", "-all"}
    table = (tmp_path / "out" / "ablation_table.tsv").read_text().strip().split("\n")
    assert len(table) == 6  # header + 5 variants
    assert table[0].startswith("variant\t")


def test_selftest_passes(runner):
    result = runner.invoke(main, ["selftest"])
    assert result.exit_code == 0, result.output
    lines = result.output.strip().split("\n")
    assert lines, "selftest produced no output"
    assert all(line.startswith("PASS ") for line in lines)


def test_version_flag(runner):
    result = runner.invoke(main, ["--version"], prog_name="treecrs")
    assert result.exit_code == 0
    assert result.output.startswith("treecrs, version ")
