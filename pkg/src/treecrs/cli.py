"""Command-line entry point: train, eval, build-trees, ablate, sweep, selftest.

Commands only pick what to run and where; everything affecting results comes
from the YAML config.  Exit codes: 0 ok, 1 run failure, 2 usage error.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import click

from treecrs.config import ConfigError, RunConfig


def _load_config(config_path: str, out: str | None, seed: int | None, task: str | None) -> RunConfig:
    config = RunConfig.from_file(config_path)
    if out is not None:
        config.paths = dataclasses.replace(config.paths, out_dir=out)
    if seed is not None:
        config = config.with_seed(seed)
    if task is not None:
        config = dataclasses.replace(config, task=task)
        config.validate()
    return config


def _guard(body):
    """Map failures to exit codes: config problems are usage errors (2), the rest run errors (1)."""
    try:
        return body()
    except ConfigError as err:
        raise click.UsageError(str(err)) from err
    except click.ClickException:
        raise
    except Exception as err:  # noqa: BLE001  (CLI boundary)
        raise click.ClickException(f"{type(err).__name__}: {err}") from err


def _write_json(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


config_option = click.option("--config", "config_path", required=True,
                             type=click.Path(exists=True, dir_okay=False), help="YAML run config.")
out_option = click.option("--out", default=None, help="Override paths.out_dir.")
seed_option = click.option("--seed", type=int, default=None,
                           help="Rebase the three named seeds on one value.")
task_option = click.option("--task", type=click.Choice(["rec", "conv"]), default=None,
                           help="Override the configured task.")


@click.group()
@click.version_option(package_name="treecrs")
def main() -> None:
    """Knowledge-tree prompted conversational recommendation toolkit."""


@main.command()
@config_option
@out_option
@seed_option
@task_option
def train(config_path: str, out: str | None, seed: int | None, task: str | None) -> None:
    """Run decoder setup plus both training stages, then save checkpoints."""

    def body():
        from treecrs.harness import finish_report, load_inputs, run_training
        from treecrs.model import save_checkpoint

        config = _load_config(config_path, out, seed, task)
        out_dir = Path(config.paths.out_dir)
        graph, dialogues = load_inputs(config)
        out_dir.mkdir(parents=True, exist_ok=True)
        model, data, result = run_training(config, graph, dialogues, log_path=out_dir / "train_log.jsonl")
        save_checkpoint(model, out_dir / "checkpoints")
        summary = finish_report(
            {
                "type": "training_summary",
                "plm_hash_before": result.plm_hash_before,
                "plm_hash_after": result.plm_hash_after,
                "stage1": dataclasses.asdict(result.stage1),
                "stage2": dataclasses.asdict(result.stage2),
                "n_train_examples": len(data.train_examples),
                "n_valid_examples": len(data.valid_examples),
                "n_test_examples": len(data.test_examples),
            },
            config,
        )
        _write_json(summary, out_dir / "summary.json")
        click.echo(f"checkpoints written to {out_dir / 'checkpoints'}")
        click.echo(f"stage1 steps {result.stage1.steps_run}, stage2 steps {result.stage2.steps_run}")

    _guard(body)


@main.command("eval")
@config_option
@out_option
@seed_option
@task_option
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), default=None,
              help="Checkpoint directory from `train`; omitted = fresh random weights.")
def eval_cmd(config_path: str, out: str | None, seed: int | None, task: str | None,
             checkpoint: str | None) -> None:
    """Evaluate on the configured split and write a metrics report."""

    def body():
        from treecrs.harness import evaluate_split, finish_report, load_inputs, write_report
        from treecrs.model import load_checkpoint
        from treecrs.train import build_model, prepare_data

        config = _load_config(config_path, out, seed, task)
        graph, dialogues = load_inputs(config)
        data = prepare_data(dialogues, graph, config)
        model = build_model(graph, data.tokenizer, config)
        if checkpoint is not None:
            load_checkpoint(model, checkpoint)
        else:
            click.echo("warning: no checkpoint given, evaluating freshly initialized weights", err=True)
        report = finish_report(
            evaluate_split(model, data.examples_for(config.eval.split), config.eval.split), config
        )
        report_path = Path(config.paths.out_dir) / "report.json"
        write_report(report, report_path)
        click.echo(f"report written to {report_path}")
        for name, value in sorted(report["metrics"].items()):
            click.echo(f"{name}\t{value:.6f}")

    _guard(body)


@main.command("build-trees")
@config_option
@out_option
@seed_option
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), default=None,
              help="Encoder weights defining the cache key; omitted = fresh seeded weights.")
def build_trees(config_path: str, out: str | None, seed: int | None, checkpoint: str | None) -> None:
    """Materialize serialized knowledge trees for every example."""

    def body():
        from treecrs.harness import build_tree_cache

        config = _load_config(config_path, out, seed, None)
        manifest = build_tree_cache(config, Path(config.paths.out_dir), checkpoint)
        state = "cache hit" if manifest.get("cache_hit") else "built"
        click.echo(f"{state}: {manifest['n_trees']} trees over {manifest['n_examples']} examples")

    _guard(body)


@main.command()
@config_option
@out_option
@seed_option
@task_option
def ablate(config_path: str, out: str | None, seed: int | None, task: str | None) -> None:
    """Train and evaluate the full model against its ablation variants."""

    def body():
        from treecrs.harness import run_ablation

        config = _load_config(config_path, out, seed, task)
        report = run_ablation(config)
        out_dir = Path(config.paths.out_dir)
        _write_json(report, out_dir / "ablation.json")
        metric_names = sorted(next(iter(report["variants"].values()))["mean"])
        lines = ["\t".join(["variant"] + metric_names)]
        for variant, payload in report["variants"].items():
            lines.append("\t".join([variant] + [repr(payload["mean"][m]) for m in metric_names]))
        (out_dir / "ablation_table.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        click.echo(f"ablation report written to {out_dir / 'ablation.json'}")
        for line in lines:
            click.echo(line)

    _guard(body)


@main.command()
@config_option
@out_option
@seed_option
@task_option
@click.option("--axis", required=True, type=click.Choice(["tree_depth", "tree_degree", "alpha", "beta"]))
@click.option("--values", default=None, help="Comma-separated axis values; per-axis defaults otherwise.")
def sweep(config_path: str, out: str | None, seed: int | None, task: str | None,
          axis: str, values: str | None) -> None:
    """Train and evaluate across one hyperparameter axis."""

    def body():
        from treecrs.harness import run_sweep, sweep_table

        config = _load_config(config_path, out, seed, task)
        parsed = None
        if values is not None:
            try:
                parsed = [float(v) for v in values.split(",") if v.strip()]
            except ValueError as err:
                raise ConfigError(f"--values: {err}") from err
        report = run_sweep(config, axis, parsed)
        out_dir = Path(config.paths.out_dir)
        _write_json(report, out_dir / f"sweep_{axis}.json")
        table = sweep_table(report)
        (out_dir / f"sweep_{axis}.tsv").write_text(table, encoding="utf-8")
        click.echo(table, nl=False)

    _guard(body)


@main.command()
def selftest() -> None:
    """Run the built-in oracle and gradient suites; nonzero exit on failure."""
    from treecrs.selftest import run_all

    failures = 0
    for result in run_all():
        status = "PASS" if result.passed else "FAIL"
        click.echo(f"{status} {result.name}: {result.detail}")
        failures += 0 if result.passed else 1
    if failures:
        raise SystemExit(1)


if __name__ == "__main__":
    main()
