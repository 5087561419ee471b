"""Evaluation, ablation, and sweep orchestration plus report writing.

Reports are JSON with sorted keys and no timestamps, so identical configs and
seeds produce byte-identical files.  Every report embeds the config snapshot
and a content hash of the input files.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch

from treecrs.config import ConfigError, RunConfig
from treecrs.corpus import Example, load_dialogues, make_label_vector
from treecrs.kg import KnowledgeGraph, graph_hash, load_triples, register_items
from treecrs.metrics import distinct_n, mrr_at_k, ndcg_at_k, rank_items, recall_at_k
from treecrs.model import CrsModel, checkpoint_hash, group_hash, load_checkpoint, parameter_groups, save_checkpoint
from treecrs.train import (
    DataBundle,
    StepLogger,
    TrainResult,
    build_model,
    prepare_data,
    rec_examples,
    train_model,
)

RECALL_KS = (1, 10, 50)
RANKED_KS = (10, 50)
DISTINCT_NS = (2, 3, 4)

SWEEP_AXES = {
    "tree_depth": ("tree", "depth", int),
    "tree_degree": ("tree", "degree", int),
    "alpha": ("loss", "alpha", float),
    "beta": ("loss", "beta", float),
}

ABLATION_VARIANTS = ("full", "-tree", "-user", "-align", "-all")


def load_inputs(config: RunConfig) -> tuple[KnowledgeGraph, list]:
    graph = load_triples(config.paths.kg)
    item_names = [
        line.strip() for line in Path(config.paths.items).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    graph = register_items(graph, item_names)
    dialogues = load_dialogues(config.paths.corpus)
    return graph, dialogues


def input_hash(config: RunConfig) -> str:
    digest = hashlib.sha256()
    for path in (config.paths.kg, config.paths.items, config.paths.corpus):
        digest.update(Path(path).read_bytes())
    return digest.hexdigest()


# ----- per-split evaluation ---------------------------------------------------


def _eval_response(model: CrsModel, features, graph_emb, example: Example) -> str | None:
    source = model.config.eval.rec_response_source
    if source == "gold":
        return example.target_response
    if source == "generated":
        text = model.generate(features, graph_emb, model.config.model.max_new_tokens)
        return text if text.strip() else None
    return None


def rec_ranked_lists(
    model: CrsModel, examples: list[Example]
) -> tuple[list[list[int]], list[set[int]]]:
    """Full-catalog rankings and gold id sets for item-bearing examples."""
    ranked_lists: list[list[int]] = []
    golds: list[set[int]] = []
    item_ids = list(model.graph.items)
    with torch.no_grad():
        graph_emb = model.graph_embeddings()
        for ex in examples:
            features = model.compute_features(ex, graph_emb)
            response = _eval_response(model, features, graph_emb, ex)
            scores = model.recommend(features, graph_emb, response).numpy()
            ranked_lists.append(rank_items(scores, item_ids))
            golds.append({model.graph.entity_id(name) for name in ex.target_items})
    return ranked_lists, golds


def mean_conv_loss(model: CrsModel, examples: list[Example]) -> float:
    if not examples:
        return 0.0
    with torch.no_grad():
        graph_emb = model.graph_embeddings()
        losses = [
            float(model.conv_loss(model.compute_features(ex, graph_emb), graph_emb, ex.target_response))
            for ex in examples
        ]
    return float(np.mean(losses))


def generate_responses(model: CrsModel, examples: list[Example]) -> list[str]:
    with torch.no_grad():
        graph_emb = model.graph_embeddings()
        return [
            model.generate(model.compute_features(ex, graph_emb), graph_emb, model.config.model.max_new_tokens)
            for ex in examples
        ]


def evaluate_split(model: CrsModel, examples: list[Example], split: str) -> dict:
    """Metric report for one split; task comes from the model config."""
    model.eval()
    config = model.config
    metrics: dict[str, float] = {}
    scored = examples
    if config.task == "rec":
        scored = rec_examples(examples)
        if scored:
            ranked, golds = rec_ranked_lists(model, scored)
            pairs = list(zip(ranked, golds))
            for k in RECALL_KS:
                metrics[f"recall@{k}"] = float(np.mean([recall_at_k(r, g, k) for r, g in pairs]))
            for k in RANKED_KS:
                metrics[f"ndcg@{k}"] = float(np.mean([ndcg_at_k(r, g, k) for r, g in pairs]))
                metrics[f"mrr@{k}"] = float(np.mean([mrr_at_k(r, g, k) for r, g in pairs]))
        else:
            for k in RECALL_KS:
                metrics[f"recall@{k}"] = 0.0
            for k in RANKED_KS:
                metrics[f"ndcg@{k}"] = 0.0
                metrics[f"mrr@{k}"] = 0.0
    else:
        responses = generate_responses(model, examples)
        for n in DISTINCT_NS:
            metrics[f"distinct_{n}"] = distinct_n(responses, n, pooled=config.loss.distinct_pooled)
        metrics["conv_loss_mean"] = mean_conv_loss(model, examples)
    return {
        "task": config.task,
        "split": split,
        "n_examples": len(examples),
        "n_scored": len(scored),
        "metrics": metrics,
    }


def finish_report(report: dict, config: RunConfig) -> dict:
    report["config"] = config.to_dict()
    report["input_hash"] = input_hash(config)
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report(report: dict, path: str | Path) -> None:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_json(report), encoding="utf-8")


# ----- full runs ---------------------------------------------------------------


def run_training(
    config: RunConfig, graph: KnowledgeGraph, dialogues: list, log_path: str | Path | None = None
) -> tuple[CrsModel, DataBundle, TrainResult]:
    data = prepare_data(dialogues, graph, config)
    model = build_model(graph, data.tokenizer, config)
    logger = StepLogger(log_path)
    try:
        result = train_model(model, data, logger)
    finally:
        logger.close()
    return model, data, result


def train_and_evaluate(config: RunConfig, graph: KnowledgeGraph, dialogues: list) -> dict:
    model, data, _ = run_training(config, graph, dialogues)
    return evaluate_split(model, data.examples_for(config.eval.split), config.eval.split)


def variant_config(config: RunConfig, variant: str) -> RunConfig:
    """Ablation transforms: prompt segments and their coupled loss terms.

    Dropping the tree side also disables alignment (the loss has no tree
    aggregate to align against); dropping the user side zeroes alpha.
    """
    out = dataclasses.replace(config)
    model = dataclasses.replace(config.model)
    loss = dataclasses.replace(config.loss)
    if variant == "full":
        pass
    elif variant == "-tree":
        model.use_tree_prompt = False
        model.use_align = False
        loss.beta = 0.0
    elif variant == "-user":
        model.use_user_prompt = False
        loss.alpha = 0.0
    elif variant == "-align":
        model.use_align = False
        loss.beta = 0.0
    elif variant == "-all":
        model.use_tree_prompt = False
        model.use_user_prompt = False
        model.use_align = False
        loss.alpha = 0.0
        loss.beta = 0.0
    else:
        raise ConfigError(f"unknown ablation variant {variant!r}")
    out.model = model
    out.loss = loss
    return out


def run_ablation(config: RunConfig) -> dict:
    """Train and evaluate every variant over shared seeds; aggregate mean and SE."""
    graph, dialogues = load_inputs(config)
    seeds = list(range(config.eval.n_seeds))
    variants: dict[str, dict] = {}
    for variant in ABLATION_VARIANTS:
        per_seed: dict[str, dict] = {}
        for seed in seeds:
            cfg = variant_config(config, variant).with_seed(seed)
            per_seed[str(seed)] = train_and_evaluate(cfg, graph, dialogues)
        metric_names = sorted(per_seed[str(seeds[0])]["metrics"])
        mean: dict[str, float] = {}
        stderr: dict[str, float] = {}
        for name in metric_names:
            values = [per_seed[str(s)]["metrics"][name] for s in seeds]
            mean[name] = float(np.mean(values))
            stderr[name] = float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else 0.0
        variants[variant] = {"seeds": per_seed, "mean": mean, "stderr": stderr}
    report = {
        "type": "ablation",
        "task": config.task,
        "split": config.eval.split,
        "n_seeds": len(seeds),
        "variants": variants,
    }
    return finish_report(report, config)


DEFAULT_SWEEP_VALUES = {
    "tree_depth": [1, 2, 3],
    "tree_degree": [1, 3, 5],
    "alpha": [0.0, 0.02, 0.2],
    "beta": [0.0, 0.002, 0.02],
}


def run_sweep(config: RunConfig, axis: str, values: list | None = None) -> dict:
    """One training+eval run per axis value, shared seeds, ascending order."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    section_name, field_name, caster = SWEEP_AXES[axis]
    raw_values = values if values is not None else DEFAULT_SWEEP_VALUES[axis]
    cast_values = sorted(caster(v) for v in raw_values)
    if not cast_values:
        raise ConfigError(f"sweep over {axis!r} needs at least one value")

    graph, dialogues = load_inputs(config)
    points: list[dict] = []
    for value in cast_values:
        cfg = dataclasses.replace(config)
        section = dataclasses.replace(getattr(config, section_name))
        setattr(section, field_name, value)
        setattr(cfg, section_name, section)
        if axis == "tree_depth" or axis == "tree_degree":
            cfg.validate()
        report = train_and_evaluate(cfg, graph, dialogues)
        points.append({"value": value, "metrics": report["metrics"], "n_scored": report["n_scored"]})
    report = {
        "type": "sweep",
        "axis": axis,
        "task": config.task,
        "split": config.eval.split,
        "points": points,
    }
    return finish_report(report, config)


def sweep_table(report: dict) -> str:
    """Flatten a sweep report to a TSV table, one row per axis value."""
    points = report["points"]
    metric_names = sorted(points[0]["metrics"]) if points else []
    lines = ["\t".join([report["axis"]] + metric_names)]
    for point in points:
        row = [repr(point["value"])] + [repr(point["metrics"][m]) for m in metric_names]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


# ----- tree cache ---------------------------------------------------------------


def build_tree_cache(
    config: RunConfig, out_dir: str | Path, checkpoint: str | Path | None = None
) -> dict:
    """Materialize serialized trees for every example, with a cache manifest.

    The cache key covers the graph, the tree shape, and the encoder weights
    (checkpoint hash, or the init seed for fresh weights); a matching
    manifest on disk short-circuits the rebuild.
    """
    graph, dialogues = load_inputs(config)
    data = prepare_data(dialogues, graph, config)
    model = build_model(graph, data.tokenizer, config)
    if checkpoint is not None:
        load_checkpoint(model, checkpoint)
        encoder_key = checkpoint_hash(checkpoint)
    else:
        groups = parameter_groups(model)
        encoder_key = group_hash({**groups.user, **groups.tree})
    key = {
        "graph_hash": graph_hash(graph),
        "tree_depth": config.tree.depth,
        "tree_degree": config.tree.degree,
        "sim_source": config.tree.sim_source,
        "encoder_key": encoder_key,
    }

    out = Path(out_dir)
    manifest_path = out / "trees.manifest.json"
    cache_path = out / "trees.jsonl"
    if manifest_path.exists() and cache_path.exists():
        stored = json.loads(manifest_path.read_text(encoding="utf-8"))
        if stored.get("key") == key:
            stored["cache_hit"] = True
            return stored

    out.mkdir(parents=True, exist_ok=True)
    n_trees = 0
    examples = data.train_examples + data.valid_examples + data.test_examples
    with torch.no_grad(), open(cache_path, "w", encoding="utf-8") as handle:
        graph_emb = model.graph_embeddings()
        for ex in examples:
            features = model.compute_features(ex, graph_emb)
            record = {
                "example": f"{ex.dialogue_id}:{ex.turn}",
                "entities": features.entity_ids,
                "trees": features.tree_texts,
            }
            n_trees += len(features.tree_texts)
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    manifest = {
        "key": key,
        "n_examples": len(examples),
        "n_trees": n_trees,
        "config": config.to_dict(),
        "cache_hit": False,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
