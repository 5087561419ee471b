"""Acceptance suite: end-to-end checks of the shipped behaviors.

Each test covers one release criterion and prints as a single pass/fail line
under ``pytest -v``.  Numeric checks use the independent oracles from
``tests/reference.py``, never the package's own selftest implementations.
"""

import dataclasses
import json
import math
import random
import time

import numpy as np
import pytest
import torch

import reference
from conftest import DATA_DIR, micro_config
from treecrs.align import align_loss, contrast_mask
from treecrs.config import PathsConfig, RunConfig
from treecrs.corpus import expand_corpus, load_dialogues, make_label_vector
from treecrs.harness import (
    evaluate_split,
    finish_report,
    load_inputs,
    rec_ranked_lists,
    report_json,
    run_ablation,
    run_sweep,
    run_training,
    sweep_table,
    train_and_evaluate,
)
from treecrs.kg import parse_triples, register_items
from treecrs.ktree import build_tree, parse_tree, parsed_equal, serialize_tree, to_parsed
from treecrs.metrics import distinct_n, mrr_at_k, ndcg_at_k, recall_at_k
from treecrs.model import plm_hash, rec_loss
from treecrs.synth import generate_graph, probe_dialogues
from treecrs.train import build_model, build_tokenizer, prepare_data, rec_batch_loss
from treecrs.user_pref import user_loss


def shipped_config(name: str, out_dir) -> RunConfig:
    """Load a fixture config verbatim, resolving its data paths to this repo."""
    config = RunConfig.from_file(DATA_DIR / name)
    config.paths = PathsConfig(
        kg=str(DATA_DIR / "kg.tsv"),
        items=str(DATA_DIR / "items.txt"),
        corpus=str(DATA_DIR / "dialogues.jsonl"),
        out_dir=str(out_dir),
    )
    return config


def random_graph(rng, n_entities, n_relations=4, n_lines=None):
    n_lines = n_lines or 3 * n_entities
    lines = [
        f"e{rng.integers(n_entities)}\tr{rng.integers(n_relations)}\te{rng.integers(n_entities)}"
        for _ in range(n_lines)
    ]
    return parse_triples("\n".join(lines))


def test_criterion_01_metrics_match_oracles_on_random_instances():
    started = time.monotonic()
    rng = np.random.default_rng(101)
    for _ in range(200):
        catalog = list(rng.permutation(int(rng.integers(10, 80))))
        gold = set(rng.choice(catalog, size=int(rng.integers(1, 5)), replace=False).tolist())
        for k in (1, 5, 10, 50):
            assert abs(recall_at_k(catalog, gold, k) - reference.recall(catalog, gold, k)) < 1e-9
            assert abs(ndcg_at_k(catalog, gold, k) - reference.ndcg(catalog, gold, k)) < 1e-9
            assert abs(mrr_at_k(catalog, gold, k) - reference.mrr(catalog, gold, k)) < 1e-9
    words = ["film", "watch", "great", "romance", "space", "try", "tonight", "classic"]
    for _ in range(200):
        responses = [
            " ".join(rng.choice(words, size=int(rng.integers(4, 9))).tolist())
            for _ in range(int(rng.integers(1, 5)))
        ]
        for n in (2, 3, 4):
            for pooled in (True, False):
                got = distinct_n(responses, n, pooled=pooled)
                want = reference.distinct(responses, n, pooled=pooled)
                assert abs(got - want) < 1e-9
    assert time.monotonic() - started < 10.0


def test_criterion_02_tree_builder_matches_exhaustive_search():
    started = time.monotonic()
    rng = np.random.default_rng(202)
    for trial in range(100):
        n_entities = int(rng.integers(5, 51))
        graph = random_graph(rng, n_entities)
        emb = torch.from_numpy(rng.normal(size=(graph.n_entities, 6)))
        context = torch.from_numpy(rng.normal(size=6))
        root = int(rng.integers(graph.n_entities))
        for depth in (1, 2):
            for degree in (1, 3, 5):
                tree = build_tree(graph, emb, context, root, depth, degree)
                expected_paths = reference.exhaustive_tree_paths(
                    graph, emb.numpy(), context.numpy(), root, depth, degree
                )
                expected_nodes = {root} | {
                    node for path, _ in expected_paths for node in path
                }
                assert reference.tree_nodes(tree) == expected_nodes, (
                    f"trial {trial}: node set mismatch at depth={depth} degree={degree}"
                )
    assert time.monotonic() - started < 30.0


def test_criterion_03_serialization_round_trips_built_trees():
    started = time.monotonic()
    rng = np.random.default_rng(303)
    for trial in range(100):
        graph = random_graph(rng, int(rng.integers(5, 31)))
        emb = torch.from_numpy(rng.normal(size=(graph.n_entities, 5)))
        context = torch.from_numpy(rng.normal(size=5))
        root = int(rng.integers(graph.n_entities))
        tree = build_tree(graph, emb, context, root, 2, 3)
        parsed = parse_tree(serialize_tree(tree, graph))
        assert parsed_equal(parsed, to_parsed(tree, graph)), f"trial {trial}"
    assert time.monotonic() - started < 5.0


def test_criterion_04_loss_gradients_match_finite_differences(
    movie_graph, movie_dialogues, tmp_path
):
    started = time.monotonic()
    config = micro_config(tmp_path)
    tokenizer = build_tokenizer(movie_dialogues, movie_graph, config)
    model = build_model(movie_graph, tokenizer, config)
    model.train()
    examples = expand_corpus(movie_dialogues)
    batch = [ex for ex in examples if ex.target_items]
    assert 1 <= len(batch) <= 8

    def labels_for(exs):
        return torch.stack([torch.from_numpy(make_label_vector(ex, movie_graph)) for ex in exs])

    def preference_loss():
        graph_emb = model.graph_embeddings()
        feats = [model.compute_features(ex, graph_emb) for ex in batch]
        return user_loss(
            torch.stack([f.user_scores for f in feats]), labels_for(batch), reduction="mean"
        )

    def alignment_loss():
        graph_emb = model.graph_embeddings()
        feats = [model.compute_features(ex, graph_emb) for ex in batch]
        mask = contrast_mask([tuple(f.entity_ids) for f in feats])
        return align_loss(
            torch.stack([f.entity_aggregate for f in feats]),
            torch.stack([f.tree_aggregate for f in feats]),
            mask,
            tau=model.config.loss.tau,
        )

    def recommendation_loss():
        graph_emb = model.graph_embeddings()
        scores = []
        for ex in batch:
            feats = model.compute_features(ex, graph_emb)
            scores.append(model.recommend(feats, graph_emb, ex.target_response))
        return rec_loss(torch.stack(scores), labels_for(batch), reduction="mean")

    def joint_loss():
        return rec_batch_loss(model, batch)[0]

    user_tree = list(model.user.parameters()) + list(model.tree.parameters())
    trainable = user_tree + list(model.prompt.parameters())

    for name, closure, params, bound in (
        ("preference", preference_loss, list(model.user.parameters()), 1e-4),
        ("alignment", alignment_loss, user_tree, 1e-4),
        ("recommendation", recommendation_loss, trainable, 1e-4),
        ("joint", joint_loss, trainable, 1e-3),
    ):
        error = reference.max_relative_error(closure, params, h=1e-5, sample=2, seed=404)
        assert error < bound, f"{name} gradient error {error:.3e} exceeds {bound:.0e}"
    assert time.monotonic() - started < 120.0


def test_criterion_05_decoder_untouched_by_both_training_stages(tmp_path):
    config = shipped_config("ablation.yaml", tmp_path / "out")
    config.training = dataclasses.replace(
        config.training, decoder_pretrain_steps=10, stage1_steps=4, stage2_steps=6
    )
    graph, dialogues = load_inputs(config)
    model, _, result = run_training(config, graph, dialogues)
    assert result.plm_hash_before == result.plm_hash_after
    assert plm_hash(model) == result.plm_hash_before


def test_criterion_06_shipped_config_overfits_training_split(tmp_path):
    started = time.monotonic()
    config = shipped_config("config.yaml", tmp_path / "out")
    assert config.training.stage2_steps <= 200
    graph, dialogues = load_inputs(config)
    model, data, _ = run_training(config, graph, dialogues)
    report = evaluate_split(model, data.train_examples, "train")
    elapsed = time.monotonic() - started
    recall1 = report["metrics"]["recall@1"]
    assert recall1 >= 0.9, f"train recall@1 {recall1:.4f} below 0.9"
    assert elapsed < 300.0, f"overfit run took {elapsed:.1f}s"


def test_criterion_07_untrained_model_scores_at_chance(tmp_path):
    n_examples = 510
    plan = generate_graph(random.Random(7), n_entities=100, n_items=30)
    graph = parse_triples(
        "".join(f"{h}\t{r}\t{t}\n" for h, r, t in plan.triples), source="<plan>"
    )
    graph = register_items(graph, plan.films)
    probe_path = tmp_path / "probe.jsonl"
    with open(probe_path, "w", encoding="utf-8") as handle:
        for record in probe_dialogues(plan, n_examples, seed=11):
            handle.write(json.dumps(record) + "\n")
    dialogues = load_dialogues(probe_path)
    examples = expand_corpus(dialogues)
    assert len(examples) == n_examples

    config = micro_config(tmp_path, **{"eval.rec_response_source": "none"})
    tokenizer = build_tokenizer(dialogues, graph, config)
    model = build_model(graph, tokenizer, config)
    model.eval()
    ranked, golds = rec_ranked_lists(model, examples)
    recall10 = float(np.mean([recall_at_k(r, g, 10) for r, g in zip(ranked, golds)]))

    expected = 10 / 30
    bound = 3 * math.sqrt(expected * (1 - expected) / n_examples)
    assert abs(recall10 - expected) <= bound, (
        f"untrained recall@10 {recall10:.4f} outside {expected:.4f} +/- {bound:.4f}"
    )


def test_criterion_08_ablations_rank_full_model_first(tmp_path):
    config = shipped_config("ablation.yaml", tmp_path / "out")
    report = run_ablation(config)

    assert set(report["variants"]) == {"full", "-tree", "-user", "-align", "-all"}
    for payload in report["variants"].values():
        assert set(payload["mean"]) == set(payload["stderr"])
        assert {"recall@1", "recall@10", "recall@50", "ndcg@10", "ndcg@50", "mrr@10", "mrr@50"} == set(
            payload["mean"]
        )
        assert len(payload["seeds"]) == report["n_seeds"]

    full = report["variants"]["full"]["mean"]["recall@10"]
    for variant in ("-tree", "-user", "-align"):
        mean = report["variants"][variant]["mean"]["recall@10"]
        stderr = report["variants"][variant]["stderr"]["recall@10"]
        assert full >= mean - stderr, (
            f"full recall@10 {full:.4f} below {variant} {mean:.4f} - {stderr:.4f}"
        )


def test_criterion_09_sweeps_emit_parseable_tables(tmp_path):
    config = shipped_config("ablation.yaml", tmp_path / "out")
    config.training = dataclasses.replace(
        config.training, decoder_pretrain_steps=20, stage1_steps=8, stage2_steps=12
    )
    for axis in ("tree_depth", "tree_degree", "alpha", "beta"):
        report = run_sweep(config, axis)
        table = sweep_table(report)
        lines = table.strip().split("\n")
        header = lines[0].split("\t")
        assert header[0] == axis
        assert len(lines) == len(report["points"]) + 1
        values = []
        for line in lines[1:]:
            cells = [float(cell) for cell in line.split("\t")]
            assert len(cells) == len(header)
            values.append(cells[0])
        assert values == sorted(values), f"{axis} rows not in ascending axis order"
        assert len(set(values)) == len(values)


def test_criterion_10_identical_runs_produce_byte_identical_reports(tmp_path):
    config = shipped_config("ablation.yaml", tmp_path / "out")
    config.training = dataclasses.replace(
        config.training, decoder_pretrain_steps=10, stage1_steps=4, stage2_steps=6
    )
    graph, dialogues = load_inputs(config)
    first = report_json(finish_report(train_and_evaluate(config, graph, dialogues), config))
    second = report_json(finish_report(train_and_evaluate(config, graph, dialogues), config))
    assert first.encode("utf-8") == second.encode("utf-8")
