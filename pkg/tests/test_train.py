import json
import random

import pytest
import torch

from conftest import micro_config
from treecrs.corpus import expand_corpus
from treecrs.ktree import ENTITY_MARKER, RELATION_MARKER
from treecrs.model import plm_hash
from treecrs.train import (
    DataBundle,
    StepLogger,
    _batches,
    _check_finite,
    build_model,
    build_tokenizer,
    prepare_data,
    rec_examples,
    train_model,
)


def bundle_from(dialogues, tokenizer, valid=()):
    """Tiny corpora fall below the splitter minimum; assemble splits by hand."""
    return DataBundle(
        tokenizer=tokenizer,
        train_dialogues=list(dialogues),
        valid_dialogues=list(valid),
        test_dialogues=[],
        train_examples=expand_corpus(list(dialogues)),
        valid_examples=expand_corpus(list(valid)),
        test_examples=[],
    )


@pytest.fixture
def trained(movie_graph, movie_dialogues, tmp_path):
    config = micro_config(tmp_path)
    tokenizer = build_tokenizer(movie_dialogues, movie_graph, config)
    model = build_model(movie_graph, tokenizer, config)
    data = bundle_from(movie_dialogues, tokenizer)
    logger = StepLogger(tmp_path / "log.jsonl")
    result = train_model(model, data, logger)
    logger.close()
    return model, result, tmp_path / "log.jsonl"


def test_decoder_hash_unchanged_by_both_stages(trained):
    model, result, _ = trained
    assert result.plm_hash_before == result.plm_hash_after
    assert plm_hash(model) == result.plm_hash_after


def test_stage2_prompts_freshly_seeded(trained):
    model, result, _ = trained
    events = [r for r in result.history if r.get("event") == "stage2_prompt_init"]
    assert len(events) == 1
    assert events[0]["seed"] == model.config.training.seed_init + 1


def test_stage_order_in_history(trained):
    _, result, _ = trained
    stages = [r["stage"] for r in result.history if r.get("event") == "step"]
    boundary_order = list(dict.fromkeys(stages))
    assert boundary_order == ["decoder_pretrain", "stage1", "stage2"]
    frozen_at = next(
        i for i, r in enumerate(result.history) if r.get("event") == "decoder_frozen"
    )
    first_stage1 = next(
        i
        for i, r in enumerate(result.history)
        if r.get("event") == "step" and r["stage"] == "stage1"
    )
    assert frozen_at < first_stage1


def test_training_lowers_joint_loss(movie_graph, movie_dialogues, tmp_path):
    config = micro_config(
        tmp_path,
        **{
            "training.decoder_pretrain_steps": 30,
            "training.stage1_steps": 10,
            "training.stage2_steps": 30,
        },
    )
    tokenizer = build_tokenizer(movie_dialogues, movie_graph, config)
    model = build_model(movie_graph, tokenizer, config)
    data = bundle_from(movie_dialogues, tokenizer)
    result = train_model(model, data)
    stage2 = [r for r in result.history if r.get("event") == "step" and r["stage"] == "stage2"]
    assert stage2[-1]["loss"] < stage2[0]["loss"]


def test_log_file_mirrors_history(trained):
    _, result, log_path = trained
    lines = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert lines == result.history
    assert all(set(r) == set(json.loads(json.dumps(r))) for r in lines)


def test_stage_steps_counts(trained):
    model, result, _ = trained
    assert result.stage1.steps_run == model.config.training.stage1_steps
    assert result.stage2.steps_run == model.config.training.stage2_steps
    assert not result.stage1.early_stopped
    assert not result.stage2.early_stopped


# ----- helpers ---------------------------------------------------------------


def test_batches_yield_exact_step_count():
    examples = list(range(5))
    batches = list(_batches(examples, batch_size=2, steps=7, rng=random.Random(0)))
    assert len(batches) == 7
    assert all(len(b) == 2 for b in batches)


def test_batches_cover_every_example_each_epoch():
    examples = list(range(6))
    batches = list(_batches(examples, batch_size=3, steps=4, rng=random.Random(1)))
    first_epoch = [x for b in batches[:2] for x in b]
    second_epoch = [x for b in batches[2:] for x in b]
    assert sorted(first_epoch) == examples
    assert sorted(second_epoch) == examples


def test_batches_reject_empty_pool():
    with pytest.raises(ValueError, match="empty example list"):
        list(_batches([], batch_size=2, steps=1, rng=random.Random(0)))


def test_check_finite_raises_on_nan():
    bad = torch.tensor(float("nan"))
    with pytest.raises(RuntimeError, match="divergence in stage1 at step 3"):
        _check_finite(bad, "stage1", 3, {"l_rec": torch.tensor(1.0)})


def test_check_finite_passes_normal_values():
    _check_finite(torch.tensor(0.5), "stage2", 1, {})


def test_rec_examples_filters_on_gold_items(movie_dialogues):
    examples = expand_corpus(movie_dialogues)
    usable = rec_examples(examples)
    assert usable == [ex for ex in examples if ex.target_items]
    assert len(usable) == 3


def test_tokenizer_covers_graph_and_markers(movie_graph, movie_dialogues, tmp_path):
    from treecrs.encoders import tokenize

    config = micro_config(tmp_path)
    tokenizer = build_tokenizer(movie_dialogues, movie_graph, config)
    vocab = set(tokenizer.vocab)
    for name in movie_graph.entity_names + movie_graph.relation_names:
        for token in tokenize(name):
            assert token in vocab, name
    assert ENTITY_MARKER in vocab
    assert RELATION_MARKER in vocab
    assert {"seeker", "recommender", ":"} <= vocab
    assert tokenizer.unk_id not in tokenizer.encode("#Inception $starring ##DiCaprio")


def test_prepare_data_split_sizes(movie_graph, tmp_path):
    from conftest import make_dialogue

    dialogues = [
        make_dialogue(
            f"d{i}",
            [
                ("seeker", f"query {i}", [], []),
                ("recommender", "watch Inception", ["Inception"], ["Inception"]),
            ],
        )
        for i in range(10)
    ]
    config = micro_config(tmp_path)
    data = prepare_data(dialogues, movie_graph, config)
    assert len(data.train_dialogues) == 8
    assert len(data.valid_dialogues) == 1
    assert len(data.test_dialogues) == 1
    assert len(data.train_examples) == 8
    assert data.examples_for("valid") == data.valid_examples
    with pytest.raises(ValueError):
        data.examples_for("holdout")


def test_early_stopping_restores_best_state(movie_graph, movie_dialogues, tmp_path):
    config = micro_config(
        tmp_path,
        **{
            "training.stage2_steps": 40,
            "training.eval_every": 2,
            "training.patience": 1,
        },
    )
    tokenizer = build_tokenizer(movie_dialogues, movie_graph, config)
    model = build_model(movie_graph, tokenizer, config)
    data = bundle_from(movie_dialogues, tokenizer, valid=movie_dialogues)
    result = train_model(model, data)
    validations = [r for r in result.history if r.get("event") == "validation"]
    assert validations, "expected validation events"
    if result.stage2.early_stopped:
        assert any(r.get("event") == "early_stop" for r in result.history)
        assert result.stage2.steps_run < 40
