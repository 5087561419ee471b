"""Two-stage training: knowledge modules first, task prompts second.

A setup step pretrains the decoder on the corpus language-modeling objective
and freezes it.  Stage 1 tunes the user and tree groups through the
generation loss (no soft prompts yet).  Stage 2 reinitializes the prompt
group and jointly tunes user, tree, and prompt groups on the task objective:
the weighted sum of recommendation, preference, and alignment losses for the
rec task, the generation loss for the conv task.
"""

from __future__ import annotations

import copy
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from treecrs.align import align_loss, contrast_mask
from treecrs.config import RunConfig
from treecrs.corpus import Dialogue, Example, expand_corpus, make_label_vector, split_dialogues
from treecrs.encoders import Tokenizer
from treecrs.kg import KnowledgeGraph
from treecrs.ktree import ENTITY_MARKER, RELATION_MARKER
from treecrs.model import (
    CrsModel,
    ExampleFeatures,
    freeze_decoder,
    plm_hash,
    rec_loss,
    total_loss,
)
from treecrs.user_pref import user_loss

STAGE2_PROMPT_SEED_OFFSET = 1


@dataclass
class DataBundle:
    """Split dialogues with their expanded examples and the shared tokenizer."""

    tokenizer: Tokenizer
    train_dialogues: list[Dialogue]
    valid_dialogues: list[Dialogue]
    test_dialogues: list[Dialogue]
    train_examples: list[Example]
    valid_examples: list[Example]
    test_examples: list[Example]

    def examples_for(self, split: str) -> list[Example]:
        try:
            return {"train": self.train_examples, "valid": self.valid_examples, "test": self.test_examples}[split]
        except KeyError:
            raise ValueError(f"unknown split {split!r}") from None


def build_tokenizer(dialogues: list[Dialogue], graph: KnowledgeGraph, config: RunConfig) -> Tokenizer:
    texts = [u.text for d in dialogues for u in d.utterances]
    extra = list(graph.entity_names) + list(graph.relation_names)
    extra += ["seeker", "recommender", ":", ENTITY_MARKER, RELATION_MARKER]
    max_size = config.encoder.vocab_size or None
    return Tokenizer.build(texts, extra_tokens=extra, max_size=max_size)


def prepare_data(dialogues: list[Dialogue], graph: KnowledgeGraph, config: RunConfig) -> DataBundle:
    train, valid, test = split_dialogues(dialogues, config.training.seed_split)
    return DataBundle(
        tokenizer=build_tokenizer(dialogues, graph, config),
        train_dialogues=train,
        valid_dialogues=valid,
        test_dialogues=test,
        train_examples=expand_corpus(train),
        valid_examples=expand_corpus(valid),
        test_examples=expand_corpus(test),
    )


def build_model(graph: KnowledgeGraph, tokenizer: Tokenizer, config: RunConfig) -> CrsModel:
    torch.manual_seed(config.training.seed_init)
    return CrsModel(graph, tokenizer, config)


def rec_examples(examples: list[Example]) -> list[Example]:
    """Examples usable by the recommendation losses (at least one gold item)."""
    return [ex for ex in examples if ex.target_items]


class StepLogger:
    """Collects structured per-step records, optionally mirrored to a JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self._handle = open(path, "w", encoding="utf-8") if path else None

    def log(self, **record) -> None:
        self.records.append(record)
        if self._handle:
            self._handle.write(json.dumps(record, sort_keys=True) + "\n")
            self._handle.flush()

    def close(self) -> None:
        if self._handle:
            self._handle.close()
            self._handle = None


def _batches(examples: list[Example], batch_size: int, steps: int, rng: random.Random):
    """Yield ``steps`` batches, reshuffling the example order every epoch."""
    if not examples:
        raise ValueError("cannot train on an empty example list")
    order: list[int] = []
    for _ in range(steps):
        if len(order) < batch_size:
            refill = list(range(len(examples)))
            rng.shuffle(refill)
            order.extend(refill)
        take, order = order[:batch_size], order[batch_size:]
        yield [examples[i] for i in take]


def _check_finite(value: torch.Tensor, stage: str, step: int, parts: dict) -> None:
    if not bool(torch.isfinite(value)):
        detail = {k: float(v.detach()) for k, v in parts.items()}
        raise RuntimeError(f"divergence in {stage} at step {step}: loss={value} parts={detail}")


def conv_batch_loss(
    model: CrsModel, batch: list[Example], include_soft: bool
) -> tuple[torch.Tensor, dict]:
    graph_emb = model.graph_embeddings()
    losses = []
    for ex in batch:
        features = model.compute_features(ex, graph_emb)
        losses.append(model.conv_loss(features, graph_emb, ex.target_response, include_soft=include_soft))
    stacked = torch.stack(losses)
    loss = stacked.sum() if model.config.loss.reduction == "sum" else stacked.mean()
    return loss, {"l_conv": loss}


def rec_batch_loss(model: CrsModel, batch: list[Example]) -> tuple[torch.Tensor, dict]:
    """Joint objective on one batch: rec + alpha * user + beta * align."""
    config = model.config
    graph_emb = model.graph_embeddings()
    features = [model.compute_features(ex, graph_emb) for ex in batch]

    scores, user_scores, labels = [], [], []
    for ex, f in zip(batch, features):
        scores.append(model.recommend(f, graph_emb, ex.target_response))
        user_scores.append(f.user_scores)
        labels.append(torch.from_numpy(make_label_vector(ex, model.graph)))
    score_matrix = torch.stack(scores)
    label_matrix = torch.stack(labels)
    l_rec = rec_loss(score_matrix, label_matrix, reduction=config.loss.reduction)
    l_user = user_loss(torch.stack(user_scores), label_matrix, reduction=config.loss.reduction)

    if config.model.use_align:
        entity_seqs = [tuple(f.entity_ids) for f in features]
        mask = contrast_mask(entity_seqs, order_sensitive=config.loss.align_order_sensitive)
        l_align = align_loss(
            torch.stack([f.entity_aggregate for f in features]),
            torch.stack([f.tree_aggregate for f in features]),
            mask,
            tau=config.loss.tau,
            normalize=config.loss.align_normalize,
            literal_denominator=config.loss.align_literal_eq21,
        )
    else:
        l_align = score_matrix.new_zeros(())

    loss = total_loss(l_rec, l_user, l_align, config.loss.alpha, config.loss.beta)
    return loss, {"l_rec": l_rec, "l_user": l_user, "l_align": l_align}


def validation_metric(model: CrsModel, examples: list[Example], task: str) -> float:
    """Early-stopping signal: recall@50 (higher is better) or mean L_conv (negated)."""
    from treecrs.harness import rec_ranked_lists, mean_conv_loss

    model.eval()
    try:
        if task == "rec":
            usable = rec_examples(examples)
            if not usable:
                return 0.0
            ranked, golds = rec_ranked_lists(model, usable)
            from treecrs.metrics import recall_at_k

            return float(np.mean([recall_at_k(r, g, 50) for r, g in zip(ranked, golds)]))
        return -mean_conv_loss(model, examples)
    finally:
        model.train()


@dataclass
class StageResult:
    steps_run: int
    early_stopped: bool
    best_metric: float | None


def run_stage(
    model: CrsModel,
    stage: str,
    objective: str,
    train_set: list[Example],
    valid_set: list[Example],
    parameters: list[torch.nn.Parameter],
    lr: float,
    batch_size: int,
    steps: int,
    logger: StepLogger,
    include_soft: bool,
) -> StageResult:
    config = model.config
    optimizer = torch.optim.AdamW(
        parameters, lr=lr, eps=config.training.adam_eps, weight_decay=config.training.weight_decay
    )
    rng = random.Random(config.training.seed_shuffle + (1 if stage == "stage2" else 0))
    best_metric: float | None = None
    best_state: dict | None = None
    bad_evals = 0
    early_stopped = False
    steps_run = 0

    def trainable_state() -> dict:
        return {
            k: v.detach().clone()
            for k, v in model.state_dict().items()
            if not k.startswith("decoder.")
        }

    for step, batch in enumerate(_batches(train_set, batch_size, steps, rng), start=1):
        if objective == "conv":
            loss, parts = conv_batch_loss(model, batch, include_soft=include_soft)
        else:
            loss, parts = rec_batch_loss(model, batch)
        _check_finite(loss, stage, step, parts)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        steps_run = step
        logger.log(
            event="step", stage=stage, step=step, lr=lr,
            loss=float(loss.detach()), **{k: float(v.detach()) for k, v in parts.items()},
        )

        should_eval = (
            config.training.eval_every > 0
            and config.training.patience > 0
            and step % config.training.eval_every == 0
            and valid_set
        )
        if should_eval:
            metric = validation_metric(model, valid_set, objective)
            improved = best_metric is None or metric > best_metric + 1e-12
            logger.log(event="validation", stage=stage, step=step, metric=metric, improved=improved)
            if improved:
                best_metric = metric
                best_state = trainable_state()
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= config.training.patience:
                    early_stopped = True
                    logger.log(event="early_stop", stage=stage, step=step)
                    break

    if best_state is not None:
        with torch.no_grad():
            current = model.state_dict()
            for key, value in best_state.items():
                current[key].copy_(value)
    return StageResult(steps_run=steps_run, early_stopped=early_stopped, best_metric=best_metric)


def pretrain_decoder(model: CrsModel, examples: list[Example], logger: StepLogger) -> None:
    """Setup step: corpus language modeling on context+response streams."""
    config = model.config
    if config.model.decoder_weights:
        stored = np.load(config.model.decoder_weights)
        params = dict(model.decoder.named_parameters(prefix="decoder"))
        if set(stored.files) != set(params):
            raise ValueError("decoder_weights file does not match the decoder architecture")
        with torch.no_grad():
            for key, param in params.items():
                param.copy_(torch.from_numpy(stored[key]))
        logger.log(event="decoder_loaded", path=config.model.decoder_weights)
        return
    steps = config.training.decoder_pretrain_steps
    if steps == 0:
        logger.log(event="decoder_pretrain_skipped")
        return
    optimizer = torch.optim.AdamW(
        model.decoder.parameters(), lr=config.training.lr_decoder,
        eps=config.training.adam_eps, weight_decay=config.training.weight_decay,
    )
    rng = random.Random(config.training.seed_shuffle + 7)
    tok = model.tokenizer
    for step, batch in enumerate(_batches(examples, config.training.batch_conv, steps, rng), start=1):
        losses = []
        for ex in batch:
            from treecrs.corpus import render_context

            ids = tok.encode(render_context(ex)) + [tok.sep_id] + tok.encode(ex.target_response) + [tok.eos_id]
            ids = ids[-model.decoder.max_len :]
            id_tensor = torch.tensor(ids, dtype=torch.long)
            hidden = model.decoder.forward_embeddings(model.decoder.embed_tokens(id_tensor))
            log_probs = torch.log_softmax(model.decoder.logits(hidden[:-1]), dim=-1)
            targets = id_tensor[1:]
            losses.append(-log_probs[torch.arange(len(targets)), targets].mean())
        loss = torch.stack(losses).mean()
        _check_finite(loss, "decoder_pretrain", step, {"lm": loss})
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        logger.log(event="step", stage="decoder_pretrain", step=step, lr=config.training.lr_decoder, loss=float(loss.detach()))


@dataclass
class TrainResult:
    plm_hash_before: str
    plm_hash_after: str
    stage1: StageResult
    stage2: StageResult
    history: list[dict] = field(default_factory=list)


def train_model(
    model: CrsModel, data: DataBundle, logger: StepLogger | None = None
) -> TrainResult:
    """Run setup + stage 1 + stage 2 on prepared splits; decoder stays frozen."""
    config = model.config
    logger = logger or StepLogger()
    model.train()

    pretrain_decoder(model, data.train_examples, logger)
    freeze_decoder(model)
    hash_before = plm_hash(model)
    logger.log(event="decoder_frozen", plm_hash=hash_before)

    user_tree = list(model.user.parameters()) + list(model.tree.parameters())
    stage1 = run_stage(
        model, "stage1", "conv", data.train_examples, data.valid_examples,
        parameters=user_tree, lr=config.training.lr_stage1,
        batch_size=config.training.batch_conv, steps=config.training.stage1_steps,
        logger=logger, include_soft=False,
    )

    prompt_seed = config.training.seed_init + STAGE2_PROMPT_SEED_OFFSET
    model.prompt.reinitialize(prompt_seed)
    logger.log(event="stage2_prompt_init", seed=prompt_seed)

    joint = user_tree + list(model.prompt.parameters())
    if config.task == "rec":
        train_set = rec_examples(data.train_examples)
        valid_set = rec_examples(data.valid_examples)
        objective = "rec"
        batch_size = config.training.batch_rec
    else:
        train_set = data.train_examples
        valid_set = data.valid_examples
        objective = "conv"
        batch_size = config.training.batch_conv
    stage2 = run_stage(
        model, "stage2", objective, train_set, valid_set,
        parameters=joint, lr=config.training.lr_stage2,
        batch_size=batch_size, steps=config.training.stage2_steps,
        logger=logger, include_soft=True,
    )

    hash_after = plm_hash(model)
    logger.log(event="training_done", plm_hash=hash_after)
    if hash_after != hash_before:
        raise RuntimeError("frozen decoder drifted during training")
    return TrainResult(
        plm_hash_before=hash_before,
        plm_hash_after=hash_after,
        stage1=stage1,
        stage2=stage2,
        history=logger.records,
    )
