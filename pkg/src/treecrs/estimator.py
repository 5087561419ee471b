"""Estimator-style front door: fit on dialogues + graph, predict over the catalog."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from treecrs.config import RunConfig
from treecrs.corpus import Example
from treecrs.harness import evaluate_split, rec_ranked_lists
from treecrs.kg import KnowledgeGraph
from treecrs.metrics import recall_at_k
from treecrs.model import save_checkpoint
from treecrs.train import rec_examples, run_stage  # noqa: F401  (run_stage re-exported for tuning scripts)
from treecrs.train import StepLogger, build_model, prepare_data, train_model
from treecrs.validation import check_dialogues, check_examples, check_graph


class ConversationalRecommender(BaseEstimator):
    """Two-stage prompt-tuned recommender with a frozen decoder.

    Parameters
    ----------
    config : RunConfig | dict | None
        Full run configuration; ``None`` uses the documented defaults.
        Anything affecting results lives here, so `get_params`/`set_params`
        round-trips cover the whole experiment definition.
    """

    def __init__(self, config=None):
        self.config = config

    def _resolved_config(self) -> RunConfig:
        if self.config is None:
            return RunConfig()
        if isinstance(self.config, RunConfig):
            self.config.validate()
            return self.config
        if isinstance(self.config, dict):
            return RunConfig.from_dict(self.config)
        raise TypeError(f"config must be RunConfig, dict, or None, got {type(self.config).__name__}")

    def fit(self, dialogues, graph: KnowledgeGraph) -> "ConversationalRecommender":
        """Split, pretrain+freeze the decoder, then run both training stages."""
        config = self._resolved_config()
        dialogues = check_dialogues(dialogues)
        graph = check_graph(graph, require_items=(config.task == "rec"))
        data = prepare_data(dialogues, graph, config)
        model = build_model(graph, data.tokenizer, config)
        logger = StepLogger()
        result = train_model(model, data, logger)
        self.config_ = config
        self.graph_ = graph
        self.model_ = model
        self.data_ = data
        self.result_ = result
        self.n_items_ = len(graph.items)
        return self

    def predict_proba(self, examples) -> np.ndarray:
        """Catalog score matrix, one simplex row per example (catalog column order)."""
        check_is_fitted(self, "model_")
        examples = check_examples(examples)
        model = self.model_
        model.eval()
        rows = []
        with torch.no_grad():
            graph_emb = model.graph_embeddings()
            for ex in examples:
                features = model.compute_features(ex, graph_emb)
                if model.config.eval.rec_response_source == "gold":
                    response = ex.target_response
                elif model.config.eval.rec_response_source == "generated":
                    response = model.generate(features, graph_emb, model.config.model.max_new_tokens)
                else:
                    response = None
                rows.append(model.recommend(features, graph_emb, response).numpy())
        return np.stack(rows)

    def predict(self, examples) -> np.ndarray:
        """Top-1 item entity id per example."""
        scores = self.predict_proba(examples)
        items = np.asarray(self.graph_.items)
        return items[np.argmax(scores, axis=1)]

    def rank(self, examples) -> list[list[int]]:
        """Full catalog ranking (item entity ids, best first) per example."""
        check_is_fitted(self, "model_")
        ranked, _ = rec_ranked_lists(self.model_, check_examples(examples))
        return ranked

    def generate(self, examples) -> list[str]:
        """Greedy response generation for each example."""
        check_is_fitted(self, "model_")
        examples = check_examples(examples)
        model = self.model_
        model.eval()
        out = []
        with torch.no_grad():
            graph_emb = model.graph_embeddings()
            for ex in examples:
                features = model.compute_features(ex, graph_emb)
                out.append(model.generate(features, graph_emb, model.config.model.max_new_tokens))
        return out

    def score(self, examples, y=None, k: int = 10) -> float:
        """Mean recall@k over the item-bearing examples."""
        check_is_fitted(self, "model_")
        usable = rec_examples(check_examples(examples))
        if not usable:
            raise ValueError("no examples with gold items to score")
        ranked, golds = rec_ranked_lists(self.model_, usable)
        return float(np.mean([recall_at_k(r, g, k) for r, g in zip(ranked, golds)]))

    def evaluate(self, split: str = "test") -> dict:
        """Metric report on one of the fitted splits."""
        check_is_fitted(self, "model_")
        return evaluate_split(self.model_, self.data_.examples_for(split), split)

    def save(self, out_dir) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, out_dir)
