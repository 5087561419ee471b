"""Ranking and generation-diversity metrics.

Ranking metrics take a ranked item-id list plus the gold set; empty-gold
examples must be filtered out by the caller before these run.  Distinct-n is
pooled over the whole response corpus by default.
"""

from __future__ import annotations

import math
import warnings

import numpy as np


def rank_items(scores: np.ndarray, item_ids: list[int]) -> list[int]:
    """Order item ids by descending score, breaking ties by ascending item id."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.shape[0] != len(item_ids):
        raise ValueError("scores and item_ids must align")
    order = sorted(range(len(item_ids)), key=lambda i: (-scores[i], item_ids[i]))
    return [item_ids[i] for i in order]


def _check_ranked(ranked: list[int], gold: set[int], k: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not gold:
        raise ValueError("gold set is empty; filter empty-gold examples before scoring")
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list contains duplicates")


def recall_at_k(ranked: list[int], gold: set[int], k: int) -> float:
    _check_ranked(ranked, gold, k)
    hits = sum(1 for item in ranked[:k] if item in gold)
    return hits / len(gold)


def ndcg_at_k(ranked: list[int], gold: set[int], k: int) -> float:
    """Binary-relevance NDCG with the standard log2 position discount."""
    _check_ranked(ranked, gold, k)
    dcg = sum(1.0 / math.log2(r + 1) for r, item in enumerate(ranked[:k], start=1) if item in gold)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(gold), k) + 1))
    return dcg / ideal


def mrr_at_k(ranked: list[int], gold: set[int], k: int) -> float:
    _check_ranked(ranked, gold, k)
    for r, item in enumerate(ranked[:k], start=1):
        if item in gold:
            return 1.0 / r
    return 0.0


def distinct_n(responses: list[str], n: int, pooled: bool = True) -> float:
    """Unique word n-grams over total word n-grams, lowercased.

    ``pooled`` counts across the whole corpus (the default); otherwise the
    per-response ratios are averaged.  Stored as a raw ratio; tables render
    it multiplied by 100.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")

    def ngrams(text: str) -> list[tuple[str, ...]]:
        words = text.lower().split()
        return [tuple(words[i : i + n]) for i in range(len(words) - n + 1)]

    if pooled:
        seen: set[tuple[str, ...]] = set()
        total = 0
        for response in responses:
            grams = ngrams(response)
            total += len(grams)
            seen.update(grams)
        if total == 0:
            warnings.warn(f"no {n}-grams in corpus; distinct-{n} is 0", stacklevel=2)
            return 0.0
        return len(seen) / total

    ratios = []
    for response in responses:
        grams = ngrams(response)
        if grams:
            ratios.append(len(set(grams)) / len(grams))
    if not ratios:
        warnings.warn(f"no {n}-grams in corpus; distinct-{n} is 0", stacklevel=2)
        return 0.0
    return float(np.mean(ratios))
