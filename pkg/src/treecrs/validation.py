"""Input validation helpers shared by the estimator and the harness."""

from __future__ import annotations

from treecrs.corpus import Dialogue, Example
from treecrs.kg import KnowledgeGraph


def check_dialogues(dialogues) -> list[Dialogue]:
    if not isinstance(dialogues, (list, tuple)) or not dialogues:
        raise ValueError("expected a non-empty list of Dialogue objects")
    for i, d in enumerate(dialogues):
        if not isinstance(d, Dialogue):
            raise TypeError(f"dialogues[{i}] is {type(d).__name__}, expected Dialogue")
    return list(dialogues)


def check_examples(examples) -> list[Example]:
    if not isinstance(examples, (list, tuple)) or not examples:
        raise ValueError("expected a non-empty list of Example objects")
    for i, ex in enumerate(examples):
        if not isinstance(ex, Example):
            raise TypeError(f"examples[{i}] is {type(ex).__name__}, expected Example")
    return list(examples)


def check_graph(graph, require_items: bool = True) -> KnowledgeGraph:
    if not isinstance(graph, KnowledgeGraph):
        raise TypeError(f"expected a KnowledgeGraph, got {type(graph).__name__}")
    if require_items and len(graph.items) < 2:
        raise ValueError(
            "graph needs at least 2 registered items for recommendation; call register_items first"
        )
    return graph
