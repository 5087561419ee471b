"""Conversational recommendation with knowledge-tree prompts over a frozen decoder."""

from treecrs.kg import KnowledgeGraph, load_triples, register_items
from treecrs.corpus import Dialogue, Example, Utterance, expand_turns, load_dialogues, split_dialogues
from treecrs.config import RunConfig
from treecrs.estimator import ConversationalRecommender

__version__ = "0.1.0"

__all__ = [
    "ConversationalRecommender",
    "Dialogue",
    "Example",
    "KnowledgeGraph",
    "RunConfig",
    "Utterance",
    "expand_turns",
    "load_dialogues",
    "load_triples",
    "register_items",
    "split_dialogues",
    "__version__",
]
