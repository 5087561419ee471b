"""Dialogue corpus loading, per-turn example expansion, and split logic."""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from treecrs.kg import KnowledgeGraph

SPEAKERS = ("seeker", "recommender")


class DialogueSchemaError(ValueError):
    """Raised when a dialogue record violates the corpus schema."""


@dataclass(frozen=True)
class Utterance:
    speaker: str
    text: str
    entities: tuple[str, ...] = ()
    items: tuple[str, ...] = ()


@dataclass(frozen=True)
class Dialogue:
    id: str
    utterances: tuple[Utterance, ...]


@dataclass(frozen=True)
class Example:
    """One supervised instance: context so far, the recommender's reply as target.

    ``turn`` is the zero-based index of the target utterance, so
    ``context == dialogue.utterances[:turn]`` and ``turn >= 1`` always holds.
    ``mentioned_entities`` preserves first-mention order across the context
    with duplicates removed.
    """

    dialogue_id: str
    turn: int
    context: tuple[Utterance, ...]
    target_response: str
    target_items: tuple[str, ...]
    mentioned_entities: tuple[str, ...]


def _require(condition: bool, dialogue_id: str, message: str) -> None:
    if not condition:
        raise DialogueSchemaError(f"dialogue {dialogue_id!r}: {message}")


def _parse_utterance(raw: object, dialogue_id: str, index: int) -> Utterance:
    where = f"utterances[{index}]"
    _require(isinstance(raw, dict), dialogue_id, f"{where} is not an object")
    speaker = raw.get("speaker")
    _require(speaker in SPEAKERS, dialogue_id, f"{where}.speaker must be one of {SPEAKERS}")
    text = raw.get("text")
    _require(
        isinstance(text, str) and text.strip() != "",
        dialogue_id,
        f"{where}.text must be a non-empty string",
    )
    entities = raw.get("entities", [])
    items = raw.get("items", [])
    for name, value in (("entities", entities), ("items", items)):
        _require(
            isinstance(value, list) and all(isinstance(v, str) for v in value),
            dialogue_id,
            f"{where}.{name} must be a list of strings",
        )
    return Utterance(speaker=speaker, text=text, entities=tuple(entities), items=tuple(items))


def load_dialogues(path: str | Path) -> list[Dialogue]:
    """Read one JSON dialogue per line, validating the schema as it goes."""
    dialogues: list[Dialogue] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as err:
                raise DialogueSchemaError(f"{path}:{lineno}: invalid JSON ({err})") from None
            dialogue_id = raw.get("id")
            if not isinstance(dialogue_id, str) or not dialogue_id:
                raise DialogueSchemaError(f"{path}:{lineno}: missing or empty dialogue id")
            _require(dialogue_id not in seen_ids, dialogue_id, "duplicate dialogue id")
            seen_ids.add(dialogue_id)
            utterances = raw.get("utterances")
            _require(isinstance(utterances, list), dialogue_id, "utterances must be a list")
            _require(len(utterances) >= 2, dialogue_id, "needs at least 2 utterances")
            parsed = tuple(_parse_utterance(u, dialogue_id, i) for i, u in enumerate(utterances))
            dialogues.append(Dialogue(id=dialogue_id, utterances=parsed))
    return dialogues


def expand_turns(dialogue: Dialogue) -> list[Example]:
    """One Example per recommender utterance that has at least one context turn.

    Each recommender turn after the first utterance becomes a prediction
    target with everything before it as context, so a dialogue yields as many
    examples as it has such turns.
    """
    examples: list[Example] = []
    mentioned: list[str] = []
    seen: set[str] = set()
    for turn, utterance in enumerate(dialogue.utterances):
        if turn >= 1 and utterance.speaker == "recommender":
            examples.append(
                Example(
                    dialogue_id=dialogue.id,
                    turn=turn,
                    context=dialogue.utterances[:turn],
                    target_response=utterance.text,
                    target_items=utterance.items,
                    mentioned_entities=tuple(mentioned),
                )
            )
        for name in utterance.entities:
            if name not in seen:
                seen.add(name)
                mentioned.append(name)
    return examples


def expand_corpus(dialogues: list[Dialogue]) -> list[Example]:
    out: list[Example] = []
    for d in dialogues:
        out.extend(expand_turns(d))
    return out


def split_dialogues(
    dialogues: list[Dialogue], seed: int
) -> tuple[list[Dialogue], list[Dialogue], list[Dialogue]]:
    """Shuffle dialogues with ``seed`` and cut 80/10/10 at the dialogue level.

    Train gets ``floor(0.8 N)``, validation ``floor(0.1 N)``, test the rest,
    so every dialogue lands in exactly one split.
    """
    n = len(dialogues)
    if n < 10:
        raise ValueError(f"need at least 10 dialogues to split, got {n}")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    shuffled = [dialogues[i] for i in order]
    n_train = math.floor(0.8 * n)
    n_valid = math.floor(0.1 * n)
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_valid],
        shuffled[n_train + n_valid :],
    )


def make_label_vector(example: Example, graph: KnowledgeGraph) -> np.ndarray:
    """Multi-hot target over the item catalog, in catalog column order."""
    y = np.zeros(len(graph.items), dtype=np.float64)
    for name in example.target_items:
        try:
            entity = graph.entity_id(name)
        except KeyError:
            raise KeyError(f"target item {name!r} is not an entity in the graph") from None
        if entity not in graph.items:
            raise KeyError(f"target item {name!r} is not registered in the item catalog")
        y[graph.item_column(entity)] = 1.0
    return y


def render_context(example: Example) -> str:
    """Flatten context utterances into one string with speaker markers."""
    parts = [f"{u.speaker}: {u.text}" for u in example.context]
    return " <sep> ".join(parts)
