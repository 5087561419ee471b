"""Synthetic movie-domain fixture generator.

Produces a small film knowledge graph plus template dialogues whose gold
items are connected to the entities the seeker mentions, so a correctly
wired model can overfit the training split quickly.  Everything is driven by
one seed; the shipped fixture under ``data/synthetic`` comes from here.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

import click

SEEKER_TEMPLATES = (
    "i am in the mood for something with {hook} in it",
    "can you find me a film featuring {hook} ?",
    "i really enjoy {hook} , any suggestions ?",
    "what would you recommend if i like {hook} ?",
    "lately i keep watching {hook} stuff , got anything ?",
)

RESPONSE_TEMPLATES = (
    "you should try {item}",
    "i think you would enjoy {item}",
    "my pick for you is {item}",
    "in that case have a look at {item}",
    "then i recommend {item}",
)

FOLLOWUP_TEMPLATES = (
    "thanks ! i also like {hook} , anything else ?",
    "nice , and something around {hook} maybe ?",
    "good one . how about a film with {hook} ?",
)


@dataclass
class GraphPlan:
    """Entity pools plus the relational facts the dialogues draw from."""

    films: list[str]
    persons: list[str]
    genres: list[str]
    triples: list[tuple[str, str, str]]
    hooks: dict[str, list[str]]  # film -> related non-film entities


def generate_graph(rng: random.Random, n_entities: int, n_items: int) -> GraphPlan:
    if n_items < 2 or n_entities < n_items + 10:
        raise ValueError("fixture needs at least 2 items and 10 supporting entities")
    films = [f"film_{i:02d}" for i in range(n_items)]
    n_support = n_entities - n_items
    n_genres = max(3, n_support // 7)
    n_persons = n_support - n_genres
    persons = [f"person_{i:02d}" for i in range(n_persons)]
    genres = [f"genre_{i:02d}" for i in range(n_genres)]

    triples: list[tuple[str, str, str]] = []
    hooks: dict[str, list[str]] = {}
    for i, film in enumerate(films):
        actors = rng.sample(persons, 2)
        director = rng.choice(persons)
        film_genres = rng.sample(genres, 2)
        for actor in actors:
            triples.append((film, "starring", actor))
        triples.append((film, "directed_by", director))
        for genre in film_genres:
            triples.append((film, "has_genre", genre))
        if i > 0 and rng.random() < 0.5:
            triples.append((film, "similar_to", rng.choice(films[:i])))
        hooks[film] = actors + [director] + film_genres
    # touch every support entity at least once so the graph has no orphans
    untouched = set(persons + genres) - {t for _, _, t in triples}
    for entity in sorted(untouched):
        film = rng.choice(films)
        relation = "starring" if entity.startswith("person") else "has_genre"
        triples.append((film, relation, entity))
        hooks[film].append(entity)
    return GraphPlan(films=films, persons=persons, genres=genres, triples=triples, hooks=hooks)


def _round(rng: random.Random, plan: GraphPlan, film: str, first: bool) -> list[dict]:
    hook = rng.choice(plan.hooks[film])
    seeker_pool = SEEKER_TEMPLATES if first else FOLLOWUP_TEMPLATES
    seeker = {
        "speaker": "seeker",
        "text": rng.choice(seeker_pool).format(hook=hook),
        "entities": [hook],
        "items": [],
    }
    recommender = {
        "speaker": "recommender",
        "text": rng.choice(RESPONSE_TEMPLATES).format(item=film),
        "entities": [film],
        "items": [film],
    }
    return [seeker, recommender]


def generate_dialogues(rng: random.Random, plan: GraphPlan, n_dialogues: int) -> list[dict]:
    dialogues = []
    for i in range(n_dialogues):
        n_rounds = rng.choice((1, 2))
        utterances: list[dict] = []
        films = rng.sample(plan.films, n_rounds)
        for j, film in enumerate(films):
            utterances.extend(_round(rng, plan, film, first=(j == 0)))
        dialogues.append({"id": f"dlg_{i:04d}", "utterances": utterances})
    return dialogues


def probe_dialogues(plan: GraphPlan, n_examples: int, seed: int) -> list[dict]:
    """Single-round dialogues whose golds cycle uniformly over the catalog.

    Hooks are drawn independently of the gold, so a model with arbitrary
    weights ranks independently of the target and the expected recall@k is
    exactly k over the catalog size.
    """
    rng = random.Random(seed)
    everything = plan.persons + plan.genres
    dialogues = []
    for i in range(n_examples):
        gold = plan.films[i % len(plan.films)]
        hook = rng.choice(everything)
        utterances = [
            {
                "speaker": "seeker",
                "text": rng.choice(SEEKER_TEMPLATES).format(hook=hook),
                "entities": [hook],
                "items": [],
            },
            {
                "speaker": "recommender",
                "text": rng.choice(RESPONSE_TEMPLATES).format(item=gold),
                "entities": [gold],
                "items": [gold],
            },
        ]
        dialogues.append({"id": f"probe_{i:05d}", "utterances": utterances})
    return dialogues


def write_fixture(
    out_dir: str | Path,
    n_dialogues: int = 50,
    n_entities: int = 100,
    n_items: int = 30,
    seed: int = 7,
) -> GraphPlan:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    plan = generate_graph(rng, n_entities, n_items)
    dialogues = generate_dialogues(rng, plan, n_dialogues)
    (out / "kg.tsv").write_text(
        "".join(f"{h}\t{r}\t{t}\n" for h, r, t in plan.triples), encoding="utf-8"
    )
    (out / "items.txt").write_text("".join(f"{f}\n" for f in plan.films), encoding="utf-8")
    (out / "dialogues.jsonl").write_text(
        "".join(json.dumps(d, sort_keys=True) + "\n" for d in dialogues), encoding="utf-8"
    )
    return plan


@click.command()
@click.argument("out_dir", type=click.Path())
@click.option("--dialogues", "n_dialogues", default=50, show_default=True)
@click.option("--entities", "n_entities", default=100, show_default=True)
@click.option("--items", "n_items", default=30, show_default=True)
@click.option("--seed", default=7, show_default=True)
def main(out_dir: str, n_dialogues: int, n_entities: int, n_items: int, seed: int) -> None:
    """Regenerate a synthetic fixture directory."""
    plan = write_fixture(out_dir, n_dialogues, n_entities, n_items, seed)
    click.echo(
        f"wrote {out_dir}: {len(plan.triples)} triples, "
        f"{len(plan.films)} items, {n_dialogues} dialogues"
    )


if __name__ == "__main__":
    main()
