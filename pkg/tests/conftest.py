import dataclasses
import json
from pathlib import Path

import pytest
import torch
from hypothesis import HealthCheck, settings

from treecrs.config import (
    EncoderSection,
    EvalSection,
    ModelSection,
    PathsConfig,
    RunConfig,
    TrainingSection,
    TreeSection,
)
from treecrs.corpus import Dialogue, Utterance, load_dialogues
from treecrs.kg import load_triples, parse_triples, register_items

settings.register_profile(
    "suite", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("suite")

torch.set_default_dtype(torch.float64)

DATA_DIR = Path(__file__).resolve().parent.parent / "data" / "synthetic"

MOVIE_TRIPLES = """\
Inception\tstarring\tDiCaprio
Inception\tdirected_by\tNolan
Interstellar\tdirected_by\tNolan
Interstellar\tstarring\tChastain
Titanic\tstarring\tDiCaprio
Titanic\tgenre\tRomance
Inception\tgenre\tSciFi
Interstellar\tgenre\tSciFi
"""


@pytest.fixture
def movie_graph():
    graph = parse_triples(MOVIE_TRIPLES, source="<movies>")
    return register_items(graph, ["Inception", "Interstellar", "Titanic"])


def make_dialogue(dialogue_id, turns):
    """turns: list of (speaker, text, entities, items)."""
    utterances = tuple(
        Utterance(speaker=s, text=t, entities=tuple(e), items=tuple(i))
        for s, t, e, i in turns
    )
    return Dialogue(id=dialogue_id, utterances=utterances)


@pytest.fixture
def movie_dialogues():
    return [
        make_dialogue(
            "d0",
            [
                ("seeker", "i loved Inception , anything similar ?", ["Inception"], []),
                ("recommender", "you should watch Interstellar", ["Interstellar"], ["Interstellar"]),
                ("seeker", "great , something with DiCaprio too ?", ["DiCaprio"], []),
                ("recommender", "then try Titanic", ["Titanic"], ["Titanic"]),
            ],
        ),
        make_dialogue(
            "d1",
            [
                ("seeker", "any scifi tonight ?", ["SciFi"], []),
                ("recommender", "Inception is a safe pick", ["Inception"], ["Inception"]),
            ],
        ),
    ]


def micro_config(tmp_path, **overrides):
    """A config small enough to train inside a unit test."""
    config = RunConfig(
        task="rec",
        paths=PathsConfig(
            kg=str(DATA_DIR / "kg.tsv"),
            items=str(DATA_DIR / "items.txt"),
            corpus=str(DATA_DIR / "dialogues.jsonl"),
            out_dir=str(tmp_path / "out"),
        ),
        encoder=EncoderSection(
            d_text=16, d_ent=16, text_layers=1, text_heads=2, max_len=96,
            rgcn_layers=1, rgcn_bases=4,
        ),
        tree=TreeSection(depth=1, degree=2),
        model=ModelSection(
            d_fusion=16, d_dec=16, dec_layers=1, dec_heads=2,
            soft_len_rec=3, soft_len_conv=4, max_new_tokens=6, max_entities=4,
        ),
        training=TrainingSection(
            lr_decoder=3e-3, lr_stage1=3e-3, lr_stage2=3e-3, adam_eps=1e-8,
            batch_rec=4, batch_conv=2, decoder_pretrain_steps=4,
            stage1_steps=3, stage2_steps=3, eval_every=0, patience=0,
        ),
        eval=EvalSection(rec_response_source="gold", split="test"),
    )
    for key, value in overrides.items():
        section, _, field = key.partition(".")
        if not field:
            config = dataclasses.replace(config, **{section: value})
        else:
            config = dataclasses.replace(
                config, **{section: dataclasses.replace(getattr(config, section), **{field: value})}
            )
    return config


@pytest.fixture
def tiny_config(tmp_path):
    return micro_config(tmp_path)


@pytest.fixture
def fixture_graph():
    graph = load_triples(DATA_DIR / "kg.tsv")
    names = [
        line.strip()
        for line in (DATA_DIR / "items.txt").read_text().splitlines()
        if line.strip()
    ]
    return register_items(graph, names)


@pytest.fixture
def fixture_dialogues():
    return load_dialogues(DATA_DIR / "dialogues.jsonl")


def write_corpus(path, records):
    with open(path, "w") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")
    return path
