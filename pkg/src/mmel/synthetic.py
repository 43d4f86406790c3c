"""Synthetic linking benchmarks with planted embeddings.

Every entity gets a random unit embedding standing in for its encoded
representation.  A sample's mention, sentence and gold object features are
that embedding plus isotropic Gaussian noise, re-normalized; the remaining
objects in the image show other entities.  With ``paired=True`` entities
come in same-surname pairs that share a text signal, so only the visual
channel can tell the two apart.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from mmel.datamodel import EntityRecord, MentionSample, save_entities, save_samples
from mmel.featurestore import write_feature_store
from mmel.harness.features import (
    entity_key,
    face_key,
    identity_key,
    image_key,
    mention_key,
    object_key,
    text_key,
)

_ONSETS = ("b", "br", "d", "f", "g", "gr", "h", "j", "k", "l", "m", "n", "p", "r", "s", "st", "t", "v", "w", "z")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ou")
_CODAS = ("", "n", "r", "l", "s", "th", "ng", "ck")


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x)


def _word(rng: np.random.Generator, syllables: int) -> str:
    parts = []
    for _ in range(syllables):
        parts.append(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))])
    return ("".join(parts) + _CODAS[rng.integers(len(_CODAS))]).capitalize()


def _distinct_words(rng: np.random.Generator, n: int, syllables=(2, 3)) -> list[str]:
    out: dict[str, None] = {}
    while len(out) < n:
        out.setdefault(_word(rng, int(rng.integers(syllables[0], syllables[1] + 1))), None)
    return list(out)


def synthetic_names(n: int, rng: np.random.Generator, per_surname: int = 5) -> list[str]:
    """``n`` distinct two-word names, about ``per_surname`` sharing each surname."""
    surnames = _distinct_words(rng, max(1, -(-n // per_surname)), (2, 3))
    firsts = _distinct_words(rng, max(per_surname * 2, 40), (1, 2))
    names: list[str] = []
    seen: set[str] = set()
    for i in range(n):
        last = surnames[i // per_surname]
        while True:
            name = f"{firsts[rng.integers(len(firsts))]} {last}"
            if name.casefold() not in seen:
                break
        seen.add(name.casefold())
        names.append(name)
    return names


@dataclass
class SyntheticBenchmark:
    entities: list[EntityRecord]
    train: list[MentionSample]
    dev: list[MentionSample]
    test: list[MentionSample]
    store: dict[str, np.ndarray]
    d: int

    def write(self, directory: str | Path) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "entities": directory / "entities.jsonl",
            "train_samples": directory / "train.jsonl",
            "dev_samples": directory / "dev.jsonl",
            "test_samples": directory / "test.jsonl",
            "features": directory / "features.mmfs",
        }
        save_entities(self.entities, paths["entities"])
        save_samples(self.train, paths["train_samples"])
        save_samples(self.dev, paths["dev_samples"])
        save_samples(self.test, paths["test_samples"])
        write_feature_store(self.store, paths["features"])
        return paths


def make_benchmark(n_entities: int = 200, d: int = 32, sigma: float = 0.3, n_train: int = 1600,
                   n_dev: int = 200, n_test: int = 400, n_objects: int = 3, face_prob: float = 0.5,
                   identity_prob: float = 0.3, surname_mention_prob: float = 0.5, paired: bool = False,
                   seed: int = 0, types: Optional[tuple[str, ...]] = None) -> SyntheticBenchmark:
    rng = np.random.default_rng(seed)
    names = synthetic_names(n_entities, rng, per_surname=2 if paired else 5)
    types = types or ("person",)
    if paired:
        shared = [_unit(rng.standard_normal(d)) for _ in range(-(-n_entities // 2))]
        own = [_unit(rng.standard_normal(d)) for _ in range(n_entities)]
        emb = [_unit(shared[i // 2] + own[i]) for i in range(n_entities)]
        text_signal = [shared[i // 2] for i in range(n_entities)]
    else:
        emb = [_unit(rng.standard_normal(d)) for _ in range(n_entities)]
        text_signal = emb

    entities = []
    store: dict[str, np.ndarray] = {}
    for i, name in enumerate(names):
        qid = f"Q{1000 + i}"
        entities.append(EntityRecord(qid, name, types[i % len(types)], f"{name} is synthetic entity {i}.",
                                     "static"))
        store[entity_key(qid)] = emb[i]

    def noisy(x):
        return _unit(x + sigma * rng.standard_normal(d))

    def make_sample(k: int) -> MentionSample:
        sid, ref = f"s{k:05d}", f"img{k:05d}"
        gold = int(rng.integers(n_entities))
        name = names[gold]
        mention = name.split(" ", 1)[1] if rng.random() < surname_mention_prob else name
        store[mention_key(sid)] = noisy(text_signal[gold])
        store[text_key(sid)] = noisy(text_signal[gold])
        gold_slot = int(rng.integers(n_objects))
        raw = []
        for j in range(n_objects):
            shown = gold if j == gold_slot else int(rng.integers(n_entities))
            raw.append(emb[shown])
            store[object_key(ref, j)] = noisy(emb[shown])
            if rng.random() < face_prob:
                store[face_key(sid, j)] = noisy(emb[shown])
        store[image_key(ref)] = noisy(np.mean(raw, axis=0))
        if rng.random() < identity_prob:
            store[identity_key(sid, gold_slot)] = noisy(emb[gold])
        return MentionSample(sid, mention, f"{mention} was photographed at the event.", entities[gold].qid, ref)

    samples = [make_sample(k) for k in range(n_train + n_dev + n_test)]
    return SyntheticBenchmark(
        entities=entities,
        train=samples[:n_train],
        dev=samples[n_train:n_train + n_dev],
        test=samples[n_train + n_dev:],
        store=store,
        d=d,
    )
