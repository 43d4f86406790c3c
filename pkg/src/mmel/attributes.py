"""Prompt sentences from externally detected facial attributes and identity guesses."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence

# identity guesses not tied to one detected object
WHOLE_IMAGE = -1

IDENTITY_THRESHOLD = 0.5


@dataclass(frozen=True)
class FaceAttributes:
    object_index: int
    gender: str
    race: str
    age: int

    def __post_init__(self):
        if self.object_index < 0:
            raise ValueError("face attributes must reference a detected object")
        if self.age < 0:
            raise ValueError("age must be non-negative")


@dataclass(frozen=True)
class IdentityGuess:
    object_index: int
    label: str
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"identity score {self.score} outside [0, 1]")
        if self.object_index < WHOLE_IMAGE:
            raise ValueError("object_index must be >= -1")


def render_face_prompt(mention: str, attrs: FaceAttributes) -> str:
    return f"{mention}, gender: {attrs.gender}, race: {attrs.race}, age: {attrs.age}"


def filter_identities(guesses: Iterable[IdentityGuess], threshold: float = IDENTITY_THRESHOLD) -> list[IdentityGuess]:
    """Keep guesses scoring strictly above ``threshold``, in input order."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return [g for g in guesses if g.score > threshold]


def render_identity_prompt(mention: str, kept: Sequence[IdentityGuess]) -> str:
    if not kept:
        return ""
    return f"{mention} resembles: " + ", ".join(g.label for g in kept)


def identity_prompts_by_object(mention: str, kept: Sequence[IdentityGuess]) -> dict[int, str]:
    """One identity prompt per object index (``WHOLE_IMAGE`` included), ordered by index."""
    groups: dict[int, list[IdentityGuess]] = {}
    for g in kept:
        groups.setdefault(g.object_index, []).append(g)
    return {idx: render_identity_prompt(mention, groups[idx]) for idx in sorted(groups)}


def check_objects(faces: Sequence[FaceAttributes], guesses: Sequence[IdentityGuess], n_objects: int) -> list[str]:
    """Problems with object indices given ``n_objects`` detected objects."""
    issues = []
    for f in faces:
        if f.object_index >= n_objects:
            issues.append(f"face row references object {f.object_index} of {n_objects}")
    for g in guesses:
        if g.object_index >= n_objects:
            issues.append(f"identity {g.label!r} references object {g.object_index} of {n_objects}")
    if len({f.object_index for f in faces}) != len(faces):
        issues.append("more than one face row for an object")
    return issues


class AttributeProvider(Protocol):
    capabilities: tuple[str, ...]

    def fetch(self, image_ref: str, boxes: Optional[Sequence] = None) -> tuple[list[FaceAttributes], list[IdentityGuess]]:
        ...


class FixtureAttributeProvider:
    """Replays recorded detector output.

    The fixture is JSON lines, one record per image::

        {"image_ref": "img7", "version": 1,
         "faces": [{"object_index": 0, "gender": "male", "race": "white", "age": 50}],
         "identities": [{"object_index": 0, "label": "Barack Obama", "score": 0.756}]}

    Unknown images yield no attributes.
    """

    capabilities = ("face", "identity")

    def __init__(self, records: dict[str, dict]):
        self._records = records

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureAttributeProvider":
        records = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    obj = json.loads(line)
                    records[obj["image_ref"]] = obj
        return cls(records)

    def fetch(self, image_ref, boxes=None):
        rec = self._records.get(image_ref)
        if rec is None:
            return [], []
        faces = [FaceAttributes(int(f["object_index"]), str(f["gender"]), str(f["race"]), int(f["age"]))
                 for f in rec.get("faces", [])]
        guesses = [IdentityGuess(int(g.get("object_index", WHOLE_IMAGE)), str(g["label"]), float(g["score"]))
                   for g in rec.get("identities", [])]
        return faces, guesses
