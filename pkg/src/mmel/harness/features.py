"""Feature-store key layout and per-sample bundle assembly.

Keys (``<i>`` is a 0-based object index)::

    mention/<sample_id>            encoded mention
    text/<sample_id>               encoded sentence
    image/<image_ref>              whole-image embedding (optional)
    object/<image_ref>/<i>         detected-object embeddings
    face/<sample_id>/<i>           encoded face prompt for object i
    identity/<sample_id>/<i>       encoded identity prompt for object i
    identity/<sample_id>/all       identity prompt not tied to an object
    entity/<qid>                   encoded entity representation
"""
from __future__ import annotations

from collections import defaultdict
from typing import Mapping, Sequence

import numpy as np

from mmel.datamodel import EntityRecord, MentionSample
from mmel.fusion import FeatureBundle

WHOLE_IMAGE_KEY = "all"


class MissingFeatureError(KeyError):
    def __init__(self, key: str):
        self.key = key
        super().__init__(f"missing feature {key!r}")

    def __str__(self):
        return self.args[0]


def mention_key(sample_id: str) -> str:
    return f"mention/{sample_id}"


def text_key(sample_id: str) -> str:
    return f"text/{sample_id}"


def image_key(image_ref: str) -> str:
    return f"image/{image_ref}"


def object_key(image_ref: str, i: int) -> str:
    return f"object/{image_ref}/{i}"


def face_key(sample_id: str, i: int) -> str:
    return f"face/{sample_id}/{i}"


def identity_key(sample_id: str, i: int | str) -> str:
    return f"identity/{sample_id}/{WHOLE_IMAGE_KEY if i == -1 else i}"


def entity_key(qid: str) -> str:
    return f"entity/{qid}"


class FeatureView:
    """Read-only accessor grouping store keys by sample and image."""

    def __init__(self, store: Mapping[str, np.ndarray]):
        self.store = store
        self._objects: dict[str, dict[int, str]] = defaultdict(dict)
        self._faces: dict[str, dict[int, str]] = defaultdict(dict)
        self._identities: dict[str, dict[int, str]] = defaultdict(dict)
        for key in store:
            kind, _, rest = key.partition("/")
            if kind not in ("object", "face", "identity"):
                continue
            owner, _, idx = rest.rpartition("/")
            if kind == "identity" and idx == WHOLE_IMAGE_KEY:
                pos = -1
            else:
                try:
                    pos = int(idx)
                except ValueError:
                    continue
            {"object": self._objects, "face": self._faces, "identity": self._identities}[kind][owner][pos] = key
        self.dim = len(next(iter(store.values()))) if store else 0

    def _get(self, key: str) -> np.ndarray:
        try:
            return np.asarray(self.store[key], dtype=np.float64)
        except KeyError:
            raise MissingFeatureError(key) from None

    def n_objects(self, image_ref: str) -> int:
        return len(self._objects.get(image_ref, {}))

    def bundle(self, sample: MentionSample) -> FeatureBundle:
        sid = sample.sample_id
        m = self._get(mention_key(sid))
        t = self._get(text_key(sid))
        d = m.shape[0]
        v = None
        D = np.zeros((0, d))
        if sample.image_ref is not None:
            ref = sample.image_ref
            if image_key(ref) in self.store:
                v = self._get(image_key(ref))
            objs = self._objects.get(ref, {})
            if objs:
                if sorted(objs) != list(range(len(objs))):
                    raise MissingFeatureError(object_key(ref, min(set(range(len(objs))) - set(objs))))
                D = np.stack([self._get(objs[i]) for i in range(len(objs))])
        faces = self._faces.get(sid, {})
        f_index = sorted(i for i in faces if i < len(D))
        Fr = np.stack([self._get(faces[i]) for i in f_index]) if f_index else np.zeros((0, d))
        ids = self._identities.get(sid, {})
        order = sorted(i for i in ids if i >= 0) + ([-1] if -1 in ids else [])
        S = np.stack([self._get(ids[i]) for i in order]) if order else np.zeros((0, d))
        return FeatureBundle(m=m, t=t, v=v, D=D, F=Fr, F_index=np.array(f_index, dtype=np.int64), S=S)

    def entity_matrix(self, entities: Sequence[EntityRecord]) -> np.ndarray:
        if not entities:
            return np.zeros((0, self.dim))
        return np.stack([self._get(entity_key(e.qid)) for e in entities])
