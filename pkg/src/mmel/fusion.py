"""Query encoder: cross-attention enhancer units, gated fusion and cosine scoring.

All modality features are first projected into the shared space, then the
mention attends over the text (text unit) and over object, face-prompt and
identity-prompt rows (one shared visual unit).  The four enhanced mention
features are combined as

    g_m = m + m_t + m_v
    g   = [(1 - eps) * g_m , eps * (m_f + m_s)] @ W_g + b_g

with ``eps = sigmoid(gate_logit)`` and ``W_g`` of shape ``2d x d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mmel.datamodel import EntityRecord
from mmel.encoders import MODALITIES, Projection

UNIT_TAGS = ("shared_visual", "text")


def cross_att(q: torch.Tensor, X: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor,
              w_o: torch.Tensor, heads: int, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Multi-head scaled dot-product attention of one query row over ``X``.

    Shapes: ``q`` is (d,) or (B, d); ``X`` is (n, d) or (B, n, d); ``mask``
    (B, n) marks real rows.  A sample whose mask is all False gets a zero
    output.  No residual and no normalization happen here.
    """
    vector_query = q.dim() == 1
    if X.dim() == 2:
        q = q.reshape(1, -1)
        X = X.unsqueeze(0)
        mask = None if mask is None else mask.reshape(1, -1)
    B, n, d = X.shape
    if q.shape != (B, d):
        raise ValueError(f"query shape {tuple(q.shape)} does not match keys {tuple(X.shape)}")
    if n == 0:
        raise ValueError("cross_att needs at least one key row")
    if d % heads:
        raise ValueError(f"d={d} is not divisible by heads={heads}")
    hd = d // heads

    Q = (q @ w_q).reshape(B, heads, 1, hd)
    K = (X @ w_k).reshape(B, n, heads, hd).transpose(1, 2)
    V = (X @ w_v).reshape(B, n, heads, hd).transpose(1, 2)
    scores = Q @ K.transpose(-1, -2) / math.sqrt(hd)  # B, h, 1, n

    has_any = None
    if mask is not None:
        has_any = mask.any(dim=-1)
        keep = mask | ~has_any[:, None]
        scores = scores.masked_fill(~keep[:, None, None, :], float("-inf"))
    scores = scores - scores.amax(dim=-1, keepdim=True).detach()
    weights = scores.exp()
    weights = weights / weights.sum(dim=-1, keepdim=True)

    out = (weights @ V).transpose(1, 2).reshape(B, d) @ w_o
    if has_any is not None:
        out = out * has_any[:, None].to(out.dtype)
    return out[0] if vector_query else out


class CrossAttention(nn.Module):
    def __init__(self, d: int, heads: int, tag: str = "shared_visual", init: str = "identity",
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} is not divisible by heads={heads}")
        if tag not in UNIT_TAGS:
            raise ValueError(f"unknown unit tag {tag!r}")
        self.d, self.heads, self.tag = d, heads, tag
        self.w_q = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.w_k = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.w_v = nn.Parameter(torch.empty(d, d, dtype=dtype))
        self.w_o = nn.Parameter(torch.empty(d, d, dtype=dtype))
        with torch.no_grad():
            for w in (self.w_q, self.w_k, self.w_v, self.w_o):
                if init == "identity":
                    w.copy_(torch.eye(d, dtype=dtype))
                elif init == "random":
                    bound = (3.0 / d) ** 0.5
                    w.uniform_(-bound, bound, generator=generator)
                else:
                    raise ValueError(f"unknown init {init!r}")

    def forward(self, q, X, mask=None):
        return cross_att(q, X, self.w_q, self.w_k, self.w_v, self.w_o, self.heads, mask)


def gated_fuse(m, m_t, m_v, m_f, m_s, w_g: torch.Tensor, b_g: torch.Tensor, gate_logit: torch.Tensor):
    """Returns ``(g_m, g)``; the two gated halves are concatenated before ``W_g``."""
    eps = torch.sigmoid(gate_logit)
    g_m = m + m_t + m_v
    joint = torch.cat([(1 - eps) * g_m, eps * (m_f + m_s)], dim=-1)
    return g_m, joint @ w_g + b_g


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None) -> torch.Tensor:
    if p <= 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


@dataclass
class FeatureBundle:
    """Per-sample features as produced by the encoders (before projection).

    ``F_index`` gives, for each face row, the object it was detected on.
    """
    m: np.ndarray
    t: np.ndarray
    v: Optional[np.ndarray] = None
    D: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    F: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    F_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    S: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        d = self.m.shape[-1]
        self.D = self.D.reshape(-1, d) if self.D.size else np.zeros((0, d))
        self.F = self.F.reshape(-1, d) if self.F.size else np.zeros((0, d))
        self.S = self.S.reshape(-1, d) if self.S.size else np.zeros((0, d))
        self.F_index = np.asarray(self.F_index, dtype=np.int64).reshape(-1)
        if self.t.shape[-1] != d or (self.v is not None and self.v.shape[-1] != d):
            raise ValueError("all features must share one dimension")
        if len(self.F_index) != len(self.F):
            raise ValueError("every face row needs an object index")
        if len(self.F_index) and (self.F_index.min() < 0 or self.F_index.max() >= len(self.D)):
            raise ValueError("face row references a missing object")

    @property
    def dim(self) -> int:
        return self.m.shape[-1]


@dataclass
class FeatureBatch:
    mention: torch.Tensor
    text: torch.Tensor
    image: torch.Tensor
    image_mask: torch.Tensor
    objects: torch.Tensor
    object_mask: torch.Tensor
    faces: torch.Tensor
    face_mask: torch.Tensor
    identities: torch.Tensor
    identity_mask: torch.Tensor
    # aligned (sample, face row, object row) triples for the fine-level loss
    pair_sample: torch.Tensor
    pair_face: torch.Tensor
    pair_object: torch.Tensor

    def __len__(self):
        return self.mention.shape[0]


def _pad(rows: Sequence[np.ndarray], d: int, dtype):
    width = max(1, max((len(r) for r in rows), default=0))
    out = torch.zeros(len(rows), width, d, dtype=dtype)
    mask = torch.zeros(len(rows), width, dtype=torch.bool)
    for i, r in enumerate(rows):
        if len(r):
            out[i, : len(r)] = torch.as_tensor(r, dtype=dtype)
            mask[i, : len(r)] = True
    return out, mask


def collate(bundles: Sequence[FeatureBundle], dtype=torch.float32) -> FeatureBatch:
    d = bundles[0].dim
    objects, object_mask = _pad([b.D for b in bundles], d, dtype)
    faces, face_mask = _pad([b.F for b in bundles], d, dtype)
    identities, identity_mask = _pad([b.S for b in bundles], d, dtype)
    image = torch.zeros(len(bundles), d, dtype=dtype)
    image_mask = torch.zeros(len(bundles), dtype=torch.bool)
    ps, pf, po = [], [], []
    for i, b in enumerate(bundles):
        if b.v is not None:
            image[i] = torch.as_tensor(b.v, dtype=dtype)
            image_mask[i] = True
        for j, obj in enumerate(b.F_index):
            ps.append(i)
            pf.append(j)
            po.append(int(obj))
    return FeatureBatch(
        mention=torch.as_tensor(np.stack([b.m for b in bundles]), dtype=dtype),
        text=torch.as_tensor(np.stack([b.t for b in bundles]), dtype=dtype),
        image=image,
        image_mask=image_mask,
        objects=objects,
        object_mask=object_mask,
        faces=faces,
        face_mask=face_mask,
        identities=identities,
        identity_mask=identity_mask,
        pair_sample=torch.tensor(ps, dtype=torch.long),
        pair_face=torch.tensor(pf, dtype=torch.long),
        pair_object=torch.tensor(po, dtype=torch.long),
    )


@dataclass
class FusionOutput:
    m: torch.Tensor
    m_t: torch.Tensor
    m_v: torch.Tensor
    m_f: torch.Tensor
    m_s: torch.Tensor
    g_m: torch.Tensor
    g: torch.Tensor
    # projected rows feeding the fine-level loss
    face_rows: torch.Tensor
    object_rows: torch.Tensor


class LinkingModel(nn.Module):
    """Trainable part of the linker: projections, two attention units, gate.

    The ``use_*`` switches remove an input group entirely (the ablation
    variants): a removed group takes the empty-input path and contributes a
    zero enhanced feature.
    """

    def __init__(self, d: int, heads: int = 8, dropout: float = 0.4, gate_logit: float = -2.0,
                 init: str = "identity", seed: int = 0, dtype=torch.float32, use_text: bool = True,
                 use_image: bool = True, use_face: bool = True, use_identity: bool = True):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.d, self.heads, self.p_drop = d, heads, dropout
        self.use_text, self.use_image, self.use_face, self.use_identity = use_text, use_image, use_face, use_identity
        self.proj = nn.ModuleDict({m: Projection(d, d, m, init=init, generator=gen, dtype=dtype) for m in MODALITIES})
        self.text_att = CrossAttention(d, heads, "text", init=init, generator=gen, dtype=dtype)
        self.visual_att = CrossAttention(d, heads, "shared_visual", init=init, generator=gen, dtype=dtype)
        w_g = torch.cat([torch.eye(d, dtype=dtype), torch.eye(d, dtype=dtype)], dim=0)
        if init == "random":
            w_g = w_g + 0.1 * torch.randn(2 * d, d, generator=gen, dtype=dtype)
        self.gate_weight = nn.Parameter(w_g)
        self.gate_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.gate_logit = nn.Parameter(torch.tensor(float(gate_logit), dtype=dtype))

    @property
    def epsilon(self) -> float:
        return torch.sigmoid(self.gate_logit.detach()).item()

    def forward(self, batch: FeatureBatch, generator: torch.Generator | None = None) -> FusionOutput:
        B = len(batch)
        m = self.proj["mention"](batch.mention)
        t = self.proj["text"](batch.text)
        D = self.proj["object"](batch.objects)
        v = self.proj["image"](batch.image)
        Fr = self.proj["face"](batch.faces)
        S = self.proj["identity"](batch.identities)

        text_mask = torch.full((B, 1), self.use_text, dtype=torch.bool)
        m_t = self.text_att(m, t[:, None, :], text_mask)

        # no detected objects: attend over the whole image instead, if any
        obj_mask = batch.object_mask
        use_v = ~obj_mask.any(dim=-1) & batch.image_mask
        slot0 = torch.zeros(obj_mask.shape[1], dtype=torch.bool)
        slot0[0] = True
        fallback = use_v[:, None] & slot0[None, :]
        keys = torch.where(fallback[..., None], v[:, None, :].expand_as(D), D)
        key_mask = obj_mask | fallback
        if not self.use_image:
            key_mask = torch.zeros_like(key_mask)
        m_v = self.visual_att(m, keys, key_mask)

        face_mask = batch.face_mask if self.use_face else torch.zeros_like(batch.face_mask)
        m_f = self.visual_att(m, Fr, face_mask)
        ident_mask = batch.identity_mask if self.use_identity else torch.zeros_like(batch.identity_mask)
        m_s = self.visual_att(m, S, ident_mask)

        if self.training and self.p_drop > 0:
            m_t, m_v, m_f, m_s = (dropout(x, self.p_drop, generator) for x in (m_t, m_v, m_f, m_s))

        g_m, g = gated_fuse(m, m_t, m_v, m_f, m_s, self.gate_weight, self.gate_bias, self.gate_logit)
        if self.use_face and len(batch.pair_sample):
            face_rows = Fr[batch.pair_sample, batch.pair_face]
            object_rows = D[batch.pair_sample, batch.pair_object]
        else:
            face_rows = object_rows = m.new_zeros(0, self.d)
        return FusionOutput(m, m_t, m_v, m_f, m_s, g_m, g, face_rows, object_rows)

    def encode_entities(self, er_features: torch.Tensor) -> torch.Tensor:
        """Project entity-representation features and L2-normalize rows."""
        return F.normalize(self.proj["entity"](er_features), dim=-1, eps=1e-12)

    def config(self) -> dict:
        return {
            "d": self.d,
            "heads": self.heads,
            "use_text": self.use_text,
            "use_image": self.use_image,
            "use_face": self.use_face,
            "use_identity": self.use_identity,
        }


def enhance_all(bundle: FeatureBundle, model: LinkingModel, generator=None) -> FusionOutput:
    """Single-sample forward pass; outputs keep a leading batch axis of 1."""
    dtype = model.gate_weight.dtype
    return model(collate([bundle], dtype=dtype), generator)


def encode_entity(entity: EntityRecord, encoder: Callable[[str], np.ndarray], projection: Projection) -> np.ndarray:
    if not entity.er_text.strip():
        raise ValueError(f"entity {entity.qid} has an empty representation and should have been dropped")
    x = torch.as_tensor(encoder(entity.er_text), dtype=projection.weight.dtype)
    with torch.no_grad():
        y = projection(x)
    y = y.double().numpy()
    return y / np.linalg.norm(y)


def score(g, g_e, return_flag: bool = False):
    """Cosine similarity; a zero-norm input scores 0 and sets the degenerate flag."""
    a = np.asarray(g, dtype=np.float64).reshape(-1)
    b = np.asarray(g_e, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        value, degenerate = 0.0, True
    else:
        value, degenerate = float(np.clip(a @ b / (na * nb), -1.0, 1.0)), False
    return (value, degenerate) if return_flag else value
