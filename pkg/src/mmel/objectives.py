"""Training objectives: mean-shifted contrastive losses, triplet ranking loss, negatives."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from mmel.fusion import FusionOutput

log = logging.getLogger(__name__)

_NEAR_ZERO = 1e-8
_JITTER_SCALE = 1e-6


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    alpha: float = 1.0
    beta: float = 10.0
    margin: float = 0.5
    n_hard: int = 4
    n_inbatch: int = 1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.margin < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("margin and loss weights must be non-negative")
        if self.n_hard < 0 or self.n_inbatch < 0:
            raise ValueError("negative counts must be non-negative")


@dataclass(frozen=True)
class NegativeSet:
    hard: tuple[str, ...]
    inbatch: tuple[str, ...]

    @property
    def all(self) -> tuple[str, ...]:
        return self.hard + self.inbatch


def msc_loss(A: torch.Tensor, Bm: torch.Tensor, tau: float, jitter_seed: int = 0) -> torch.Tensor:
    """Mean-shifted contrastive loss for paired rows ``A[k] <-> Bm[k]``.

    The 2B rows are centred on their mean and L2-normalized; each row is an
    anchor whose positive is its partner and whose denominator runs over all
    other 2B - 1 rows.  Returns the mean over the 2B anchors.
    """
    if A.shape != Bm.shape or A.dim() != 2:
        raise ValueError(f"paired inputs must share a (B, d) shape, got {tuple(A.shape)} and {tuple(Bm.shape)}")
    B = A.shape[0]
    if B < 2:
        raise ValueError("mean-shifted contrastive loss needs at least 2 pairs")
    Z = torch.cat([A, Bm], dim=0)
    Z = Z - Z.mean(dim=0, keepdim=True)
    small = Z.detach().norm(dim=1) < _NEAR_ZERO
    if bool(small.any()):
        gen = torch.Generator().manual_seed(jitter_seed)
        jitter = _JITTER_SCALE * torch.randn(Z.shape, generator=gen, dtype=Z.dtype)
        Z = torch.where(small[:, None], Z + jitter, Z)
    Z = Z / Z.norm(dim=1, keepdim=True)
    S = Z @ Z.T / tau
    n = 2 * B
    eye = torch.eye(n, dtype=torch.bool)
    partner = torch.cat([torch.arange(B, n), torch.arange(0, B)])
    positive = S[torch.arange(n), partner]
    denom = torch.logsumexp(S.masked_fill(eye, float("-inf")), dim=1)
    return (denom - positive).mean()


def coarse_loss(out: FusionOutput, tau: float) -> torch.Tensor:
    """Alignment of text-enhanced and vision-enhanced mention features."""
    return msc_loss(out.m_t, out.m_v, tau)


def fine_loss(out: FusionOutput, tau: float) -> torch.Tensor:
    """Alignment of face-prompt rows with the object rows they were detected on.

    Pairs are pooled over the whole batch; fewer than two pairs contribute 0.
    """
    if out.face_rows.shape[0] < 2:
        log.debug("fine-level loss skipped: %d face/object pairs in batch", out.face_rows.shape[0])
        return out.g.new_zeros(())
    return msc_loss(out.face_rows, out.object_rows, tau)


def triplet_from_similarities(pos_sim, neg_sims, margin: float):
    """Mean of ``max(neg - pos + margin, 0)`` over negatives."""
    neg = torch.as_tensor(neg_sims, dtype=torch.float64) if not torch.is_tensor(neg_sims) else neg_sims
    pos = torch.as_tensor(pos_sim, dtype=neg.dtype) if not torch.is_tensor(pos_sim) else pos_sim
    if neg.numel() == 0:
        raise ValueError("triplet loss needs at least one negative")
    return torch.clamp(neg - pos + margin, min=0).mean()


def triplet_loss(g: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, margin: float) -> torch.Tensor:
    """Cosine triplet loss for one query: positives must beat every negative by ``margin``."""
    negatives = negatives.reshape(-1, g.shape[-1])
    if negatives.shape[0] == 0:
        raise ValueError("triplet loss needs at least one negative")
    pos = F.cosine_similarity(g, positive, dim=-1, eps=1e-12)
    neg = F.cosine_similarity(g[None, :], negatives, dim=-1, eps=1e-12)
    return triplet_from_similarities(pos, neg, margin)


def batch_triplet_loss(g: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor,
                       neg_mask: torch.Tensor, margin: float) -> torch.Tensor:
    """Batched form: ``g``, ``positive`` are (B, d), ``negatives`` (B, K, d) with mask (B, K).

    Per-sample means over real negatives, averaged over samples that have any.
    """
    pos = F.cosine_similarity(g, positive, dim=-1, eps=1e-12)
    neg = F.cosine_similarity(g[:, None, :], negatives, dim=-1, eps=1e-12)
    hinge = torch.clamp(neg - pos[:, None] + margin, min=0) * neg_mask.to(g.dtype)
    counts = neg_mask.sum(dim=1)
    has = counts > 0
    if not bool(has.any()):
        return g.new_zeros(())
    per_sample = hinge.sum(dim=1)[has] / counts[has].to(g.dtype)
    return per_sample.mean()


def total_loss(fine, coarse, triplet, config: LossConfig):
    return fine + config.alpha * coarse + config.beta * triplet


def sample_negatives(gold: str, candidates: Sequence[str], batch_golds: Sequence[str], config: LossConfig,
                     rng: np.random.Generator) -> NegativeSet:
    """Hard negatives from the retrieved candidates, in-batch negatives from other golds.

    ``batch_golds`` are the gold ids of the *other* batch members.
    """
    pool = [q for q in dict.fromkeys(candidates) if q != gold]
    if len(pool) > config.n_hard:
        picks = rng.choice(len(pool), size=config.n_hard, replace=False)
        hard = tuple(pool[i] for i in sorted(picks))
    else:
        hard = tuple(pool)
    others = [q for q in dict.fromkeys(batch_golds) if q != gold]
    if len(others) > config.n_inbatch:
        picks = rng.choice(len(others), size=config.n_inbatch, replace=False)
        inbatch = tuple(others[i] for i in sorted(picks))
    else:
        inbatch = tuple(others)
    return NegativeSet(hard, inbatch)
