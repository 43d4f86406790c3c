"""Candidate generation, ranking and top-k evaluation for a trained model."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from mmel.datamodel import EntityRecord, MentionSample
from mmel.fusion import LinkingModel, collate
from mmel.retrieval import (
    DEFAULT_KS,
    CandidateSet,
    EntityIndex,
    RankResult,
    format_ranking,
    generate_candidates_batch,
    generate_candidates_typed,
    rank,
    topk_accuracy,
)
from mmel.harness.features import FeatureView


@dataclass
class LinkingContext:
    """Everything about the knowledge base a forward pass needs."""
    entities: list[EntityRecord]
    index: EntityIndex
    view: FeatureView
    entity_features: np.ndarray
    position: dict[str, int]

    @classmethod
    def build(cls, entities: Sequence[EntityRecord], store: Mapping[str, np.ndarray]) -> "LinkingContext":
        view = FeatureView(store)
        entities = list(entities)
        return cls(
            entities=entities,
            index=EntityIndex.from_entities(entities),
            view=view,
            entity_features=view.entity_matrix(entities),
            position={e.qid: i for i, e in enumerate(entities)},
        )

    @property
    def names(self) -> dict[str, str]:
        return {e.qid: e.name for e in self.entities}


def candidates_for(samples: Sequence[MentionSample], ctx: LinkingContext, lam: int,
                   typed: bool = False) -> list[CandidateSet]:
    if not typed:
        return generate_candidates_batch([s.mention for s in samples], ctx.index, lam, [s.sample_id for s in samples])
    out = []
    for s in samples:
        # the mention's type annotation is taken from its gold entity
        gold_pos = ctx.position.get(s.gold_qid)
        type_tag = ctx.entities[gold_pos].type_tag if gold_pos is not None else None
        out.append(generate_candidates_typed(s.mention, type_tag, s.provided_candidates or (), ctx.index, lam,
                                             s.sample_id))
    return out


def entity_embeddings(model: LinkingModel, ctx: LinkingContext) -> np.ndarray:
    dtype = model.gate_weight.dtype
    was_training = model.training
    model.eval()
    with torch.no_grad():
        E = model.encode_entities(torch.as_tensor(ctx.entity_features, dtype=dtype))
    model.train(was_training)
    return E.double().numpy()


def _chunks(n: int, size: int):
    return [range(i, min(n, i + size)) for i in range(0, n, size)]


def evaluate_model(model: LinkingModel, samples: Sequence[MentionSample], ctx: LinkingContext, lam: int,
                   typed: bool = False, ks=DEFAULT_KS, workers: int = 1, chunk: int = 64,
                   candidates: Optional[Sequence[CandidateSet]] = None) -> tuple[dict[int, float], list[RankResult]]:
    """Dropout-free ranking of every sample's candidates.

    Chunk boundaries do not depend on ``workers``, so results are identical
    for any worker count.
    """
    if candidates is None:
        candidates = candidates_for(samples, ctx, lam, typed)
    E = entity_embeddings(model, ctx)
    dtype = model.gate_weight.dtype
    was_training = model.training
    model.eval()

    def run(rows: range) -> list[RankResult]:
        batch = collate([ctx.view.bundle(samples[i]) for i in rows], dtype=dtype)
        with torch.no_grad():
            g = model(batch).g.double().numpy()
        out = []
        for j, i in enumerate(rows):
            cands = candidates[i]
            emb = E[[ctx.position[q] for q in cands.qids]] if len(cands) else np.zeros((0, E.shape[1]))
            out.append(rank(g[j], cands.qids, emb, samples[i].gold_qid, samples[i].sample_id))
        return out

    parts = _chunks(len(samples), chunk)
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                chunks = list(pool.map(run, parts))
        else:
            chunks = [run(p) for p in parts]
    finally:
        model.train(was_training)
    results = [r for c in chunks for r in c]
    return topk_accuracy(results, ks), results


def metrics_row(metrics: Mapping[int, float], dataset: str, split: str, lam: int, config_hash: str,
                n: int) -> dict:
    row = {"dataset": dataset, "split": split, "n": n}
    row.update({f"T@{k}": round(float(v), 6) for k, v in sorted(metrics.items())})
    row.update({"lambda": lam, "config_hash": config_hash})
    return row


def format_table(rows: Sequence[Mapping]) -> str:
    """Plain-text table; accuracies shown as percentages with two decimals."""
    if not rows:
        return "(no results)"
    seen: list[str] = []
    for r in rows:
        seen += [k for k in r if k not in seen]
    topk = sorted((k for k in seen if k.startswith("T@")), key=lambda k: int(k[2:]))
    lead = [k for k in ("dataset", "split", "n") if k in seen]
    tail = [k for k in ("lambda", "config_hash", "step") if k in seen]
    keys = lead + topk + tail + [k for k in seen if k not in lead + topk + tail]

    def cell(key, value):
        if value is None:
            return "-"
        if key.startswith("T@"):
            return f"{100 * value:.2f}"
        return str(value)

    table = [keys] + [[cell(k, r.get(k)) for k in keys] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(keys))]
    lines = ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def link(model: LinkingModel, sample: MentionSample, ctx: LinkingContext, lam: int, typed: bool = False,
         k: int = 5) -> tuple[RankResult, str]:
    """Rank one sample's candidates; returns the result and a printable listing."""
    cands = candidates_for([sample], ctx, lam, typed)
    _, results = evaluate_model(model, [sample], ctx, lam, typed, ks=(1,), candidates=cands)
    return results[0], format_ranking(results[0], ctx.names, k)
