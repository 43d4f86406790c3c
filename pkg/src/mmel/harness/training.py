"""Mini-batch training loop with periodic dev evaluation and best-checkpoint selection."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import torch

from mmel.datamodel import EntityRecord, MentionSample
from mmel.fusion import FeatureBundle, FusionOutput, LinkingModel, collate
from mmel.objectives import (
    LossConfig,
    NegativeSet,
    batch_triplet_loss,
    coarse_loss,
    fine_loss,
    sample_negatives,
    total_loss,
)
from mmel.harness.checkpoint import Checkpoint, model_from_config, save_checkpoint, snapshot, torch_dtype
from mmel.harness.config import RunConfig, save_config
from mmel.harness.evaluation import LinkingContext, candidates_for, evaluate_model

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    total: torch.Tensor
    fine: torch.Tensor
    coarse: torch.Tensor
    triplet: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {"loss": self.total.item(), "L_f": self.fine.item(), "L_c": self.coarse.item(),
                "L_t": self.triplet.item()}


def compute_losses(model: LinkingModel, out: FusionOutput, entity_features: torch.Tensor,
                   position: Mapping[str, int], golds: Sequence[str], negatives: Sequence[NegativeSet],
                   config: LossConfig) -> LossBreakdown:
    """Fine + alpha * coarse + beta * triplet for one forward pass."""
    needed = sorted({position[q] for q in golds} | {position[q] for n in negatives for q in n.all})
    slot = {p: i for i, p in enumerate(needed)}
    emb = model.encode_entities(entity_features[needed])
    pos = emb[[slot[position[q]] for q in golds]]
    K = max(1, max(len(n.all) for n in negatives))
    idx = torch.zeros(len(golds), K, dtype=torch.long)
    mask = torch.zeros(len(golds), K, dtype=torch.bool)
    for i, n in enumerate(negatives):
        for j, q in enumerate(n.all):
            idx[i, j] = slot[position[q]]
            mask[i, j] = True
    neg = emb[idx]
    l_t = batch_triplet_loss(out.g, pos, neg, mask, config.margin)
    l_c = coarse_loss(out, config.tau)
    l_f = fine_loss(out, config.tau)
    return LossBreakdown(total_loss(l_f, l_c, l_t, config), l_f, l_c, l_t)


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: list[dict]
    evals: list[dict] = field(default_factory=list)


def train(config: RunConfig, train_samples: Sequence[MentionSample], entities: Sequence[EntityRecord],
          store: Mapping[str, np.ndarray], dev_samples: Sequence[MentionSample] = (),
          out_dir: Optional[str | Path] = None) -> TrainResult:
    """Run the optimizer until ``epochs`` or ``max_steps``; keep the best dev T@1.

    Everything random (batch order, negatives, dropout, init) is drawn from
    generators seeded by ``config.seed``, so equal inputs give bit-identical
    loss logs.
    """
    if len(train_samples) < 2:
        raise TrainingError("need at least two training samples")
    dtype = torch_dtype(config.dtype)
    ctx = LinkingContext.build(entities, store)
    bundles: list[FeatureBundle] = [ctx.view.bundle(s) for s in train_samples]
    for s in train_samples:
        if s.gold_qid not in ctx.position:
            raise TrainingError(f"sample {s.sample_id} has unknown gold entity {s.gold_qid}")
    train_cands = candidates_for(train_samples, ctx, config.lam, config.typed_retrieval)
    dev_cands = candidates_for(dev_samples, ctx, config.lam, config.typed_retrieval) if dev_samples else None
    ent_feats = torch.as_tensor(ctx.entity_features, dtype=dtype)
    loss_cfg = config.loss

    model = model_from_config(config)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    dropout_gen = torch.Generator().manual_seed(config.seed + 1)

    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        save_config(config, out_path / "config.resolved.yaml")
        log_fh = open(out_path / "train_log.jsonl", "a", encoding="utf-8")

    records: list[dict] = []
    evals: list[dict] = []
    best: Optional[Checkpoint] = None
    best_t1 = -1.0
    since_best = 0
    step = 0
    n = len(train_samples)
    stop = False

    def run_eval():
        nonlocal best, best_t1, since_best
        if not dev_samples:
            return
        metrics, _ = evaluate_model(model, dev_samples, ctx, config.lam, config.typed_retrieval,
                                    workers=config.eval_workers, chunk=config.eval_chunk, candidates=dev_cands)
        evals.append({"step": step, **{f"T@{k}": v for k, v in metrics.items()}})
        log.info("step %d dev T@1 %.4f", step, metrics[1])
        # strict improvement keeps the earliest step on ties
        if metrics[1] > best_t1:
            best_t1 = metrics[1]
            best = snapshot(model, step, config, metrics)
            since_best = 0
            if out_path is not None:
                save_checkpoint(best, out_path / "best.ckpt")
        else:
            since_best += 1

    try:
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, config.batch_size):
                rows = order[start:start + config.batch_size]
                if len(rows) < 2:
                    continue
                batch = collate([bundles[i] for i in rows], dtype=dtype)
                golds = [train_samples[i].gold_qid for i in rows]
                negs = [
                    sample_negatives(golds[j], train_cands[i].qids, golds[:j] + golds[j + 1:], loss_cfg, rng)
                    for j, i in enumerate(rows)
                ]
                model.train()
                out = model(batch, dropout_gen)
                losses = compute_losses(model, out, ent_feats, ctx.position, golds, negs, loss_cfg)
                if not torch.isfinite(losses.total):
                    raise TrainingError(f"non-finite loss at step {step + 1}: {losses.as_floats()}")
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                opt.step()
                step += 1
                rec = {"step": step, "epoch": epoch, **losses.as_floats()}
                records.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec) + "\n")
                if step % config.eval_every == 0:
                    run_eval()
                    if config.patience and since_best >= config.patience:
                        stop = True
                if config.max_steps and step >= config.max_steps:
                    stop = True
                if stop:
                    break
            if stop:
                break
        if dev_samples and (not evals or evals[-1]["step"] != step):
            run_eval()
    finally:
        if log_fh is not None:
            log_fh.close()

    final = snapshot(model, step, config, evals[-1] if evals else {})
    if best is None:
        best = final
        if out_path is not None:
            save_checkpoint(best, out_path / "best.ckpt")
    if out_path is not None:
        save_checkpoint(final, out_path / "last.ckpt")
    return TrainResult(best=best, final=final, log=records, evals=evals)
