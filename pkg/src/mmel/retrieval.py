"""Candidate generation by fuzzy name match, cosine ranking, and top-k accuracy."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from rapidfuzz import process
from rapidfuzz.distance import Levenshtein

from mmel.datamodel import EntityRecord

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10, 20)


def name_similarity(a: str, b: str) -> float:
    """``1 - levenshtein / max(len)`` on casefolded strings; two empty strings score 1."""
    a, b = a.casefold(), b.casefold()
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - Levenshtein.distance(a, b) / longest


@dataclass(frozen=True)
class CandidateSet:
    sample_id: str
    qids: tuple[str, ...]
    scores: tuple[float, ...]
    # leading entries supplied by the dataset rather than by the fuzzy fill
    n_provided: int = 0

    def __post_init__(self):
        if len(self.qids) != len(self.scores):
            raise ValueError("qids and scores must align")
        if len(set(self.qids)) != len(self.qids):
            raise ValueError("duplicate candidate ids")
        fuzzy = self.scores[self.n_provided:]
        if any(x < y for x, y in zip(fuzzy, fuzzy[1:])):
            raise ValueError("fuzzy candidate scores must be non-increasing")

    def __len__(self):
        return len(self.qids)

    def __contains__(self, qid):
        return qid in self.qids


class EntityIndex:
    """Immutable name index, entries held in ascending-qid order.

    Holding entries in a canonical order makes candidate generation
    independent of insertion order: a stable sort on score then breaks ties
    by ascending qid.
    """

    def __init__(self, entries: Iterable[tuple[str, str, Optional[str]]]):
        rows = sorted(entries, key=lambda r: r[0])
        qids = [r[0] for r in rows]
        if len(set(qids)) != len(qids):
            raise ValueError("entity index qids must be unique")
        self.qids = np.array(qids, dtype=object)
        self.names = [r[1].casefold() for r in rows]
        self.types = [r[2] for r in rows]
        self.name_lens = np.array([len(n) for n in self.names], dtype=np.int64)
        self._pos = {q: i for i, q in enumerate(qids)}
        self.partitions: dict[Optional[str], np.ndarray] = {}
        for t in dict.fromkeys(self.types):
            self.partitions[t] = np.array([i for i, tt in enumerate(self.types) if tt == t], dtype=np.int64)

    @classmethod
    def from_entities(cls, entities: Iterable[EntityRecord]) -> "EntityIndex":
        return cls((e.qid, e.name, e.type_tag) for e in entities)

    def __len__(self):
        return len(self.names)

    def __contains__(self, qid):
        return qid in self._pos

    def position(self, qid: str) -> int:
        return self._pos[qid]

    def similarities(self, mentions: Sequence[str], positions: Optional[np.ndarray] = None) -> np.ndarray:
        """Name-similarity matrix (mentions x entries, or x ``positions``)."""
        if positions is None:
            names, lens = self.names, self.name_lens
        else:
            names = [self.names[i] for i in positions]
            lens = self.name_lens[positions]
        queries = [m.casefold() for m in mentions]
        if not names:
            return np.zeros((len(queries), 0))
        dist = process.cdist(queries, names, scorer=Levenshtein.distance, dtype=np.int64, workers=1)
        qlens = np.array([len(q) for q in queries], dtype=np.int64)
        longest = np.maximum(qlens[:, None], lens[None, :])
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = 1.0 - dist / longest
        return np.where(longest == 0, 1.0, sim)


def _top(sim_row: np.ndarray, positions: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    # positions ascend, so the stable sort breaks score ties by ascending qid
    order = np.argsort(-sim_row, kind="stable")[:k]
    return positions[order], sim_row[order]


def generate_candidates(mention: str, index: EntityIndex, lam: int = 100, sample_id: str = "") -> CandidateSet:
    return generate_candidates_batch([mention], index, lam, [sample_id])[0]


def generate_candidates_batch(mentions: Sequence[str], index: EntityIndex, lam: int = 100,
                              sample_ids: Optional[Sequence[str]] = None) -> list[CandidateSet]:
    """Top-``lam`` entities by name similarity for each mention."""
    if len(index) == 0:
        raise ValueError("entity index is empty")
    sample_ids = sample_ids or [""] * len(mentions)
    sims = index.similarities(mentions)
    all_pos = np.arange(len(index))
    out = []
    for sid, row in zip(sample_ids, sims):
        pos, sc = _top(row, all_pos, lam)
        out.append(CandidateSet(sid, tuple(index.qids[pos]), tuple(float(x) for x in sc)))
    return out


def generate_candidates_typed(mention: str, type_tag: Optional[str], provided: Sequence[str], index: EntityIndex,
                              lam: int = 100, sample_id: str = "") -> CandidateSet:
    """Dataset-provided candidates first, then a fuzzy fill from the mention's type partition.

    Provided ids missing from the index are skipped.  An unknown type falls
    back to a whole-index fill with a warning.
    """
    head = [q for q in dict.fromkeys(provided) if q in index][:lam]
    head_scores = [name_similarity(mention, index.names[index.position(q)]) for q in head]
    if type_tag in index.partitions:
        positions = index.partitions[type_tag]
    else:
        log.warning("unknown type tag %r for sample %r; filling from the whole index", type_tag, sample_id)
        positions = np.arange(len(index))
    taken = {index.position(q) for q in head}
    positions = np.array([p for p in positions if p not in taken], dtype=np.int64)
    room = lam - len(head)
    fill_q: list[str] = []
    fill_s: list[float] = []
    if room > 0 and len(positions):
        row = index.similarities([mention], positions)[0]
        pos, sc = _top(row, positions, room)
        fill_q = list(index.qids[pos])
        fill_s = [float(x) for x in sc]
    return CandidateSet(sample_id, tuple(head) + tuple(fill_q), tuple(head_scores) + tuple(fill_s),
                        n_provided=len(head))


@dataclass(frozen=True)
class RankResult:
    sample_id: str
    ranked: tuple[tuple[str, float], ...]
    gold_rank: Optional[int]  # 1-based; None when the gold is not a candidate

    @property
    def top(self) -> Optional[str]:
        return self.ranked[0][0] if self.ranked else None


def rank(g, qids: Sequence[str], embeddings, gold: Optional[str] = None, sample_id: str = "") -> RankResult:
    """Order candidates by cosine with ``g`` (descending, ties by ascending qid)."""
    if len(qids) == 0:
        return RankResult(sample_id, (), None)
    E = np.asarray(embeddings, dtype=np.float64).reshape(len(qids), -1)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    norms = np.linalg.norm(E, axis=1) * np.linalg.norm(g)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(norms > 0, (E @ g) / norms, 0.0)
    keys = np.array(qids, dtype=object)
    order = sorted(range(len(qids)), key=lambda i: (-cos[i], keys[i]))
    ranked = tuple((str(keys[i]), float(cos[i])) for i in order)
    gold_rank = None
    if gold is not None:
        for r, (q, _) in enumerate(ranked, start=1):
            if q == gold:
                gold_rank = r
                break
    return RankResult(sample_id, ranked, gold_rank)


def topk_accuracy(results: Sequence[RankResult], ks: Iterable[int] = DEFAULT_KS) -> dict[int, float]:
    """Fraction of samples whose gold ranks within the top k; absent golds always miss."""
    if not results:
        raise ValueError("no ranking results to score")
    ranks = np.array([r.gold_rank if r.gold_rank is not None else np.iinfo(np.int64).max for r in results])
    return {k: float(np.count_nonzero(ranks <= k)) / len(ranks) for k in sorted(ks)}


def format_ranking(result: RankResult, names: Mapping[str, str], k: int = 5) -> str:
    """Case-study style listing: one ``<name> <cosine>`` line per candidate."""
    lines = []
    for qid, cos in result.ranked[:k]:
        lines.append(f"{names.get(qid, qid)} {cos:.2f}")
    return "\n".join(lines)
