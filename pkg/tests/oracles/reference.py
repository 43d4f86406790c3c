"""Slow, loop-based restatements used as test oracles.

Nothing here imports the package; every function works on plain Python
numbers or numpy arrays and follows the definitions directly.
"""
import math

import numpy as np


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def name_similarity(a: str, b: str) -> float:
    a, b = a.casefold(), b.casefold()
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein(a, b) / max(len(a), len(b))


def msc(A, B, tau):
    """Mean-shifted contrastive loss by explicit loops over anchors."""
    Z = np.concatenate([np.asarray(A, float), np.asarray(B, float)])
    Z = Z - Z.mean(axis=0)
    Z = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    n = len(Z)
    half = n // 2
    total = 0.0
    for i in range(n):
        partner = i + half if i < half else i - half
        sims = [float(Z[i] @ Z[j]) / tau for j in range(n) if j != i]
        top = max(sims)
        lse = top + math.log(sum(math.exp(s - top) for s in sims))
        total += lse - float(Z[i] @ Z[partner]) / tau
    return total / n


def cross_att(q, X, w_q, w_k, w_v, w_o, heads, mask=None):
    """Single-query multi-head attention, one head at a time."""
    q, X = np.asarray(q, float), np.asarray(X, float)
    rows = [i for i in range(len(X)) if mask is None or mask[i]]
    d = q.shape[0]
    if not rows:
        return np.zeros(d)
    hd = d // heads
    Q, K, V = q @ w_q, X @ w_k, X @ w_v
    out = np.zeros(d)
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        s = np.array([Q[sl] @ K[i, sl] / math.sqrt(hd) for i in rows])
        w = np.exp(s - s.max())
        w /= w.sum()
        out[sl] = sum(w[k] * V[i, sl] for k, i in enumerate(rows))
    return out @ w_o


def cosine(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def topk_bruteforce(scores, gold_cols, ks):
    """T@k from a score matrix: rank of gold = 1 + #strictly better + #tied with smaller column index.

    ``gold_cols[i]`` is None when the gold entity is not among the candidates.
    """
    n = len(scores)
    hits = {k: 0 for k in ks}
    for row, g in zip(scores, gold_cols):
        if g is None:
            continue
        r = 1
        for j, s in enumerate(row):
            if j != g and (s > row[g] or (s == row[g] and j < g)):
                r += 1
        for k in ks:
            hits[k] += r <= k
    return {k: hits[k] / n for k in ks}


def central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (modified in place and restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad
