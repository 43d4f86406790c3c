import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mmel.fusion import FusionOutput
from mmel.objectives import (
    LossConfig,
    batch_triplet_loss,
    coarse_loss,
    fine_loss,
    msc_loss,
    sample_negatives,
    total_loss,
    triplet_from_similarities,
    triplet_loss,
)
from oracles import reference as ref

T = torch.float64


def t(x):
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=T)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(2, 7), st.floats(0.05, 2.0), st.integers(0, 2**31))
def test_msc_matches_loop_oracle(B, d, tau, seed):
    rng = np.random.default_rng(seed)
    A, Bm = rng.standard_normal((B, d)), rng.standard_normal((B, d))
    got = msc_loss(t(A), t(Bm), tau).item()
    assert abs(got - ref.msc(A, Bm, tau)) < 1e-9
    assert got >= 0


def test_msc_permutation_and_rotation_invariance():
    rng = np.random.default_rng(0)
    A, Bm = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    base = msc_loss(t(A), t(Bm), 0.1).item()
    perm = rng.permutation(5)
    assert abs(msc_loss(t(A[perm]), t(Bm[perm]), 0.1).item() - base) < 1e-12
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert abs(msc_loss(t(A @ Q), t(Bm @ Q), 0.1).item() - base) < 1e-10


def test_msc_decreases_as_positive_similarity_grows():
    # rotate b1 towards a1 inside a fixed configuration whose mean stays zero
    values = []
    for angle in np.linspace(math.pi / 2, 0.1, 6):
        b1 = [math.cos(angle), math.sin(angle)]
        A = [[1.0, 0.0], [-1.0, 0.0]]
        Bm = [b1, [-b1[0], -b1[1]]]
        values.append(msc_loss(t(A), t(Bm), 0.5).item())
    assert all(x > y for x, y in zip(values, values[1:]))


def test_msc_degenerate_rows_stay_finite():
    A = t(np.ones((3, 4)))
    loss = msc_loss(A, A.clone(), 0.1)
    assert torch.isfinite(loss)
    with pytest.raises(ValueError):
        msc_loss(t(np.ones((1, 4))), t(np.ones((1, 4))), 0.1)


def output(m_t, m_v, face_rows=None, object_rows=None):
    z = t(np.zeros_like(np.asarray(m_t)))
    d = z.shape[1]
    return FusionOutput(z, t(m_t), t(m_v), z, z, z, z,
                        t(face_rows) if face_rows is not None else torch.zeros(0, d, dtype=T),
                        t(object_rows) if object_rows is not None else torch.zeros(0, d, dtype=T))


def test_coarse_is_msc_of_enhanced_pair():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    assert abs(coarse_loss(output(a, b), 0.1).item() - ref.msc(a, b, 0.1)) < 1e-9
    with pytest.raises(ValueError):
        coarse_loss(output(a[:1], b[:1]), 0.1)


def test_fine_loss_pooling_and_skip():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((3, 4))
    assert fine_loss(output(a, a), 0.1).item() == 0.0
    f, o = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    assert abs(fine_loss(output(a, a, f, o), 0.1).item() - ref.msc(f, o, 0.1)) < 1e-9
    assert fine_loss(output(a, a, f[:1], o[:1]), 0.1).item() == 0.0


def test_triplet_hand_cases():
    assert triplet_from_similarities(0.9, [0.2], 0.5).item() == 0.0
    assert abs(triplet_from_similarities(0.3, [0.4], 0.5).item() - 0.6) < 1e-12
    assert triplet_from_similarities(0.37, [0.37], 0.5).item() == 0.5
    with pytest.raises(ValueError):
        triplet_from_similarities(0.3, [], 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(2, 6), st.floats(0, 1), st.integers(0, 2**31))
def test_triplet_vectors_match_cosine_oracle(k, d, margin, seed):
    rng = np.random.default_rng(seed)
    g, pos, negs = rng.standard_normal(d), rng.standard_normal(d), rng.standard_normal((k, d))
    want = np.mean([max(ref.cosine(g, n) - ref.cosine(g, pos) + margin, 0.0) for n in negs])
    assert abs(triplet_loss(t(g), t(pos), t(negs), margin).item() - want) < 1e-12


def test_triplet_zero_when_all_negatives_clear_margin():
    g = t([1.0, 0.0])
    assert triplet_loss(g, g, t([[0.2, 1.0], [-1.0, 0.0]]), 0.5).item() == 0.0


def test_batch_triplet_averages_real_negatives():
    rng = np.random.default_rng(4)
    g, pos, negs = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 2, 4))
    mask = torch.tensor([[True, True], [True, False], [False, False]])
    want = np.mean([triplet_loss(t(g[0]), t(pos[0]), t(negs[0]), 0.5).item(),
                    triplet_loss(t(g[1]), t(pos[1]), t(negs[1, :1]), 0.5).item()])
    assert abs(batch_triplet_loss(t(g), t(pos), t(negs), mask, 0.5).item() - want) < 1e-12


def test_total_loss_linear():
    cfg = LossConfig(alpha=1.0, beta=10.0)
    assert total_loss(1.0, 2.0, 3.0, cfg) == 33.0
    assert total_loss(1.5, 2.0, 3.0, LossConfig(alpha=0.0, beta=0.0)) == 1.5


def test_defaults():
    cfg = LossConfig()
    assert (cfg.tau, cfg.alpha, cfg.beta, cfg.margin, cfg.n_hard, cfg.n_inbatch) == (0.1, 1.0, 10.0, 0.5, 4, 1)
    with pytest.raises(ValueError):
        LossConfig(tau=0)


def test_negative_sampling():
    cfg = LossConfig(n_hard=2, n_inbatch=1)
    only_gold = sample_negatives("Q1", ["Q1"], [], cfg, np.random.default_rng(0))
    assert only_gold.hard == () and only_gold.inbatch == ()
    cands = ["Q1", "Q2", "Q3", "Q4", "Q5"]
    a = sample_negatives("Q1", cands, ["Q7", "Q1", "Q8"], cfg, np.random.default_rng(9))
    b = sample_negatives("Q1", cands, ["Q7", "Q1", "Q8"], cfg, np.random.default_rng(9))
    assert a == b
    assert len(a.hard) == 2 and set(a.hard) <= {"Q2", "Q3", "Q4", "Q5"}
    assert len(a.inbatch) == 1 and a.inbatch[0] in {"Q7", "Q8"}
    assert "Q1" not in a.all
