import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsteer.confounder import fit_factor_model
from headsteer.errors import DimensionMismatch, InsufficientSamples, KTooLarge
from headsteer.pns import (HeadScoreTable, OutcomeModel, fit_outcome, make_folds, pns_lower_bound,
                           probe_baseline, random_heads, score_all_heads, select_heads)
from headsteer.store import ActivationStore
from headsteer.toylm import HeadId


def naive_bound(Z, C, m):
    n, d = Z.shape
    dc = C.shape[1]
    Ez = [sum(Z[i][j] for i in range(n)) / n for j in range(d)]
    Ec = [sum(C[i][k] for i in range(n)) / n for k in range(dc)]
    total = 0.0
    for i in range(n):
        a = 0.0
        for j in range(d):
            a += m.beta[j] * (Z[i][j] - Ez[j])
        b = 0.0
        for k in range(dc):
            b += m.gamma[k] * (C[i][k] - Ec[k])
        total += a * a + 2 * a * b
    return total / (2 * m.sigma2)


def _rand_instance(seed, n=50, d=4, dc=2):
    rng = np.random.default_rng(seed)
    Z, C = rng.normal(size=(n, d)) * rng.uniform(0.5, 3), rng.normal(size=(n, dc))
    m = OutcomeModel(rng.normal(), rng.normal(size=d), rng.normal(size=dc), rng.uniform(0.1, 2))
    return Z, C, m


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bound_matches_naive_loop(seed):
    Z, C, m = _rand_instance(seed)
    ref = naive_bound(Z, C, m)
    assert pns_lower_bound(Z, C, m) == pytest.approx(ref, rel=1e-10, abs=1e-12)


def test_bound_examples():
    Z, C, m = _rand_instance(0)
    m0 = OutcomeModel(0.0, np.zeros(4), m.gamma, 1.0)
    assert pns_lower_bound(Z, C, m0) == 0.0
    mg = OutcomeModel(0.0, m.beta, np.zeros(2), 0.5)
    Zt = Z - Z.mean(0)
    assert pns_lower_bound(Z, C, mg) == pytest.approx(np.sum((Zt @ m.beta) ** 2), rel=1e-12)
    with pytest.raises(DimensionMismatch):
        pns_lower_bound(Z[:, :3], C, m)


def test_bound_permutation_and_duplication():
    Z, C, m = _rand_instance(1)
    s = pns_lower_bound(Z, C, m)
    p = np.random.default_rng(0).permutation(len(Z))
    assert pns_lower_bound(Z[p], C[p], m) == pytest.approx(s, rel=1e-10)
    assert pns_lower_bound(np.vstack([Z, Z]), np.vstack([C, C]), m) == pytest.approx(2 * s, rel=1e-10)


def test_fit_outcome_recovery_and_null():
    rng = np.random.default_rng(2)
    Z, C = rng.normal(size=(4000, 3)), rng.normal(size=(4000, 2))
    y = 0.5 + Z @ [1.0, -0.5, 0.2] + C @ [0.3, 0.7] + 0.1 * rng.normal(size=4000)
    m = fit_outcome(Z, C, y)
    np.testing.assert_allclose(m.beta, [1.0, -0.5, 0.2], atol=0.01)
    np.testing.assert_allclose(m.gamma, [0.3, 0.7], atol=0.01)
    Z, C = rng.normal(size=(2000, 3)), rng.normal(size=(2000, 2))
    y = rng.integers(0, 2, 2000).astype(float)
    m = fit_outcome(Z, C, y)
    assert np.max(np.abs(m.beta)) < 0.1
    assert m.sigma2 == pytest.approx(y.var(), rel=0.02)
    with pytest.raises(InsufficientSamples):
        fit_outcome(Z[:5], C[:5], y[:5])


def test_fit_outcome_zero_columns_use_ridge():
    rng = np.random.default_rng(3)
    C = rng.normal(size=(300, 2))
    y = C @ [1.0, -2.0] + 0.05 * rng.normal(size=300)
    m = fit_outcome(np.zeros((300, 3)), C, y)
    assert m.ridge > 0
    np.testing.assert_allclose(m.beta, 0, atol=1e-8)
    np.testing.assert_allclose(m.gamma, [1.0, -2.0], atol=0.02)


def test_head_scale_invariance():
    rng = np.random.default_rng(4)
    Z, C = rng.normal(size=(300, 4)), rng.normal(size=(300, 2))
    y = (Z[:, 0] + C[:, 0] + rng.normal(size=300) > 0).astype(float)
    s = pns_lower_bound(Z, C, fit_outcome(Z, C, y))
    s3 = pns_lower_bound(3.7 * Z, C, fit_outcome(3.7 * Z, C, y))
    assert s3 == pytest.approx(s, rel=1e-6)


def _toy_store(n_pairs=200, seed=0, dup=False):
    rng = np.random.default_rng(seed)
    n = 2 * n_pairs
    labels = np.tile([1, 0], n_pairs)
    acts = rng.normal(size=(n, 2, 2, 3))
    acts[:, 1, 0, 0] += 1.5 * labels  # one informative head
    if dup:
        acts[:, 0, 1] = acts[:, 1, 0]
    return ActivationStore(acts, labels, labels.copy(), np.repeat(np.arange(n_pairs), 2),
                           rng.normal(size=(n, 2)))


def test_score_all_heads_layout_and_duplicates():
    st_ = _toy_store(dup=True)
    folds = make_folds(st_.pair_ids, 2, seed=0)
    fm = fit_factor_model(st_.concat(), 2)
    t = score_all_heads(st_, fm, folds)
    assert len(t.heads) == 8 and sorted(set(t.folds)) == [0, 1]
    ms = t.mean_scores()
    assert ms[HeadId(0, 1)] == pytest.approx(ms[HeadId(1, 0)], rel=1e-12)
    assert t.ranking()[0] in (HeadId(0, 1), HeadId(1, 0))
    p = np.random.default_rng(1).permutation(len(st_))
    t2 = score_all_heads(st_.subset(p), fm, folds)
    np.testing.assert_allclose(t2.scores, t.scores, rtol=1e-10)


def test_select_heads_and_ties():
    hs = [HeadId(0, 0), HeadId(0, 1), HeadId(1, 0), HeadId(1, 1)]
    t = HeadScoreTable(hs, [0] * 4, np.array([1.0, 3.0, 3.0, 2.0]), np.ones(4))
    assert select_heads(t, 1).heads == [HeadId(0, 1)]
    assert select_heads(t, 4).heads == [HeadId(0, 1), HeadId(1, 0), HeadId(1, 1), HeadId(0, 0)]
    with pytest.raises(KTooLarge):
        select_heads(t, 5)
    # perturbations below half the minimum gap (1.0 between distinct values) keep the selection
    t2 = HeadScoreTable(hs, [0] * 4, t.scores + np.array([0.4, -0.1, 0.2, -0.3]), np.ones(4))
    assert set(select_heads(t2, 2).heads) == set(select_heads(t, 2).heads)
    r = random_heads(hs, 2, seed=3)
    assert r.heads == random_heads(hs, 2, seed=3).heads and len(set(r.heads)) == 2


def test_table_serialization():
    hs = [HeadId(0, 0), HeadId(1, 1)]
    t = HeadScoreTable(hs, [0, 1], np.array([0.1, 2.5]), np.array([10.0, 10.0]))
    back = HeadScoreTable.from_json(t.to_json())
    assert back.heads == hs and np.array_equal(back.scores, t.scores)
    lines = t.to_csv().splitlines()
    assert lines[0] == "layer,head,fold,score,score_per_sample"
    assert lines[2].startswith("1,1,1,2.5,0.25")
    assert json.loads(t.to_json())["method"] == "pns"


def test_folds_partition_pairs():
    folds = make_folds(np.repeat(np.arange(11), 2), 2, seed=5)
    assert sorted(np.concatenate(folds).tolist()) == list(range(11))
    assert abs(len(folds[0]) - len(folds[1])) <= 1


def test_probe_examples():
    st_ = _toy_store(1000)
    st_.acts[:, 0, 0, 0] = np.where(st_.labels == 1, 5.0, -5.0)  # separable head
    folds = make_folds(st_.pair_ids, 2)
    t = probe_baseline(st_, folds, seed=0)
    ms = t.mean_scores()
    assert ms[HeadId(0, 0)] == 1.0
    shuffled = ActivationStore(st_.acts, np.random.default_rng(9).permutation(st_.labels),
                               st_.variant, st_.pair_ids, st_.keys)
    ms2 = probe_baseline(shuffled, folds, seed=0).mean_scores()
    assert all(abs(v - 0.5) < 0.05 for v in ms2.values())
    t2 = probe_baseline(st_, folds, seed=0)
    assert np.array_equal(t.scores, t2.scores)
