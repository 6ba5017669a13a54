import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsteer.errors import EmptyStore, FormatError, IndexTooSmall, KTooLarge, NoPairs, ValidationError
from headsteer.steer import (InterventionConfig, NeighborIndex, apply_intervention, build_index,
                            compute_global, load_bundle, local_vector, mask_heads, save_bundle,
                            shuffle_permutations, shuffled_control, steering_offsets)
from headsteer.store import ActivationStore
from headsteer.synth import ScmConfig, toxicity_oracle
from headsteer.toylm import HeadId, HookAction, ModelConfig, forward_with_hooks, generate, token_nll

from conftest import random_model

H = HeadId(0, 0)


def store_from_diffs(diffs, toxic=None, keys=None):
    """One head (L=H=1); toxic side = ``toxic`` (default 0), non-toxic = toxic + diff."""
    diffs = np.asarray(diffs, dtype=float)
    n, d = diffs.shape
    toxic = np.zeros_like(diffs) if toxic is None else np.asarray(toxic, dtype=float)
    acts = np.empty((2 * n, 1, 1, d))
    acts[0::2, 0, 0] = toxic
    acts[1::2, 0, 0] = toxic + diffs
    keys = np.random.default_rng(0).normal(size=(n, 3)) if keys is None else np.asarray(keys, float)
    return ActivationStore(acts, np.tile([1, 0], n), np.tile([1, 0], n), np.repeat(np.arange(n), 2),
                           np.repeat(keys, 2, axis=0))


def test_hand_built_sigma():
    b = compute_global(store_from_diffs([[1, 0], [3, 0], [2, 0]]), [H])
    hv = b.vectors[H]
    np.testing.assert_array_equal(hv.v_global, [2, 0])
    # projections on (1,0): {1,3,2}; population std = sqrt(((1-2)^2 + (3-2)^2 + 0) / 3)
    assert hv.sigma == pytest.approx(math.sqrt(2 / 3), rel=1e-14)
    assert not hv.degenerate


def test_degenerate_directions(caplog):
    b = compute_global(store_from_diffs([[0.0, 0.0], [0.0, 0.0]]), [H])
    assert b.vectors[H].degenerate and b.vectors[H].sigma == 0.0 and b.active_heads() == []
    b = compute_global(store_from_diffs([[1.0, 2.0], [-1.0, -2.0]]), [H])
    assert b.vectors[H].degenerate
    assert b.vectors[H].sigma == pytest.approx(1.0)  # projections on e0: {1, -1}
    with pytest.raises(NoPairs):
        compute_global(store_from_diffs([[1.0, 0.0]]), [H])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_global_is_mean_of_cache(seed):
    rng = np.random.default_rng(seed)
    b = compute_global(store_from_diffs(rng.normal(size=(7, 3)), rng.normal(size=(7, 3))), [H])
    hv = b.vectors[H]
    assert np.array_equal(hv.v_global, hv.diffs.mean(axis=0))
    assert hv.sigma >= 0


def brute_force(keys, ids, q, k):
    c = keys.mean(0)
    K, qq = keys - c, q - c
    sims = K @ qq / (np.linalg.norm(K, axis=1) * np.linalg.norm(qq))
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))[:k]
    return ids[order], sims[order]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_index_matches_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    st_ = store_from_diffs(rng.normal(size=(12, 2)), keys=rng.normal(size=(12, 4)))
    idx = build_index(st_)
    q = rng.normal(size=4)
    ids, sims = idx.query(q, k)
    bid, bs = brute_force(idx.keys, idx.ids, q, k)
    assert np.array_equal(ids[0], bid)
    np.testing.assert_allclose(sims[0], bs, atol=1e-12)


def test_index_examples():
    rng = np.random.default_rng(1)
    centers = np.array([[5.0, 0, 0], [0, 5.0, 0], [0, 0, 5.0]])
    keys = np.concatenate([c + 0.3 * rng.normal(size=(6, 3)) for c in centers])
    idx = build_index(store_from_diffs(rng.normal(size=(18, 2)), keys=keys))
    ids, sims = idx.query(keys[4], 6)
    assert ids[0, 0] == 4 and sims[0, 0] == pytest.approx(1.0)
    assert set(ids[0].tolist()) == set(range(6))  # intra-cluster first
    all_ids, _ = idx.query(keys[0], 18)
    assert sorted(all_ids[0].tolist()) == list(range(18))
    with pytest.raises(IndexTooSmall):
        idx.query(keys[0], 19)
    empty = ActivationStore(np.zeros((0, 1, 1, 2)), [], [], [], np.zeros((0, 3)))
    with pytest.raises(EmptyStore):
        build_index(empty)


@pytest.fixture
def local_setup():
    rng = np.random.default_rng(2)
    st_ = store_from_diffs(rng.normal(size=(20, 3)) + [1, 0, 0], rng.normal(size=(20, 3)),
                           keys=rng.normal(size=(20, 4)))
    return st_, compute_global(st_, [H]), build_index(st_), rng.normal(size=4)


def test_local_vector_endpoints(local_setup):
    st_, b, idx, q = local_setup
    hv = b.vectors[H]
    v = local_vector(q, idx, b, H, InterventionConfig(lam=1.0, top_k=5))
    assert np.array_equal(v, hv.v_global)
    ids, _ = idx.query(q, 1)
    v = local_vector(q, idx, b, H, InterventionConfig(lam=0.0, top_k=1))
    np.testing.assert_array_equal(v, hv.diffs[ids[0, 0]])
    ids, _ = idx.query(q, 6)
    v = local_vector(q, idx, b, H, InterventionConfig(lam=0.0, top_k=6, tau=0.0))
    np.testing.assert_allclose(v, hv.diffs[ids[0]].mean(0), atol=1e-14)


def test_local_vector_weights_are_softmax(local_setup):
    st_, b, idx, q = local_setup
    ids, sims = idx.query(q, 4)
    w = np.exp(3.0 * sims[0])
    w /= w.sum()
    ref = 0.7 * (w @ b.vectors[H].diffs[ids[0]]) + 0.3 * b.vectors[H].v_global
    np.testing.assert_allclose(local_vector(q, idx, b, H, InterventionConfig(lam=0.3, tau=3.0, top_k=4)),
                               ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_local_vector_lipschitz_in_lambda(l1, l2):
    rng = np.random.default_rng(3)
    st_ = store_from_diffs(rng.normal(size=(10, 3)), keys=rng.normal(size=(10, 4)))
    b, idx, q = compute_global(st_, [H]), build_index(st_), rng.normal(size=4)
    v1 = local_vector(q, idx, b, H, InterventionConfig(lam=l1, top_k=5))
    v2 = local_vector(q, idx, b, H, InterventionConfig(lam=l2, top_k=5))
    vl = local_vector(q, idx, b, H, InterventionConfig(lam=0.0, top_k=5))
    bound = abs(l1 - l2) * (np.linalg.norm(vl) + np.linalg.norm(b.vectors[H].v_global))
    assert np.linalg.norm(v1 - v2) <= bound + 1e-12


def test_shuffle_control(local_setup):
    st_, b, idx, q = local_setup
    cfg = InterventionConfig(lam=0.0, top_k=8, tau=5.0)
    ident = local_vector(q, idx, b, H, cfg, permutation=np.arange(8))
    # independent oracle: explicit loop over the permuted pairs
    ids, sims = idx.query(q, 8)
    w = np.exp(5.0 * sims[0] - (5.0 * sims[0]).max())
    w /= w.sum()
    hv, perm = b.vectors[H], shuffle_permutations(1, 8, 4)[0]
    rows = ids[0]
    ref = sum(w[j] * (hv.diffs[rows[perm[j]]] + hv.toxic[rows[perm[j]]] - hv.toxic[rows[j]]) for j in range(8))
    np.testing.assert_allclose(shuffled_control(b, idx, cfg, seed=4)(q, H, 0), ref, atol=1e-12)
    assert np.array_equal(ident, local_vector(q, idx, b, H, cfg))
    f = shuffled_control(b, idx, cfg, seed=4)
    assert np.linalg.norm(f(q, H, 0) - local_vector(q, idx, b, H, cfg)) > 0
    cfg0 = InterventionConfig(lam=0.0, top_k=8, tau=0.0)
    f0 = shuffled_control(b, idx, cfg0, seed=4)
    for qno in range(5):
        assert np.array_equal(f0(q, H, qno), local_vector(q, idx, b, H, cfg0))  # bit-equal
    p = shuffle_permutations(3, 8, 7)
    assert np.array_equal(p[2], shuffle_permutations(5, 8, 7)[2])


def test_config_validation():
    with pytest.raises(ValidationError):
        InterventionConfig(alpha=-1)
    with pytest.raises(ValidationError):
        InterventionConfig(lam=1.5)
    with pytest.raises(ValidationError):
        InterventionConfig(mode="local", top_k=0)


# -- interventions on a model ---------------------------------------------------------


@pytest.fixture
def model_setup():
    cfg = ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab=16, context=32, seed=0)
    m = random_model(cfg, 5)
    rng = np.random.default_rng(6)
    acts = rng.normal(size=(40, 2, 2, 4))
    acts[1::2] += 0.5
    st_ = ActivationStore(acts, np.tile([1, 0], 20), np.tile([1, 0], 20), np.repeat(np.arange(20), 2),
                          rng.normal(size=(40, 8)))
    b = compute_global(st_, [HeadId(0, 1), HeadId(1, 0)])
    return m, b, build_index(st_), rng.integers(0, 16, size=(4, 6))


def test_alpha_zero_and_empty_headset_equal_base(model_setup):
    m, b, idx, P = model_setup
    base = generate(m, P, 5, seed=1, decode="sampled")
    out = apply_intervention(m, b, InterventionConfig(alpha=0.0), P, 5, seed=1)
    assert np.array_equal(out, base)
    empty = type(b)([], {}, b.pair_ids)
    assert np.array_equal(apply_intervention(m, empty, InterventionConfig(), P, 5, seed=1), base)
    steered = apply_intervention(m, b, InterventionConfig(alpha=50.0), P, 5, seed=1)
    assert not np.array_equal(steered, base)


def test_local_lambda_one_equals_global(model_setup):
    m, b, idx, P = model_setup
    key = lambda model, prompts: np.random.default_rng(0).normal(size=(len(prompts), 8))
    g = apply_intervention(m, b, InterventionConfig(alpha=3.0), P, 5, seed=2)
    l = apply_intervention(m, b, InterventionConfig(alpha=3.0, mode="local", lam=1.0, top_k=5), P, 5,
                           seed=2, index=idx, key_fn=key)
    assert np.array_equal(g, l)


def test_offsets_formula(model_setup):
    m, b, idx, P = model_setup
    offs = steering_offsets(b, InterventionConfig(alpha=2.0), P)
    for h, o in offs.items():
        hv = b.vectors[h]
        np.testing.assert_allclose(o, np.tile(2.0 * hv.sigma * hv.v_global, (len(P), 1)))


def _tox(cont):
    return (np.asarray(cont) < 3).mean(-1)


def test_mask_heads(model_setup):
    m, b, idx, P = model_setup
    ranking = m.cfg.all_heads()
    base = generate(m, P, 5, seed=3, decode="sampled")
    tox0, ppl0 = mask_heads(m, ranking, 0, P, 5, _tox, seed=3)
    assert tox0 == pytest.approx(float(_tox(base[:, 6:]).mean()))
    nll = token_nll(m, base)[:, 5:]
    assert ppl0 == pytest.approx(math.exp(nll.mean()))
    # M = all heads: generation equals greedy/sampled decode with every head zeroed
    full = generate(m, P, 5, [HookAction.zero(h) for h in ranking], seed=3, decode="sampled")
    toxA, _ = mask_heads(m, ranking, len(ranking), P, 5, _tox, seed=3)
    assert toxA == pytest.approx(float(_tox(full[:, 6:]).mean()))
    with pytest.raises(KTooLarge):
        mask_heads(m, ranking, 9, P, 5, _tox)
    r2 = list(reversed(ranking))
    assert set(ranking[:2]) != set(r2[:2])


def test_bundle_roundtrip(tmp_path, model_setup):
    _, b, _, _ = model_setup
    save_bundle(b, tmp_path / "b.hssb")
    r = load_bundle(tmp_path / "b.hssb")
    assert r.heads == b.heads and np.array_equal(r.pair_ids, b.pair_ids)
    for h in b.heads:
        assert np.array_equal(r.vectors[h].v_global, b.vectors[h].v_global)
        assert r.vectors[h].sigma == b.vectors[h].sigma
        np.testing.assert_allclose(r.vectors[h].diffs, b.vectors[h].diffs, rtol=1e-6, atol=1e-6)
    raw = (tmp_path / "b.hssb").read_bytes()
    (tmp_path / "t.hssb").write_bytes(raw[:-10])
    (tmp_path / "m.hssb").write_bytes(b"ABCD" + raw[4:])
    for name in ("t.hssb", "m.hssb"):
        with pytest.raises(FormatError):
            load_bundle(tmp_path / name)
