import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsteer.errors import DegenerateConfig, FormatError, UndefinedConditional, ValidationError
from headsteer.synth import (HeadPatchOracle, ScmConfig, ScmOracle, analytic_entropy, bayes_nll,
                             exact_pns, generate_pairs, marker_counts, planted_heads, read_corpus,
                             sample_corpus, toxicity_oracle, write_corpus)
from headsteer.toylm import HeadId, ModelConfig

from conftest import random_model


def test_single_pair_labels():
    (p,) = generate_pairs(ScmConfig(), 1)
    assert (p.y_plus, p.y_minus) == (1, 0)
    assert p.x_plus[0] == p.x_minus[0]  # same topic token


def test_pairs_differ_only_at_marker_positions():
    cfg = ScmConfig()
    for p in generate_pairs(cfg, 200, seed=4):
        diff = p.x_plus != p.x_minus
        # a differing position is a marker in the toxic variant and neutral in the clean one
        assert np.all(p.x_plus[diff] < cfg.n_markers)
        assert np.all(p.x_minus[diff] >= cfg.n_markers + cfg.n_topics)


def test_marker_frequency_within_three_sigma():
    cfg = ScmConfig()
    pairs = generate_pairs(cfg, 10000, seed=1)
    m, n = marker_counts(cfg, np.stack([p.x_plus for p in pairs]))
    N = n.sum()
    sd = math.sqrt(cfg.rate_toxic * (1 - cfg.rate_toxic) / N)
    assert abs(m.sum() / N - cfg.rate_toxic) < 3 * sd
    m0, n0 = marker_counts(cfg, np.stack([p.x_minus for p in pairs]))
    sd0 = math.sqrt(cfg.rate_clean * (1 - cfg.rate_clean) / n0.sum())
    assert abs(m0.sum() / n0.sum() - cfg.rate_clean) < 3 * sd0


def test_generation_deterministic(tmp_path):
    cfg = ScmConfig(seed=9)
    write_corpus(tmp_path / "a.txt", generate_pairs(cfg, 50))
    write_corpus(tmp_path / "b.txt", generate_pairs(cfg, 50))
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()


def test_degenerate_configs():
    with pytest.raises(DegenerateConfig):
        ScmConfig(n_neutral=0)
    with pytest.raises(DegenerateConfig):
        ScmConfig(markers_per_topic=0)
    with pytest.raises(DegenerateConfig):
        ScmConfig(p_tox=1.0)
    with pytest.raises(ValidationError):
        generate_pairs(ScmConfig(), 0)


def test_token_partitions_disjoint():
    cfg = ScmConfig(shared_markers=2)
    ids = np.concatenate([cfg.marker_ids, cfg.topic_ids, cfg.neutral_ids])
    assert len(set(ids.tolist())) == len(ids) == cfg.vocab


def test_toxicity_oracle_examples():
    cfg = ScmConfig()
    clean = np.concatenate([[cfg.topic_ids[0]], np.full(23, cfg.neutral_ids[0])])
    toxic = np.concatenate([[cfg.topic_ids[0]], np.full(23, cfg.marker_ids[0])])
    assert toxicity_oracle(clean, cfg) < 0.1
    assert toxicity_oracle(toxic, cfg) > 0.9
    assert toxicity_oracle([], cfg) == pytest.approx(cfg.prior())
    assert cfg.prior() == pytest.approx(cfg.p_tox)


def test_toxicity_oracle_matches_independent_bayes():
    cfg = ScmConfig(p_tox=0.3, rate_toxic=0.15, rate_clean=0.05)
    tokens, _, _ = sample_corpus(cfg, 50, seed=3)
    for t in tokens:
        m = int(np.sum(t < cfg.n_markers))
        n = len(t) - 1
        l1 = cfg.p_tox * cfg.rate_toxic ** m * (1 - cfg.rate_toxic) ** (n - m)
        l0 = (1 - cfg.p_tox) * cfg.rate_clean ** m * (1 - cfg.rate_clean) ** (n - m)
        assert toxicity_oracle(t, cfg) == pytest.approx(l1 / (l0 + l1), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 22), st.integers(0, 2**31 - 1))
def test_oracle_monotone_in_marker_count(m, seed):
    cfg = ScmConfig()
    rng = np.random.default_rng(seed)
    t = np.concatenate([[cfg.topic_ids[0]], rng.choice(cfg.neutral_ids, 23)])
    pos = rng.permutation(np.arange(1, 24))
    t1 = t.copy()
    t1[pos[:m]] = cfg.marker_ids[0]
    t2 = t1.copy()
    t2[pos[m]] = cfg.marker_ids[1]
    assert toxicity_oracle(t2, cfg) >= toxicity_oracle(t1, cfg)


def test_swap_flips_labels():
    for p in generate_pairs(ScmConfig(), 20, seed=2):
        s = p.swapped()
        assert (s.y_plus, s.y_minus) == (p.y_minus, p.y_plus)
        assert np.array_equal(s.x_plus, p.x_minus)


def test_bayes_nll_is_a_normalized_predictive():
    # sum over next tokens of exp(-nll) is 1 at every position: check by enumerating all V tokens
    cfg = ScmConfig(n_topics=2, markers_per_topic=2, n_neutral=4, seq_len=4)
    prefix = np.array([cfg.topic_ids[1], cfg.marker_ids[2], cfg.neutral_ids[0]])
    total = 0.0
    for v in np.concatenate([cfg.marker_ids, cfg.neutral_ids]):
        total += math.exp(-bayes_nll(cfg, np.append(prefix, v)[None])[0, -1])
    assert total == pytest.approx(1.0, abs=1e-12)
    assert analytic_entropy(cfg, n=500) > 0


def test_corpus_roundtrip_and_errors(tmp_path):
    cfg = ScmConfig()
    pairs = generate_pairs(cfg, 5)
    samples = sample_corpus(cfg, 4, seed=1)
    write_corpus(tmp_path / "c.txt", pairs, samples)
    got, s = read_corpus(tmp_path / "c.txt")
    assert [p.pair_id for p in got] == [p.pair_id for p in pairs]
    assert all(np.array_equal(a.x_plus, b.x_plus) and np.array_equal(a.x_minus, b.x_minus)
               for a, b in zip(got, pairs))
    assert np.array_equal(s[0], samples[0]) and np.array_equal(s[1], samples[1])
    (tmp_path / "bad.txt").write_text("nope\n")
    with pytest.raises(FormatError):
        read_corpus(tmp_path / "bad.txt")
    lines = (tmp_path / "c.txt").read_text().splitlines()
    (tmp_path / "half.txt").write_text("\n".join(lines[:2]) + "\n")
    with pytest.raises(FormatError):
        read_corpus(tmp_path / "half.txt")


def test_exact_pns_of_planted_bit_is_one():
    est = exact_pns(ScmOracle(ScmConfig(), 2000, "toxicity", seed=0))
    assert est.PNS == 1.0 and est.PN == 1.0 and est.PS == 1.0


def test_exact_pns_of_independent_feature_vanishes():
    est = exact_pns(ScmOracle(ScmConfig(), 10000, "independent", seed=1))
    assert est.PNS < 0.05


@pytest.mark.parametrize("feature,noise", [("toxicity", 0.1), ("independent", 0.0), ("toxicity", 0.3)])
def test_pns_decomposition_identity(feature, noise):
    cfg = ScmConfig(label_noise=noise)
    o = ScmOracle(cfg, 10000, feature, seed=5)
    e = exact_pns(o)
    assert 0 <= e.PNS <= min(e.PN * e.p_zy + e.PS * e.p_not_zy, 1) + 3 / math.sqrt(e.n)
    assert abs(e.PNS - (e.PN * e.p_zy + e.PS * e.p_not_zy)) < 3 / math.sqrt(e.n)


def test_exact_pns_zero_support():
    class Const:
        Z = np.ones(10, dtype=int)
        Y = np.ones(10, dtype=int)

        def outcome(self, z):
            return np.ones(10, dtype=int)

    with pytest.raises(UndefinedConditional):
        exact_pns(Const())


def test_head_patch_oracle_consistency():
    cfg = ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab=16, context=16, seed=0)
    m = random_model(cfg, 2)
    prompts = np.random.default_rng(0).integers(0, 16, size=(300, 6))
    o = HeadPatchOracle(m, prompts, HeadId(1, 0), np.ones(4), marker_ids=[0, 1, 2])
    for z in (0, 1):
        y = o.outcome(z)
        assert np.array_equal(y[o.Z == z], o.Y[o.Z == z])
    e = exact_pns(o)
    assert 0 <= e.PNS <= 1
    assert abs(e.PNS - (e.PN * e.p_zy + e.PS * e.p_not_zy)) < 1e-12 + 3 / math.sqrt(e.n)


def test_planted_heads_rule():
    imp = {HeadId(0, 0): 1.0, HeadId(0, 1): 0.6, HeadId(1, 0): 0.4, HeadId(1, 1): -0.2}
    assert planted_heads(imp) == [HeadId(0, 0), HeadId(0, 1)]
    assert planted_heads(imp, max_heads=1) == [HeadId(0, 0)]
    assert planted_heads({HeadId(0, 0): -1.0}) == []
