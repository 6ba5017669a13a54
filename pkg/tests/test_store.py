import numpy as np
import pytest

from headsteer.errors import FormatError, MissingHeadData, NoPairs, ValidationError
from headsteer.store import ActivationStore, extract, read_dump, write_dump
from headsteer.synth import ScmConfig, generate_pairs
from headsteer.toylm import HeadId, HookAction, ModelConfig, forward_with_hooks

from conftest import random_model


def _store(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return ActivationStore(rng.normal(size=(n, 2, 2, 3)), np.tile([1, 0], n // 2),
                           np.tile([1, 0], n // 2), np.repeat(np.arange(n // 2), 2),
                           rng.normal(size=(n, 5)))


def test_dump_roundtrip(tmp_path):
    s = _store()
    write_dump(s, tmp_path / "a.cdtx")
    raw = (tmp_path / "a.cdtx").read_bytes()
    assert raw[:4] == b"CDTX"
    r = read_dump(tmp_path / "a.cdtx")
    np.testing.assert_allclose(r.acts, s.acts.astype(np.float32))
    np.testing.assert_allclose(r.keys, s.keys.astype(np.float32))
    assert np.array_equal(r.labels, s.labels) and np.array_equal(r.pair_ids, s.pair_ids)
    write_dump(r, tmp_path / "b.cdtx")
    assert (tmp_path / "b.cdtx").read_bytes() == raw


def test_dump_format_errors(tmp_path):
    s = _store()
    write_dump(s, tmp_path / "a.cdtx")
    raw = (tmp_path / "a.cdtx").read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "trunc").write_bytes(raw[:-3])
    (tmp_path / "ver").write_bytes(raw[:4] + b"\x09\x00" + raw[6:])
    for name in ("magic", "trunc", "ver"):
        with pytest.raises(FormatError):
            read_dump(tmp_path / name)


def test_store_validation_and_pairs():
    s = _store()
    ids, tox, non = s.pair_index()
    assert list(ids) == [0, 1, 2] and np.all(s.variant[tox] == 1) and np.all(s.variant[non] == 0)
    assert len(s.select_pairs([1])) == 2
    with pytest.raises(MissingHeadData):
        s.head(HeadId(2, 0))
    with pytest.raises(ValidationError):
        ActivationStore(np.zeros((2, 1, 1, 1)), [0], [0, 1], [0, 0], np.zeros((2, 1)))
    with pytest.raises(NoPairs):
        s.subset([0, 2]).pair_index()


def test_extract_matches_direct_capture():
    scm = ScmConfig(n_topics=2, markers_per_topic=2, n_neutral=8, seq_len=8)
    cfg = ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab=scm.vocab, context=16, seed=0)
    m = random_model(cfg, 1)
    pairs = generate_pairs(scm, 5)
    s = extract(m, pairs, prompt_len=6, batch_size=3)
    assert len(s) == 10 and list(s.labels[:2]) == [1, 0]
    _, caps = forward_with_hooks(m, pairs[2].x_minus[:6], [HookAction.capture(HeadId(1, 1))])
    np.testing.assert_allclose(s.head(HeadId(1, 1))[5], caps[HeadId(1, 1)][-1], atol=1e-12)
