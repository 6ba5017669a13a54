import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from headsteer.harness import ExperimentSpec, Testbed, build_testbed, desk_spec
from headsteer.toylm import ModelConfig, ToyLM, load_checkpoint, save_checkpoint

CACHE = Path(os.environ.get("HEADSTEER_TEST_CACHE", Path.home() / ".cache" / "headsteer-tests"))


def random_model(cfg: ModelConfig, seed: int = 0, out_scale: float = 1.0) -> ToyLM:
    """Untrained model with a random (non-zero) unembedding so logits are informative."""
    m = ToyLM(cfg)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        m.W_U.copy_(out_scale * torch.randn(m.W_U.shape, generator=g, dtype=torch.float64))
    m.eval()
    return m


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab=16, context=16, seed=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return random_model(tiny_cfg, seed=1)


def _spec_key(spec: ExperimentSpec) -> str:
    d = spec.to_dict()
    keep = {k: d[k] for k in ("scm", "model", "n_lm_train", "lm_epochs", "lm_lr", "lm_batch", "seed")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


def cached_testbed(spec: ExperimentSpec) -> Testbed:
    """Build the testbed, reusing a trained checkpoint from the on-disk cache when present.

    The checkpoint stores float32 weights, so a cached model is the float32
    rounding of a freshly trained one; every test compares runs on one model.
    """
    CACHE.mkdir(parents=True, exist_ok=True)
    path = CACHE / f"lm-{_spec_key(spec)}.hslm"
    if path.exists():
        return build_testbed(spec, load_checkpoint(path))
    tb = build_testbed(spec)
    save_checkpoint(tb.model, path)
    return build_testbed(spec, load_checkpoint(path))


@pytest.fixture(scope="session")
def desk_testbeds():
    """Lazily built desk-scale testbeds, one per seed, shared across the session."""
    built: dict = {}

    def get(seed: int, **kw) -> Testbed:
        key = (seed, tuple(sorted(kw.items())))
        if key not in built:
            built[key] = cached_testbed(desk_spec(seed, **kw))
        return built[key]

    return get


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, r in sorted(mod.RESULTS.items()):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if r['pass'] else 'FAIL'} - {r['detail']}")
