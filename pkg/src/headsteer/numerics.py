"""Dense linear-algebra and statistics helpers shared across the package."""
from __future__ import annotations

import hashlib
import logging
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, EmptyInput, RankDeficient, ZeroNorm

log = logging.getLogger(__name__)

RIDGE_COND_LIMIT = 1e10
RIDGE_SCALE = 1e-6


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; the same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def derive_seed(seed: int, *tags: int | str) -> int:
    """Child seed for a named sub-stream (fold, shard, stage...)."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            words.append(int.from_bytes(hashlib.blake2b(t.encode(), digest_size=8).digest(), "little"))
        else:
            words.append(int(t) & 0xFFFFFFFFFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0])


class OlsFit(NamedTuple):
    coefficients: np.ndarray
    sigma2: float
    ridge: float  # 0.0 unless the ridge fallback engaged


def ols_fit(X, y, *, ridge_fallback: bool = True) -> OlsFit:
    """Least squares of ``y`` on the columns of ``X`` (caller supplies the intercept column).

    When cond(XᵀX) exceeds 1e10 a ridge term ``1e-6 * trace(XᵀX) / p`` is added
    to the diagonal. With ``ridge_fallback=False`` that situation raises
    ``RankDeficient`` instead.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"X {X.shape} incompatible with y {y.shape}")
    n, p = X.shape
    if n <= p:
        raise DimensionMismatch(f"need n > p, got n={n}, p={p}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite entries in regression inputs")

    gram = X.T @ X
    cond = np.linalg.cond(gram)
    lam = 0.0
    if not np.isfinite(cond) or cond > RIDGE_COND_LIMIT:
        if not ridge_fallback:
            raise RankDeficient(f"cond(XᵀX) = {cond:.3g}")
        lam = RIDGE_SCALE * np.trace(gram) / p
        if lam == 0.0:
            lam = RIDGE_SCALE
        log.debug("ridge fallback engaged: cond=%.3g lambda=%.3g", cond, lam)
        coef = np.linalg.solve(gram + lam * np.eye(p), X.T @ y)
    else:
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    sigma2 = float(resid @ resid) / (n - p)
    return OlsFit(coef, sigma2, lam)


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    """``exp(τ s) / Σ exp(τ s)`` with max-subtraction."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise EmptyInput("softmax of an empty vector")
    if not np.isfinite(temperature):
        raise ValueError("temperature must be finite")
    a = temperature * s
    a = a - a.max()
    w = np.exp(a)
    return w / w.sum()


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("cosine similarity of a zero vector")
    return float(np.clip((a / na) @ (b / nb), -1.0, 1.0))


def cosine_matrix(queries, keys) -> np.ndarray:
    """Row-wise cosine similarities, shape (n_queries, n_keys)."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    k = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    kn = np.linalg.norm(k, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(kn == 0):
        raise ZeroNorm("cosine similarity of a zero vector")
    return np.clip((q / qn) @ (k / kn).T, -1.0, 1.0)


def spearman(a, b) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)
