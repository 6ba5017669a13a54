"""Steering vectors, neighbor retrieval, interventions, masking and the shuffle control."""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyStore,
    FormatError,
    IndexTooSmall,
    KTooLarge,
    NoPairs,
    ValidationError,
)
from .numerics import cosine_matrix, derive_seed, make_rng, softmax
from .pns import HeadScoreTable, HeadSet
from .store import ActivationStore
from .toylm import HeadId, HookAction, ToyLM, final_hidden_mean, generate, token_nll

log = logging.getLogger(__name__)

BUNDLE_MAGIC = b"HSSB"
BUNDLE_VERSION = 1


@dataclass(frozen=True)
class InterventionConfig:
    K: int = 4
    alpha: float = 5.0
    tau: float = 10.0
    lam: float = 0.25
    top_k: int = 256
    mode: str = "global"  # global | local | mask | shuffled
    M: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValidationError("lambda must lie in [0, 1]")
        if self.mode in ("local", "shuffled") and self.top_k < 1:
            raise ValidationError("top_k must be >= 1 for local modes")
        if self.mode not in ("global", "local", "mask", "shuffled"):
            raise ValidationError(f"unknown mode {self.mode!r}")


@dataclass
class HeadVector:
    v_global: np.ndarray  # (d,)
    sigma: float
    diffs: np.ndarray  # (n_pairs, d), row order = SteeringBundle.pair_ids
    toxic: np.ndarray  # (n_pairs, d) toxic-side activations
    degenerate: bool = False


@dataclass
class SteeringBundle:
    heads: list[HeadId]
    vectors: dict[HeadId, HeadVector]
    pair_ids: np.ndarray

    def active_heads(self) -> list[HeadId]:
        return [h for h in self.heads if not self.vectors[h].degenerate]


def compute_global(store: ActivationStore, heads: Sequence[HeadId] | HeadSet) -> SteeringBundle:
    """Mean non-toxic minus toxic difference per head, plus its spread along that direction.

    ``sigma`` is the population standard deviation of the per-pair differences
    projected on the unit global direction. A head whose mean difference is
    exactly zero is flagged degenerate (sigma is then measured on the first
    coordinate axis and the head is never steered).
    """
    pids, tox, non = store.pair_index()
    if len(pids) < 2:
        raise NoPairs("need at least two pairs")
    vectors = {}
    for h in heads:
        A = store.head(h)
        D = A[non] - A[tox]
        v = D.mean(axis=0)
        norm = np.linalg.norm(v)
        degenerate = norm == 0.0
        if degenerate:
            axis = np.zeros_like(v)
            axis[0] = 1.0
            log.warning("head %s has a zero mean difference; flagged and skipped", h)
        else:
            axis = v / norm
        vectors[h] = HeadVector(v, float(np.std(D @ axis)), D, A[tox].copy(), degenerate)
    return SteeringBundle(list(heads), vectors, pids)


# -- retrieval -------------------------------------------------------------------------


@dataclass
class NeighborIndex:
    """Exact cosine-similarity index over per-pair retrieval keys.

    With ``center=True`` the stored keys' mean is subtracted from keys and
    queries before comparison.
    """

    keys: np.ndarray
    ids: np.ndarray
    center: np.ndarray

    def __len__(self):
        return len(self.ids)

    def _prep(self, q):
        return np.atleast_2d(np.asarray(q, dtype=np.float64)) - self.center

    def query(self, q, top_k: int):
        """Top-k (ids, similarities) per query row, ordered by similarity desc then id asc."""
        if top_k > len(self):
            raise IndexTooSmall(f"top_k={top_k} exceeds index size {len(self)}")
        sims = cosine_matrix(self._prep(q), self.keys - self.center)
        ids_out, sims_out = [], []
        for row in sims:
            order = np.lexsort((self.ids, -row))[:top_k]
            ids_out.append(self.ids[order])
            sims_out.append(row[order])
        return np.array(ids_out), np.array(sims_out)


def build_index(store: ActivationStore, center: bool = True) -> NeighborIndex:
    """Index keyed by the toxic-side retrieval key of each pair."""
    if len(store) == 0:
        raise EmptyStore("cannot index an empty store")
    pids, tox, _ = store.pair_index()
    keys = np.asarray(store.keys[tox], dtype=np.float64)
    if not np.all(np.isfinite(keys)):
        raise ValidationError("non-finite retrieval keys")
    c = keys.mean(0) if center else np.zeros(keys.shape[1])
    return NeighborIndex(keys, pids, c)


def _rows_for(bundle: SteeringBundle, ids) -> np.ndarray:
    lookup = {int(p): i for i, p in enumerate(bundle.pair_ids)}
    return np.vectorize(lambda p: lookup[int(p)], otypes=[np.int64])(np.asarray(ids))


@dataclass
class Neighbors:
    """Retrieved bundle rows and softmax weights for a batch of queries, shape (B, top_k)."""

    rows: np.ndarray
    weights: np.ndarray
    perms: np.ndarray | None = None  # (B, top_k) non-toxic side permutation, shuffle control only


def retrieve(keys, index: NeighborIndex, bundle: SteeringBundle, cfg: InterventionConfig) -> Neighbors:
    ids, sims = index.query(keys, cfg.top_k)
    w = np.stack([softmax(s, cfg.tau) for s in sims])
    return Neighbors(_rows_for(bundle, ids), w)


def _mix(nb: Neighbors, hv: HeadVector, lam: float) -> np.ndarray:
    v_local = np.einsum("bk,bkd->bd", nb.weights, hv.diffs[nb.rows])
    if nb.perms is not None:
        # sum_j w_j (nt_perm(j) - t_j) = sum_j w_j d_j + sum_i (w'_i - w_i) nt_i with w'_perm(j) = w_j;
        # the correction is computed so that it vanishes exactly under uniform weights
        non = hv.diffs[nb.rows] + hv.toxic[nb.rows]
        w_perm = np.empty_like(nb.weights)
        np.put_along_axis(w_perm, np.broadcast_to(nb.perms, nb.weights.shape), nb.weights, axis=1)
        v_local = v_local + (np.einsum("bk,bkd->bd", w_perm, non) - np.einsum("bk,bkd->bd", nb.weights, non))
    return (1.0 - lam) * v_local + lam * hv.v_global


def local_vector(query_key, index: NeighborIndex, bundle: SteeringBundle, head: HeadId,
                 cfg: InterventionConfig, permutation: np.ndarray | None = None) -> np.ndarray:
    """Similarity-weighted mean of neighbor differences, shrunk toward the global vector.

    ``permutation`` (length top_k) reassigns the non-toxic side among the
    retrieved pairs before weighting; it is how the shuffle control is built.
    """
    nb = retrieve(query_key, index, bundle, cfg)
    if permutation is not None:
        nb.perms = np.asarray(permutation, dtype=np.int64)[None, :]
    return _mix(nb, bundle.vectors[head], cfg.lam)[0]


def shuffle_permutations(n_queries: int, top_k: int, seed: int) -> np.ndarray:
    """One permutation of the retrieved set per query; query q's depends only on (seed, q)."""
    return np.stack([make_rng(derive_seed(seed, q)).permutation(top_k) for q in range(n_queries)])


def shuffled_control(bundle: SteeringBundle, index: NeighborIndex, cfg: InterventionConfig,
                     seed: int):
    """Per-query vector function with the non-toxic side permuted inside the neighbor set.

    Returns ``f(query_key, head, query_no) -> v_mix``. The permutation for each
    query is drawn from ``seed`` and the query number and is shared by all
    heads; toxic-side pairing and similarity weights are untouched.
    """

    def vector(query_key, head: HeadId, qno: int = 0) -> np.ndarray:
        perm = shuffle_permutations(qno + 1, cfg.top_k, seed)[qno]
        return local_vector(query_key, index, bundle, head, cfg, perm)

    return vector


# -- interventions ------------------------------------------------------------------


def steering_offsets(bundle: SteeringBundle, cfg: InterventionConfig, prompts: np.ndarray,
                     model: ToyLM | None = None, index: NeighborIndex | None = None,
                     key_fn: Callable | None = None, shuffle_seed: int | None = None,
                     heads: Sequence[HeadId] | None = None) -> dict[HeadId, np.ndarray]:
    """Per-head offsets ``alpha * sigma * v`` of shape (B, d) for a batch of prompts.

    Local modes retrieve neighbors once per prompt and reuse them for every head.
    """
    heads = [h for h in (bundle.heads if heads is None else heads) if not bundle.vectors[h].degenerate]
    B = len(prompts)
    out = {}
    if cfg.mode == "global":
        for h in heads:
            hv = bundle.vectors[h]
            out[h] = np.tile(cfg.alpha * hv.sigma * hv.v_global, (B, 1))
        return out
    if cfg.mode not in ("local", "shuffled"):
        raise ValidationError(f"mode {cfg.mode!r} does not steer")
    if index is None:
        raise ValidationError("local steering needs a neighbor index")
    if not heads:
        return out
    keys = np.asarray((key_fn or final_hidden_mean)(model, prompts))
    nb = retrieve(keys, index, bundle, cfg)
    if cfg.mode == "shuffled":
        nb.perms = shuffle_permutations(B, cfg.top_k, 0 if shuffle_seed is None else shuffle_seed)
    for h in heads:
        hv = bundle.vectors[h]
        out[h] = cfg.alpha * hv.sigma * _mix(nb, hv, cfg.lam)
    return out


def intervention_hooks(offsets: dict[HeadId, np.ndarray], start: int) -> list[HookAction]:
    return [HookAction.add(h, off, positions=start) for h, off in offsets.items()]


def apply_intervention(model: ToyLM, bundle: SteeringBundle, cfg: InterventionConfig, prompt,
                       max_new: int, seed: int = 0, decode: str = "sampled",
                       index: NeighborIndex | None = None, key_fn: Callable | None = None,
                       shuffle_seed: int | None = None):
    """Generate with steering offsets on every position that emits a new token.

    Offsets are computed once per prompt (local retrieval happens per input,
    not per generated token) and added from the last prompt position onward.
    """
    single = np.ndim(prompt) == 1
    prompts = np.atleast_2d(np.asarray(prompt))
    offsets = steering_offsets(bundle, cfg, prompts, model, index, key_fn, shuffle_seed)
    hooks = intervention_hooks(offsets, prompts.shape[1] - 1)
    out = generate(model, prompts, max_new, hooks, seed=seed, decode=decode)
    return out[0] if single else out


def mask_hooks(ranking: Sequence[HeadId], M: int) -> list[HookAction]:
    if M > len(ranking) or M < 0:
        raise KTooLarge(f"M={M} but only {len(ranking)} heads are ranked")
    return [HookAction.zero(h) for h in ranking[:M]]


def mask_heads(model: ToyLM, ranked: HeadScoreTable | Sequence[HeadId], M: int, prompts,
               max_new: int, toxicity_fn: Callable, seed: int = 0, decode: str = "sampled"):
    """Zero the top-M heads for the whole evaluation; returns (mean toxicity, perplexity).

    Toxicity is ``toxicity_fn`` over the generated continuations; perplexity
    is the unmasked model's on those continuations.
    """
    ranking = ranked.ranking() if isinstance(ranked, HeadScoreTable) else list(ranked)
    hooks = mask_hooks(ranking, M)
    prompts = np.atleast_2d(np.asarray(prompts))
    out = generate(model, prompts, max_new, hooks, seed=seed, decode=decode)
    return continuation_metrics(model, out, prompts.shape[1], toxicity_fn)


def continuation_metrics(base_model: ToyLM, sequences: np.ndarray, prompt_len: int,
                         toxicity_fn: Callable) -> tuple[float, float]:
    """(mean toxicity of the continuations, base-model perplexity on the continuation tokens)."""
    cont = sequences[:, prompt_len:]
    tox = float(np.mean(toxicity_fn(cont)))
    nll = token_nll(base_model, sequences)[:, prompt_len - 1:]
    return tox, float(np.exp(nll.mean()))


# -- persistence ---------------------------------------------------------------------
#
# Bundle layout (little-endian):
#   magic "HSSB" | version u16 | n_heads u32 | d u32 | n_pairs u32
#   | pair ids u32 * n_pairs
#   | per head: layer u16, head u16, degenerate u8, sigma f64, v_global f64 * d,
#     diff cache offset u64 (byte offset of this head's block in the cache section)
#   | cache section: per head, diffs f32 * (n_pairs * d) then toxic f32 * (n_pairs * d)


def save_bundle(bundle: SteeringBundle, path) -> None:
    heads = bundle.heads
    d = len(bundle.vectors[heads[0]].v_global) if heads else 0
    n = len(bundle.pair_ids)
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC + struct.pack("<H3I", BUNDLE_VERSION, len(heads), d, n))
    buf.write(np.asarray(bundle.pair_ids, dtype="<u4").tobytes())
    block = 2 * n * d * 4
    for i, h in enumerate(heads):
        hv = bundle.vectors[h]
        buf.write(struct.pack("<HHBd", h.layer, h.head, int(hv.degenerate), hv.sigma))
        buf.write(np.asarray(hv.v_global, dtype="<f8").tobytes())
        buf.write(struct.pack("<Q", i * block))
    for h in heads:
        hv = bundle.vectors[h]
        buf.write(np.asarray(hv.diffs, dtype="<f4").tobytes())
        buf.write(np.asarray(hv.toxic, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_bundle(path) -> SteeringBundle:
    raw = Path(path).read_bytes()
    try:
        return _parse_bundle(raw, path)
    except (ValueError, struct.error) as e:
        raise FormatError(f"{path}: truncated or corrupt bundle ({e})") from None


def _parse_bundle(raw: bytes, path) -> SteeringBundle:
    if raw[:4] != BUNDLE_MAGIC:
        raise FormatError(f"{path}: not a steering bundle")
    version, nh, d, n = struct.unpack_from("<H3I", raw, 4)
    if version != BUNDLE_VERSION:
        raise FormatError(f"{path}: unsupported bundle version {version}")
    off = 4 + struct.calcsize("<H3I")
    pids = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    off += 4 * n
    meta = []
    for _ in range(nh):
        layer, head, degen, sigma = struct.unpack_from("<HHBd", raw, off)
        off += struct.calcsize("<HHBd")
        v = np.frombuffer(raw, dtype="<f8", count=d, offset=off).copy()
        off += 8 * d
        (cache_off,) = struct.unpack_from("<Q", raw, off)
        off += 8
        meta.append((HeadId(layer, head), bool(degen), sigma, v, cache_off))
    if len(raw) != off + nh * 2 * n * d * 4:
        raise FormatError(f"{path}: bundle size does not match its header")
    vectors = {}
    for hid, degen, sigma, v, cache_off in meta:
        p = off + cache_off
        diffs = np.frombuffer(raw, dtype="<f4", count=n * d, offset=p).reshape(n, d).astype(np.float64)
        toxic = np.frombuffer(raw, dtype="<f4", count=n * d, offset=p + 4 * n * d).reshape(n, d).astype(np.float64)
        vectors[hid] = HeadVector(v, sigma, diffs, toxic, degen)
    return SteeringBundle([m[0] for m in meta], vectors, pids)
