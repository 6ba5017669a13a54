"""A small decoder-only transformer with per-head hook points.

Architecture (fixed): learned token and position embeddings, ``n_layers``
pre-LayerNorm blocks of bias-free multi-head causal attention followed by a
GELU MLP, final LayerNorm, and a linear unembedding whose weights start at
zero so an untrained model predicts the uniform distribution.

Head outputs ``z`` (attention-weighted values, shape ``head_dim``) are the
hook points. Hooks act on ``z`` before the layer's output projection:

* ``capture``  returns ``z`` for the hooked head without changing anything;
* ``zero``     replaces ``z`` with zeros on the selected positions;
* ``add``      adds an offset vector to ``z`` on the selected positions.

Several hooks may target the same head in one pass: zeroing is applied first
and is idempotent, offsets then accumulate additively.
"""
from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import (
    ContextOverflow,
    EmptyCorpus,
    FormatError,
    InvalidHead,
    NonFiniteLoss,
    OffsetDimMismatch,
    TokenOutOfRange,
    ValidationError,
)
from .numerics import make_rng

log = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"HSLM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    vocab: int = 64
    context: int = 64
    seed: int = 0
    mlp_mult: int = 4

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "vocab", "context", "mlp_mult"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")

    @property
    def model_dim(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def n_total_heads(self) -> int:
        return self.n_layers * self.n_heads

    def all_heads(self) -> list[HeadId]:
        return [HeadId(l, h) for l in range(self.n_layers) for h in range(self.n_heads)]


@dataclass(frozen=True, order=True)
class HeadId:
    layer: int
    head: int

    def __str__(self):
        return f"L{self.layer}H{self.head}"

    def flat(self, n_heads: int) -> int:
        return self.layer * n_heads + self.head


@dataclass(frozen=True, eq=False)
class HookAction:
    """One hook on one head.

    ``positions`` is ``"all"``, ``"last"``, or an int ``s`` meaning every
    position ``t >= s``. ``offset`` has shape ``(head_dim,)`` or
    ``(batch, head_dim)`` for per-sequence offsets.
    """

    kind: str
    target: HeadId
    offset: np.ndarray | None = None
    positions: str | int = "all"

    def __post_init__(self):
        if self.kind not in ("capture", "add", "zero"):
            raise ValidationError(f"unknown hook kind {self.kind!r}")
        if self.kind == "add" and self.offset is None:
            raise ValidationError("add hook needs an offset")

    @classmethod
    def capture(cls, head: HeadId, positions="all"):
        return cls("capture", head, None, positions)

    @classmethod
    def zero(cls, head: HeadId, positions="all"):
        return cls("zero", head, None, positions)

    @classmethod
    def add(cls, head: HeadId, offset, positions="all"):
        return cls("add", head, np.asarray(offset, dtype=np.float64), positions)


def _position_mask(positions, T: int) -> torch.Tensor:
    mask = torch.zeros(T, dtype=DTYPE)
    if positions == "all":
        mask[:] = 1.0
    elif positions == "last":
        mask[T - 1] = 1.0
    elif isinstance(positions, (int, np.integer)):
        mask[max(int(positions), 0):] = 1.0
    else:
        raise ValidationError(f"bad positions spec {positions!r}")
    return mask


class _Plan:
    """HookActions compiled against a concrete (batch, length)."""

    def __init__(self, cfg: ModelConfig, hooks: Sequence[HookAction], B: int, T: int):
        L, H, d = cfg.n_layers, cfg.n_heads, cfg.head_dim
        self.keep: list[torch.Tensor | None] = [None] * L  # (H, T) multiplicative
        self.add: list[torch.Tensor | None] = [None] * L  # (B, H, T, d)
        self.capture: set[HeadId] = set()
        for hk in hooks:
            hid = hk.target
            if not (0 <= hid.layer < L and 0 <= hid.head < H):
                raise InvalidHead(f"{hid} outside a {L}x{H} model")
            mask = _position_mask(hk.positions, T)
            if hk.kind == "capture":
                self.capture.add(hid)
            elif hk.kind == "zero":
                if self.keep[hid.layer] is None:
                    self.keep[hid.layer] = torch.ones(H, T, dtype=DTYPE)
                self.keep[hid.layer][hid.head] *= 1.0 - mask
            else:
                off = torch.as_tensor(hk.offset, dtype=DTYPE)
                if off.shape[-1] != d or off.ndim > 2 or (off.ndim == 2 and off.shape[0] != B):
                    raise OffsetDimMismatch(f"offset shape {tuple(off.shape)} for head_dim {d}, batch {B}")
                if self.add[hid.layer] is None:
                    self.add[hid.layer] = torch.zeros(B, H, T, d, dtype=DTYPE)
                off = off.reshape(-1, 1, d) if off.ndim == 2 else off.reshape(1, 1, d)
                self.add[hid.layer][:, hid.head] += off * mask.reshape(1, T, 1)


class _LayerNorm(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, x):
        return F.layer_norm(x, x.shape[-1:], self.weight, self.bias, 1e-5)


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        D, H, d = cfg.model_dim, cfg.n_heads, cfg.head_dim
        M = cfg.mlp_mult * D

        def init(*shape, fan_in):
            return nn.Parameter(torch.randn(*shape, generator=gen, dtype=DTYPE) / math.sqrt(fan_in))

        self.ln1 = _LayerNorm(D)
        self.W_Q = init(H, D, d, fan_in=D)
        self.W_K = init(H, D, d, fan_in=D)
        self.W_V = init(H, D, d, fan_in=D)
        self.W_O = init(H, d, D, fan_in=D)
        self.ln2 = _LayerNorm(D)
        self.W_in = init(D, M, fan_in=D)
        self.b_in = nn.Parameter(torch.zeros(M, dtype=DTYPE))
        self.W_out = init(M, D, fan_in=M)
        self.b_out = nn.Parameter(torch.zeros(D, dtype=DTYPE))

    def attention(self, x, cache=None):
        """Per-head outputs z of shape (B, H, T, d).

        With ``cache`` (a dict holding earlier keys/values, possibly empty), x
        holds only the new positions and the cache is extended in place.
        """
        h = self.ln1(x)
        q = torch.einsum("btD,hDd->bhtd", h, self.W_Q)
        k = torch.einsum("btD,hDd->bhtd", h, self.W_K)
        v = torch.einsum("btD,hDd->bhtd", h, self.W_V)
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        T, S = q.shape[2], k.shape[2]
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        causal = torch.ones(T, S, dtype=torch.bool).tril(S - T)
        scores = scores.masked_fill(~causal, float("-inf"))
        return torch.softmax(scores, dim=-1) @ v

    def mlp(self, x):
        h = self.ln2(x)
        return F.gelu(h @ self.W_in + self.b_in) @ self.W_out + self.b_out


class ToyLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(int(cfg.seed) & 0x7FFFFFFFFFFFFFFF)
        D = cfg.model_dim
        self.tok_emb = nn.Parameter(torch.randn(cfg.vocab, D, generator=gen, dtype=DTYPE))
        self.pos_emb = nn.Parameter(0.1 * torch.randn(cfg.context, D, generator=gen, dtype=DTYPE))
        self.blocks = nn.ModuleList([_Block(cfg, gen) for _ in range(cfg.n_layers)])
        self.ln_f = _LayerNorm(D)
        self.W_U = nn.Parameter(torch.zeros(D, cfg.vocab, dtype=DTYPE))
        self.b_U = nn.Parameter(torch.zeros(cfg.vocab, dtype=DTYPE))

    def run(self, tokens: torch.Tensor, hooks: Sequence[HookAction] = (), want_hidden=False):
        """Differentiable forward. Returns (logits, captures, final hidden or None)."""
        B, T = tokens.shape
        if T > self.cfg.context:
            raise ContextOverflow(f"length {T} exceeds context {self.cfg.context}")
        plan = _Plan(self.cfg, hooks, B, T)
        x = self.tok_emb[tokens] + self.pos_emb[:T]
        captures = {}
        for l, blk in enumerate(self.blocks):
            z = blk.attention(x)
            if plan.keep[l] is not None:
                z = z * plan.keep[l].reshape(1, -1, T, 1)
            if plan.add[l] is not None:
                z = z + plan.add[l]
            for hid in plan.capture:
                if hid.layer == l:
                    captures[hid] = z[:, hid.head]
            x = x + torch.einsum("bhtd,hdD->btD", z, blk.W_O)
            x = x + blk.mlp(x)
        h = self.ln_f(x)
        logits = h @ self.W_U + self.b_U
        return logits, captures, (h if want_hidden else None)

    def forward(self, tokens, hooks=()):
        return self.run(tokens, hooks)[0]

    def extend(self, tokens: torch.Tensor, start: int, caches: list, plan: "_Plan"):
        """Last-position logits after appending ``tokens`` at positions start.. .

        ``plan`` must be compiled for the full final length; its columns for the
        new positions are used. Valid only for position-stationary hooks.
        """
        B, T = tokens.shape
        sl = slice(start, start + T)
        x = self.tok_emb[tokens] + self.pos_emb[sl]
        for l, blk in enumerate(self.blocks):
            z = blk.attention(x, caches[l])
            if plan.keep[l] is not None:
                z = z * plan.keep[l][:, sl].reshape(1, -1, T, 1)
            if plan.add[l] is not None:
                z = z + plan.add[l][:, :, sl]
            x = x + torch.einsum("bhtd,hdD->btD", z, blk.W_O)
            x = x + blk.mlp(x)
        return self.ln_f(x[:, -1]) @ self.W_U + self.b_U


def _as_batch(tokens) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    return t.unsqueeze(0) if t.ndim == 1 else t


def _check_tokens(model: ToyLM, t: torch.Tensor):
    if t.numel() and (int(t.min()) < 0 or int(t.max()) >= model.cfg.vocab):
        raise TokenOutOfRange(f"token ids must lie in [0, {model.cfg.vocab})")


def forward_with_hooks(model: ToyLM, tokens, hooks: Sequence[HookAction] = ()):
    """Logits and captured head outputs as numpy arrays.

    A 1-D token sequence gives logits (T, V) and captures (T, d); a 2-D batch
    gives (B, T, V) and (B, T, d).
    """
    single = np.ndim(tokens) == 1
    t = _as_batch(tokens)
    _check_tokens(model, t)
    with torch.no_grad():
        logits, caps, _ = model.run(t, hooks)
    logits = logits.numpy()
    caps = {k: v.numpy() for k, v in caps.items()}
    if single:
        logits = logits[0]
        caps = {k: v[0] for k, v in caps.items()}
    return logits, caps


def final_hidden_mean(model: ToyLM, tokens) -> np.ndarray:
    """Mean over positions of the final-LayerNorm hidden state, shape (B, D)."""
    t = _as_batch(tokens)
    with torch.no_grad():
        _, _, h = model.run(t, (), want_hidden=True)
    return h.mean(dim=1).numpy()


def generate(model: ToyLM, prompt, max_new: int, hooks: Sequence[HookAction] = (),
             seed: int = 0, decode: str = "greedy", temperature: float = 1.0,
             return_logits: bool = False):
    """Autoregressive continuation of one prompt or a batch of equal-length prompts.

    Returns prompt + continuation (same rank as ``prompt``). Sampling uses one
    pre-drawn uniform per (sequence, step) and inverse-CDF lookup in vocabulary
    order, so runs that share a seed share their random numbers. With
    ``return_logits`` also returns the per-step next-token logits (B, max_new, V).
    """
    single = np.ndim(prompt) == 1
    seq = _as_batch(prompt)
    _check_tokens(model, seq)
    B, P = seq.shape
    if P >= model.cfg.context or P + max_new > model.cfg.context:
        raise ContextOverflow(f"prompt {P} + {max_new} new tokens exceeds context {model.cfg.context}")
    if P == 0:
        raise ValidationError("empty prompt")
    if decode not in ("greedy", "sampled"):
        raise ValidationError(f"decode must be greedy or sampled, got {decode!r}")
    u = make_rng(seed).random((B, max_new))
    # "last" hooks move with the sequence end, so only they need full recomputation
    cached = not any(hk.positions == "last" for hk in hooks)
    if cached:
        plan = _Plan(model.cfg, hooks, B, P + max_new)
        caches = [{} for _ in model.blocks]
    steps = []
    with torch.no_grad():
        for s in range(max_new):
            if not cached:
                logits = model.run(seq, hooks)[0][:, -1]
            elif s == 0:
                logits = model.extend(seq, 0, caches, plan)
            else:
                logits = model.extend(seq[:, -1:], P + s - 1, caches, plan)
            steps.append(logits)
            if decode == "greedy":
                nxt = logits.argmax(dim=-1)
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                cdf = probs.cumsum(dim=-1)
                uu = torch.as_tensor(u[:, s], dtype=DTYPE).unsqueeze(1) * cdf[:, -1:]
                nxt = (cdf <= uu).sum(dim=-1).clamp(max=model.cfg.vocab - 1)
            seq = torch.cat([seq, nxt.reshape(B, 1)], dim=1)
    out = seq.numpy()
    out = out[0] if single else out
    if not return_logits:
        return out
    lg = (torch.stack(steps, dim=1) if steps else torch.zeros(B, 0, model.cfg.vocab, dtype=DTYPE)).numpy()
    return out, (lg[0] if single else lg)


def token_nll(model: ToyLM, tokens, hooks: Sequence[HookAction] = ()) -> np.ndarray:
    """Per-position next-token negative log-likelihood, shape (B, T-1)."""
    t = _as_batch(tokens)
    _check_tokens(model, t)
    with torch.no_grad():
        logits = model.run(t, hooks)[0][:, :-1]
        lp = torch.log_softmax(logits, dim=-1)
        nll = -lp.gather(-1, t[:, 1:].unsqueeze(-1)).squeeze(-1)
    return nll.numpy()


def _group_by_length(corpus) -> dict[int, np.ndarray]:
    groups: dict[int, list] = {}
    for s in corpus:
        s = np.asarray(s, dtype=np.int64)
        groups.setdefault(len(s), []).append(s)
    return {k: np.stack(v) for k, v in sorted(groups.items())}


def perplexity(model: ToyLM, corpus, hooks: Sequence[HookAction] = ()) -> float:
    """exp of the mean next-token NLL over every predicted position of every sequence."""
    if corpus is None or len(corpus) == 0:
        raise EmptyCorpus("perplexity of an empty corpus")
    total, count = 0.0, 0
    for T, batch in _group_by_length(corpus).items():
        if T < 2:
            continue
        nll = token_nll(model, batch, hooks)
        total += float(nll.sum())
        count += nll.size
    if count == 0:
        raise EmptyCorpus("no next-token positions in corpus")
    return math.exp(total / count)


def lm_loss(model: ToyLM, batch: torch.Tensor) -> torch.Tensor:
    logits = model(batch)[:, :-1]
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[:, 1:].reshape(-1))


def train_lm(config: ModelConfig, corpus, epochs: int = 10, lr: float = 3e-3,
             batch_size: int = 32, weight_decay: float = 0.0) -> ToyLM:
    """Adam on next-token cross-entropy; deterministic given ``config.seed``."""
    if corpus is None or len(corpus) == 0:
        raise EmptyCorpus("training corpus is empty")
    model = ToyLM(config)
    groups = _group_by_length(corpus)
    for batch in groups.values():
        _check_tokens(model, torch.as_tensor(batch))
        if batch.shape[1] > config.context:
            raise ContextOverflow(f"sequence length {batch.shape[1]} exceeds context")
    rng = make_rng(config.seed ^ 0x5EED)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    n_batches = sum(math.ceil(len(b) / batch_size) for b in groups.values())
    total = epochs * n_batches
    if total >= 4:
        # warm-up must span at least two steps or the scheduler divides by zero
        sched = torch.optim.lr_scheduler.OneCycleLR(
            opt, max_lr=lr, total_steps=total, pct_start=min(0.5, max(0.1, 2.0 / total)))
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    model.train()
    for ep in range(epochs):
        ep_loss, ep_n = 0.0, 0
        work = []
        for T, batch in groups.items():
            perm = rng.permutation(len(batch))
            for i in range(0, len(batch), batch_size):
                work.append(batch[perm[i:i + batch_size]])
        for j in rng.permutation(len(work)):
            b = torch.as_tensor(work[j])
            loss = lm_loss(model, b)
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss.item()} in epoch {ep}; lower the learning rate")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            ep_loss += loss.item() * len(b)
            ep_n += len(b)
        log.debug("epoch %d loss %.4f", ep, ep_loss / ep_n)
    model.eval()
    return model


# -- checkpoint -------------------------------------------------------------
#
# Layout (little-endian):
#   magic "HSLM" | version u16 | n_layers, n_heads, head_dim, vocab, context, mlp_mult u32
#   | seed u64 | n_tensors u32 | for each tensor in ToyLM.named_parameters() order:
#   name_len u16, name utf-8, ndim u8, dims u32 * ndim, data f32 * prod(dims)

_CFG_FMT = "<6IQ"


def save_checkpoint(model: ToyLM, path) -> None:
    c = model.cfg
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(struct.pack(_CFG_FMT, c.n_layers, c.n_heads, c.head_dim, c.vocab, c.context,
                          c.mlp_mult, int(c.seed) & 0xFFFFFFFFFFFFFFFF))
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        nb = name.encode()
        arr = p.detach().numpy().astype("<f4")
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ToyLM:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 6
    L, H, d, V, ctx, mm, seed = struct.unpack_from(_CFG_FMT, raw, off)
    off += struct.calcsize(_CFG_FMT)
    model = ToyLM(ModelConfig(L, H, d, V, ctx, seed, mm))
    params = dict(model.named_parameters())
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    with torch.no_grad():
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + ln].decode()
            off += ln
            (nd,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", raw, off)
            off += 4 * nd
            count = int(np.prod(shape)) if nd else 1
            data = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
            if name not in params or tuple(params[name].shape) != tuple(shape):
                raise FormatError(f"{path}: unexpected tensor {name} {shape}")
            params[name].copy_(torch.as_tensor(data.astype(np.float64)))
    model.eval()
    return model


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
