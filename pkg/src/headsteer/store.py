"""Per-sample head activations and the binary activation dump.

Dump layout (little-endian)::

    magic "CDTX" | version u16 | L, H, d, n, d_k u32
    n records of: label u8 | variant u8 | pair_id u32 | key f32 * d_k | acts f32 * (L*H*d)

Activations are written as float32 and widened to float64 on load.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import FormatError, MissingHeadData, NoPairs, ValidationError
from .toylm import HeadId, HookAction, ToyLM, final_hidden_mean, forward_with_hooks

DUMP_MAGIC = b"CDTX"
DUMP_VERSION = 1
TOXIC, NONTOXIC = 1, 0


@dataclass
class ActivationStore:
    acts: np.ndarray  # (n, L, H, d)
    labels: np.ndarray  # (n,)
    variant: np.ndarray  # (n,) 1 = toxic side of its pair
    pair_ids: np.ndarray  # (n,)
    keys: np.ndarray  # (n, d_k)
    tokens: np.ndarray | None = field(default=None, repr=False)  # prompts, not persisted

    def __post_init__(self):
        self.acts = np.asarray(self.acts, dtype=np.float64)
        if self.acts.ndim != 4:
            raise MissingHeadData("activations must have shape (n, L, H, d)")
        n = len(self.acts)
        for name in ("labels", "variant", "pair_ids", "keys"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if not np.all(np.isfinite(self.acts)):
            raise MissingHeadData("non-finite activations")

    def __len__(self):
        return len(self.acts)

    @property
    def n_layers(self) -> int:
        return self.acts.shape[1]

    @property
    def n_heads(self) -> int:
        return self.acts.shape[2]

    @property
    def head_dim(self) -> int:
        return self.acts.shape[3]

    def heads(self) -> list[HeadId]:
        return [HeadId(l, h) for l in range(self.n_layers) for h in range(self.n_heads)]

    def head(self, hid: HeadId) -> np.ndarray:
        if not (0 <= hid.layer < self.n_layers and 0 <= hid.head < self.n_heads):
            raise MissingHeadData(f"no activations for {hid}")
        return self.acts[:, hid.layer, hid.head]

    def concat(self) -> np.ndarray:
        return self.acts.reshape(len(self), -1)

    def subset(self, idx) -> ActivationStore:
        idx = np.asarray(idx)
        return ActivationStore(self.acts[idx], self.labels[idx], self.variant[idx],
                               self.pair_ids[idx], self.keys[idx],
                               None if self.tokens is None else self.tokens[idx])

    def pair_index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(pair ids, row of toxic side, row of non-toxic side), sorted by pair id."""
        tox = {int(p): i for i, (p, v) in enumerate(zip(self.pair_ids, self.variant)) if v == TOXIC}
        non = {int(p): i for i, (p, v) in enumerate(zip(self.pair_ids, self.variant)) if v == NONTOXIC}
        ids = sorted(set(tox) & set(non))
        if not ids:
            raise NoPairs("store holds no complete toxic/non-toxic pair")
        return (np.array(ids), np.array([tox[p] for p in ids]), np.array([non[p] for p in ids]))

    def select_pairs(self, pair_ids) -> ActivationStore:
        keep = np.isin(self.pair_ids, np.asarray(pair_ids))
        return self.subset(np.flatnonzero(keep))


def extract(model: ToyLM, pairs: Sequence, prompt_len: int,
            key_fn: Callable[[ToyLM, np.ndarray], np.ndarray] | None = None,
            batch_size: int = 512) -> ActivationStore:
    """Capture every head's output at the last prompt position for both variants.

    Rows alternate toxic, non-toxic per pair. ``key_fn(model, prompts)`` maps
    prompts to retrieval keys; default is the mean final hidden state.
    """
    if not pairs:
        raise NoPairs("no pairs to extract")
    key_fn = key_fn or final_hidden_mean
    prompts = np.stack([x for p in pairs for x in (p.x_plus[:prompt_len], p.x_minus[:prompt_len])])
    labels = np.array([y for p in pairs for y in (p.y_plus, p.y_minus)])
    variant = np.tile([TOXIC, NONTOXIC], len(pairs))
    pids = np.repeat([p.pair_id for p in pairs], 2)
    cfg = model.cfg
    hooks = [HookAction.capture(h, positions="last") for h in cfg.all_heads()]
    acts = np.empty((len(prompts), cfg.n_layers, cfg.n_heads, cfg.head_dim))
    keys = []
    for s in range(0, len(prompts), batch_size):
        b = prompts[s:s + batch_size]
        _, caps = forward_with_hooks(model, b, hooks)
        for hid, z in caps.items():
            acts[s:s + batch_size, hid.layer, hid.head] = z[:, -1]
        keys.append(np.asarray(key_fn(model, b)))
    return ActivationStore(acts, labels, variant, pids, np.concatenate(keys), prompts)


def write_dump(store: ActivationStore, path) -> None:
    n, L, H, d = store.acts.shape
    dk = store.keys.shape[1]
    rec = np.dtype([("label", "u1"), ("variant", "u1"), ("pair", "<u4"),
                    ("key", "<f4", (dk,)), ("acts", "<f4", (L * H * d,))])
    with open(path, "wb") as f:
        f.write(DUMP_MAGIC + struct.pack("<H5I", DUMP_VERSION, L, H, d, n, dk))
        arr = np.empty(n, dtype=rec)
        arr["label"] = store.labels
        arr["variant"] = store.variant
        arr["pair"] = store.pair_ids
        arr["key"] = store.keys
        arr["acts"] = store.acts.reshape(n, -1)
        f.write(arr.tobytes())


def read_dump(path) -> ActivationStore:
    raw = Path(path).read_bytes()
    if raw[:4] != DUMP_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, L, H, d, n, dk = struct.unpack_from("<H5I", raw, 4)
    if version != DUMP_VERSION:
        raise FormatError(f"{path}: unsupported dump version {version}")
    rec = np.dtype([("label", "u1"), ("variant", "u1"), ("pair", "<u4"),
                    ("key", "<f4", (dk,)), ("acts", "<f4", (L * H * d,))])
    off = 4 + struct.calcsize("<H5I")
    if len(raw) - off != n * rec.itemsize:
        raise FormatError(f"{path}: truncated dump ({len(raw) - off} bytes for {n} records)")
    arr = np.frombuffer(raw, dtype=rec, count=n, offset=off)
    return ActivationStore(arr["acts"].astype(np.float64).reshape(n, L, H, d),
                           arr["label"].astype(np.int64), arr["variant"].astype(np.int64),
                           arr["pair"].astype(np.int64), arr["key"].astype(np.float64))
