"""Per-head causal scoring and head selection.

For each head we regress the toxicity label on the head's activations and the
confounder proxy (linear-Gaussian outcome model) and evaluate the log-PNS
lower bound

    (1 / 2σ²) Σ_i [ (β·z̃_i)² + 2 (β·z̃_i)(γ·c̃_i) ]

where z̃, c̃ are activations and confounders centered on the scoring fold.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .confounder import FactorModel, encode
from .errors import DimensionMismatch, InsufficientSamples, KTooLarge, MissingHeadData, ValidationError
from .numerics import make_rng, ols_fit
from .store import ActivationStore
from .toylm import HeadId

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-12


@dataclass
class OutcomeModel:
    beta0: float
    beta: np.ndarray
    gamma: np.ndarray
    sigma2: float
    ridge: float = 0.0


def fit_outcome(Z, C, y) -> OutcomeModel:
    """Joint least-squares fit of y on [1, Z, C]."""
    Z = np.asarray(Z, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if Z.ndim != 2 or C.ndim != 2 or len(Z) != len(C) or len(Z) != len(y):
        raise DimensionMismatch(f"Z {Z.shape}, C {C.shape}, y {y.shape}")
    n, d = Z.shape
    dc = C.shape[1]
    if n <= d + dc + 1:
        raise InsufficientSamples(f"n={n} must exceed d + d_c + 1 = {d + dc + 1}")
    X = np.hstack([np.ones((n, 1)), Z, C])
    fit = ols_fit(X, y)
    coef = fit.coefficients
    return OutcomeModel(float(coef[0]), coef[1:1 + d], coef[1 + d:], max(fit.sigma2, SIGMA2_FLOOR), fit.ridge)


def pns_lower_bound(Z, C, model: OutcomeModel) -> float:
    Z = np.asarray(Z, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if Z.shape[1] != len(model.beta) or C.shape[1] != len(model.gamma) or len(Z) != len(C):
        raise DimensionMismatch("activations/confounders do not match the outcome model")
    a = (Z - Z.mean(0)) @ model.beta
    b = (C - C.mean(0)) @ model.gamma
    return float(np.sum(a * a + 2.0 * a * b) / (2.0 * model.sigma2))


# -- folds ------------------------------------------------------------------------


def make_folds(pair_ids, n_folds: int = 2, seed: int = 0) -> list[np.ndarray]:
    """Random partition of pair ids into ``n_folds`` folds of equal size (±1)."""
    ids = np.unique(np.asarray(pair_ids))
    if n_folds < 1 or len(ids) < n_folds:
        raise ValidationError(f"cannot split {len(ids)} pairs into {n_folds} folds")
    perm = make_rng(seed).permutation(ids)
    return [np.sort(f) for f in np.array_split(perm, n_folds)]


# -- score tables -------------------------------------------------------------------


@dataclass
class HeadScoreTable:
    """One row per (head, fold)."""

    heads: list[HeadId]
    folds: list[int]
    scores: np.ndarray  # (n_rows,)
    n_samples: np.ndarray  # (n_rows,)
    method: str = "pns"

    @property
    def per_sample(self) -> np.ndarray:
        return self.scores / self.n_samples

    def head_list(self) -> list[HeadId]:
        return sorted(set(self.heads))

    def mean_scores(self) -> dict[HeadId, float]:
        out: dict[HeadId, list[float]] = {}
        for h, s in zip(self.heads, self.scores):
            out.setdefault(h, []).append(float(s))
        return {h: float(np.mean(v)) for h, v in sorted(out.items())}

    def ranking(self) -> list[HeadId]:
        """Heads by fold-averaged score, descending; ties go to the lower (layer, head)."""
        ms = self.mean_scores()
        return sorted(ms, key=lambda h: (-ms[h], h.layer, h.head))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "fold", "score", "score_per_sample"])
        for h, f, s, ps in zip(self.heads, self.folds, self.scores, self.per_sample):
            w.writerow([h.layer, h.head, f, repr(float(s)), repr(float(ps))])
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [dict(layer=h.layer, head=h.head, fold=int(f), score=float(s), n=int(n))
                for h, f, s, n in zip(self.heads, self.folds, self.scores, self.n_samples)]
        return json.dumps({"schema": 1, "method": self.method, "rows": rows}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> HeadScoreTable:
        d = json.loads(text)
        rows = d["rows"]
        return cls([HeadId(r["layer"], r["head"]) for r in rows], [r["fold"] for r in rows],
                   np.array([r["score"] for r in rows], dtype=float),
                   np.array([r["n"] for r in rows], dtype=float), d.get("method", "pns"))


@dataclass
class HeadSet:
    heads: list[HeadId]
    criterion: str = "pns"

    def __post_init__(self):
        if len(set(self.heads)) != len(self.heads):
            raise ValidationError("duplicate heads in head set")

    def __len__(self):
        return len(self.heads)

    def __iter__(self):
        return iter(self.heads)


def _fold_rows(store: ActivationStore, folds) -> list[np.ndarray]:
    if folds is None:
        return [np.arange(len(store))]
    return [np.flatnonzero(np.isin(store.pair_ids, f)) for f in folds]


def _confounders(store: ActivationStore, factor, k: int, rows: np.ndarray) -> np.ndarray:
    if isinstance(factor, (list, tuple)):
        factor = factor[k]
    if callable(factor) and not isinstance(factor, FactorModel):
        return np.asarray(factor(rows))
    return encode(factor, store.concat()[rows])


def score_all_heads(store: ActivationStore, factor, folds=None, heads: Sequence[HeadId] | None = None) -> HeadScoreTable:
    """Lower-bound score of every head on every fold (fit and evaluate on the same fold).

    ``factor`` is a FactorModel, a per-fold list of them, or a callable mapping
    row indices to confounder rows.
    """
    heads = list(heads) if heads is not None else store.heads()
    out_h, out_f, out_s, out_n = [], [], [], []
    for k, rows in enumerate(_fold_rows(store, folds)):
        if len(rows) == 0:
            raise MissingHeadData(f"fold {k} has no samples")
        C = _confounders(store, factor, k, rows)
        y = store.labels[rows]
        for h in heads:
            Z = store.head(h)[rows]
            model = fit_outcome(Z, C, y)
            out_h.append(h)
            out_f.append(k)
            out_s.append(pns_lower_bound(Z, C, model))
            out_n.append(len(rows))
    return HeadScoreTable(out_h, out_f, np.array(out_s), np.array(out_n, dtype=float), "pns")


def select_heads(table: HeadScoreTable, K: int) -> HeadSet:
    ranked = table.ranking()
    if K > len(ranked) or K < 0:
        raise KTooLarge(f"K={K} but the table has {len(ranked)} heads")
    return HeadSet(ranked[:K], table.method)


def random_heads(heads: Sequence[HeadId], K: int, seed: int) -> HeadSet:
    heads = sorted(heads)
    if K > len(heads):
        raise KTooLarge(f"K={K} but only {len(heads)} heads")
    idx = make_rng(seed).choice(len(heads), size=K, replace=False)
    return HeadSet([heads[i] for i in idx], "random")


def probe_baseline(store: ActivationStore, folds=None, seed: int = 0, val_fraction: float = 0.3,
                   heads: Sequence[HeadId] | None = None) -> HeadScoreTable:
    """Validation accuracy of a per-head logistic probe, same fold layout as the PNS table.

    Within each fold, pairs are split into probe-train and probe-validation
    parts (``val_fraction``) so both variants of a pair land on the same side.
    """
    from sklearn.linear_model import LogisticRegression

    heads = list(heads) if heads is not None else store.heads()
    out_h, out_f, out_s, out_n = [], [], [], []
    for k, rows in enumerate(_fold_rows(store, folds)):
        pids = np.unique(store.pair_ids[rows])
        rng = make_rng(seed + 7919 * k)
        n_val = max(1, int(round(val_fraction * len(pids))))
        val_p = rng.permutation(pids)[:n_val]
        is_val = np.isin(store.pair_ids[rows], val_p)
        tr, va = rows[~is_val], rows[is_val]
        if len(tr) == 0 or len(va) == 0:
            raise MissingHeadData(f"fold {k} too small for a probe split")
        y_tr, y_va = store.labels[tr], store.labels[va]
        for h in heads:
            Z = store.head(h)
            if len(np.unique(y_tr)) < 2:
                acc = float(np.mean(y_va == y_tr[0]))
            else:
                clf = LogisticRegression(max_iter=1000)
                clf.fit(Z[tr], y_tr)
                acc = float(clf.score(Z[va], y_va))
            out_h.append(h)
            out_f.append(k)
            out_s.append(acc)
            out_n.append(len(va))
    return HeadScoreTable(out_h, out_f, np.array(out_s), np.array(out_n, dtype=float), "probe")
