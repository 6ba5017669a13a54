"""PNS-guided fine-tuning of the selected heads' value/output projections.

Objective per step (fixed outcome models between refits):

    J(θ) = Σ_h score_h(θ) − λ_reg · KL(base ‖ tuned)

where score_h is the lower-bound score of head h evaluated on the training
prompts' last-position activations, with confounders re-encoded from the
current activations through the (fixed) factor model, and KL is the mean
next-token KL divergence on a reference corpus. Only W_V[h] and W_O[h] of
the selected heads change.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .confounder import FactorModel, encode, encode_torch
from .errors import ConfigMismatch, NonFiniteObjective, NoSelectedHeads, ValidationError
from .numerics import make_rng
from .pns import OutcomeModel, fit_outcome
from .toylm import HeadId, HookAction, ToyLM, _as_batch

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinetuneConfig:
    heads: tuple[HeadId, ...]
    lam_reg: float = 1e3
    epochs: int = 5
    lr: float = 1e-5
    refit_interval: int = 1
    reference_corpus: str = "heldout-nontoxic"
    max_backtracks: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lam_reg < 0:
            raise ValidationError("lam_reg must be >= 0")
        if self.lr <= 0:
            raise ValidationError("lr must be > 0")
        if self.epochs < 0 or self.refit_interval < 1:
            raise ValidationError("epochs must be >= 0 and refit_interval >= 1")

    @classmethod
    def paper_preset(cls, heads, **kw) -> FinetuneConfig:
        """Learning rate 1e-5 for 5 epochs."""
        return cls(tuple(heads), lr=1e-5, epochs=5, **kw)


@dataclass
class EpochLog:
    epoch: int
    sum_log_pns: float
    kl: float
    objective: float
    step: float
    refit: bool


@dataclass
class FinetuneReport:
    epochs: list[EpochLog] = field(default_factory=list)
    toxicity_delta: float | None = None
    perplexity_delta: float | None = None

    def to_json(self) -> str:
        return json.dumps({"schema": 1, "epochs": [asdict(e) for e in self.epochs],
                           "toxicity_delta": self.toxicity_delta,
                           "perplexity_delta": self.perplexity_delta}, indent=1)


@dataclass
class FinetuneData:
    """Training prompts with labels, the factor model, and the KL reference corpus."""

    prompts: np.ndarray  # (n, P)
    labels: np.ndarray  # (n,)
    factor: FactorModel
    reference: np.ndarray  # (m, T)


# -- pieces of the objective -------------------------------------------------------


def _kl_tensor(base_logits: torch.Tensor, tuned_logits: torch.Tensor) -> torch.Tensor:
    lp = torch.log_softmax(base_logits, -1)
    lq = torch.log_softmax(tuned_logits, -1)
    return (lp.exp() * (lp - lq)).sum(-1).mean()


def kl_regularizer(base: ToyLM, tuned: ToyLM, reference) -> float:
    """Mean over reference positions of KL(base next-token dist ‖ tuned next-token dist)."""
    if base.cfg != tuned.cfg and (base.cfg.vocab != tuned.cfg.vocab or base.cfg.model_dim != tuned.cfg.model_dim):
        raise ConfigMismatch("base and tuned models differ in shape")
    t = _as_batch(reference)
    with torch.no_grad():
        kl = _kl_tensor(base(t)[:, :-1], tuned(t)[:, :-1])
    return max(float(kl), 0.0)


def _all_head_acts(model: ToyLM, prompts: torch.Tensor) -> torch.Tensor:
    """Last-position activations of every head, (n, L, H, d), differentiable."""
    cfg = model.cfg
    hooks = [HookAction.capture(h, positions="last") for h in cfg.all_heads()]
    _, caps, _ = model.run(prompts, hooks)
    return torch.stack([torch.stack([caps[HeadId(l, h)][:, -1] for h in range(cfg.n_heads)], 1)
                        for l in range(cfg.n_layers)], 1)


def _score_torch(Z: torch.Tensor, C: torch.Tensor, om: OutcomeModel) -> torch.Tensor:
    a = (Z - Z.mean(0)) @ torch.as_tensor(om.beta)
    b = (C - C.mean(0)) @ torch.as_tensor(om.gamma)
    return (a * a + 2.0 * a * b).sum() / (2.0 * om.sigma2)


def refit_outcomes(model: ToyLM, data: FinetuneData, heads: Sequence[HeadId]) -> dict[HeadId, OutcomeModel]:
    with torch.no_grad():
        A = _all_head_acts(model, torch.as_tensor(data.prompts)).numpy()
    C = encode(data.factor, A.reshape(len(A), -1))
    return {h: fit_outcome(A[:, h.layer, h.head], C, data.labels) for h in heads}


class Objective:
    """J(θ) with the outcome models held fixed."""

    def __init__(self, base: ToyLM, data: FinetuneData, heads: Sequence[HeadId], lam_reg: float,
                 outcomes: dict[HeadId, OutcomeModel]):
        self.data = data
        self.heads = list(heads)
        self.lam_reg = lam_reg
        self.outcomes = outcomes
        self.prompts = torch.as_tensor(data.prompts)
        self.ref = _as_batch(data.reference)
        with torch.no_grad():
            self.base_logits = base(self.ref)[:, :-1]

    def terms(self, model: ToyLM) -> tuple[torch.Tensor, torch.Tensor]:
        A = _all_head_acts(model, self.prompts)
        C = encode_torch(self.data.factor, A.reshape(A.shape[0], -1))
        pns = sum(_score_torch(A[:, h.layer, h.head], C, self.outcomes[h]) for h in self.heads)
        kl = _kl_tensor(self.base_logits, model(self.ref)[:, :-1]) if self.lam_reg > 0 else torch.zeros((), dtype=A.dtype)
        return pns, kl

    def value(self, model: ToyLM) -> tuple[float, float, float]:
        with torch.no_grad():
            pns, kl = self.terms(model)
        pns, kl = pns.item(), kl.item()
        return pns, kl, pns - self.lam_reg * kl


# -- parameter plumbing ------------------------------------------------------------


def tunable_blocks(model: ToyLM, heads: Sequence[HeadId]) -> list[tuple[torch.Tensor, tuple]]:
    """(parameter, index) views of each selected head's W_V slice and W_O block."""
    out = []
    for h in heads:
        blk = model.blocks[h.layer]
        out.append((blk.W_V, (h.head,)))
        out.append((blk.W_O, (h.head,)))
    return out


def _gradients(model: ToyLM, obj: Objective, heads) -> tuple[list[torch.Tensor], float, float]:
    model.zero_grad(set_to_none=True)
    for p in model.parameters():
        p.requires_grad_(False)
    params = {id(p): p for p, _ in tunable_blocks(model, heads)}
    for p in params.values():
        p.requires_grad_(True)
    pns, kl = obj.terms(model)
    J = pns - obj.lam_reg * kl
    if not torch.isfinite(J):
        raise NonFiniteObjective(f"objective is {float(J)}")
    J.backward()
    # a block the objective does not reach (e.g. a last-layer W_O with no KL term) has no grad
    grads = [torch.zeros_like(p[idx]) if p.grad is None else p.grad[idx].detach().clone()
             for p, idx in tunable_blocks(model, heads)]
    for p in model.parameters():
        p.requires_grad_(True)
        p.grad = None
    return grads, pns.item(), kl.item()


def _apply(model: ToyLM, heads, base_vals, grads, step: float):
    with torch.no_grad():
        for (p, idx), v0, g in zip(tunable_blocks(model, heads), base_vals, grads):
            p[idx] = v0 + step * g


def finetune_pns(model: ToyLM, data: FinetuneData, cfg: FinetuneConfig) -> tuple[ToyLM, FinetuneReport]:
    """Gradient ascent with backtracking on J, refitting the outcome models every ``refit_interval`` epochs.

    Each epoch is one full-batch step. A step is accepted when J does not
    decrease (tolerance 1e-12 relative); otherwise it is halved up to
    ``max_backtracks`` times, after which the epoch makes no change. Every
    epoch starts again from ``lr``.
    """
    heads = list(cfg.heads)
    if not heads:
        raise NoSelectedHeads("fine-tuning needs at least one selected head")
    tuned = copy.deepcopy(model)
    report = FinetuneReport()
    if cfg.epochs == 0:
        return tuned, report
    base = model
    step = cfg.lr
    outcomes = None
    for ep in range(cfg.epochs):
        refit = outcomes is None or ep % cfg.refit_interval == 0
        if refit:
            outcomes = refit_outcomes(tuned, data, heads)
        obj = Objective(base, data, heads, cfg.lam_reg, outcomes)
        grads, pns0, kl0 = _gradients(tuned, obj, heads)
        J0 = pns0 - cfg.lam_reg * kl0
        base_vals = [p[idx].detach().clone() for p, idx in tunable_blocks(tuned, heads)]
        accepted = 0.0
        trial = step
        for _ in range(cfg.max_backtracks + 1):
            _apply(tuned, heads, base_vals, grads, trial)
            pns1, kl1, J1 = obj.value(tuned)
            if not math.isfinite(J1):
                raise NonFiniteObjective(f"objective became {J1} at epoch {ep}")
            if J1 >= J0 - 1e-12 * max(1.0, abs(J0)):
                accepted = trial
                break
            trial *= 0.5
        if accepted == 0.0:
            _apply(tuned, heads, base_vals, grads, 0.0)
            pns1, kl1, J1 = pns0, kl0, J0
        report.epochs.append(EpochLog(ep, pns1, kl1, pns1 - cfg.lam_reg * kl1, accepted, refit))
        log.debug("epoch %d: sum score %.4f kl %.3e step %.2e", ep, pns1, kl1, accepted)
    tuned.eval()
    return tuned, report


def objective_gradient_check(model: ToyLM, data: FinetuneData, cfg: FinetuneConfig,
                             epsilon: float = 1e-4, n_params: int = 24) -> float:
    """Max relative error of the backprop gradient against central differences.

    Checks ``n_params`` randomly chosen entries of the selected blocks. The
    relative error uses max(|g_bp|, |g_fd|, 1e-6·max|g_bp|) as denominator.
    """
    heads = list(cfg.heads)
    if not heads:
        raise NoSelectedHeads("no heads to check")
    m = copy.deepcopy(model)
    outcomes = refit_outcomes(m, data, heads)
    obj = Objective(model, data, heads, cfg.lam_reg, outcomes)
    grads, _, _ = _gradients(m, obj, heads)
    gmax = max(float(g.abs().max()) for g in grads)
    rng = make_rng(cfg.seed)
    blocks = tunable_blocks(m, heads)
    worst = 0.0
    for _ in range(n_params):
        b = int(rng.integers(len(blocks)))
        p, idx = blocks[b]
        view = p[idx]
        flat = tuple(int(rng.integers(s)) for s in view.shape)
        full = idx + flat
        with torch.no_grad():
            orig = p[full].item()
            p[full] = orig + epsilon
            jp = obj.value(m)[2]
            p[full] = orig - epsilon
            jm = obj.value(m)[2]
            p[full] = orig
        fd = (jp - jm) / (2 * epsilon)
        g = float(grads[b][flat])
        denom = max(abs(g), abs(fd), 1e-6 * gmax, 1e-300)
        worst = max(worst, abs(g - fd) / denom)
    return worst
