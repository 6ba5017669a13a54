"""Synthetic paired corpus with a known generative process.

Each sequence is ``[topic token, w_1, ..., w_{n-1}]``. A latent toxicity bit
``T`` sets the per-position marker rate (``rate_toxic`` vs ``rate_clean``);
the topic picks which marker tokens appear, which neutral tokens are likely,
and shifts the prior ``P(T = 1 | topic)``. All randomness is exogenous
uniform noise, so the toxic and non-toxic variants of a pair share every
draw and differ only where the toxicity bit matters.

Vocabulary layout: marker tokens first (topic blocks, then shared markers),
then topic tokens, then neutral tokens.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import DegenerateConfig, FormatError, UndefinedConditional, ValidationError
from .numerics import make_rng

CORPUS_HEADER = "# headsteer-corpus v1"


@dataclass(frozen=True)
class ScmConfig:
    n_topics: int = 4
    markers_per_topic: int = 3
    shared_markers: int = 0
    n_neutral: int = 48
    seq_len: int = 24
    p_tox: float = 0.5
    topic_tox_spread: float = 0.3
    rate_toxic: float = 0.2
    rate_clean: float = 0.02
    topic_affinity: float = 0.7
    topic_weights: tuple[float, ...] | None = None
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_topics < 1 or self.n_neutral < 1 or self.n_markers < 1:
            raise DegenerateConfig("every token class needs at least one token")
        if self.n_neutral < self.n_topics:
            raise DegenerateConfig("need at least one neutral token per topic")
        if not 0.0 < self.p_tox < 1.0:
            raise DegenerateConfig("p_tox must lie strictly inside (0, 1)")
        if not 0.0 <= self.rate_clean < self.rate_toxic < 1.0:
            raise DegenerateConfig("need 0 <= rate_clean < rate_toxic < 1")
        if self.seq_len < 2:
            raise DegenerateConfig("seq_len must be >= 2")
        if self.topic_weights is not None and len(self.topic_weights) != self.n_topics:
            raise DegenerateConfig("topic_weights length must equal n_topics")
        if not 0.0 <= self.label_noise < 0.5:
            raise DegenerateConfig("label_noise must lie in [0, 0.5)")

    @property
    def n_markers(self) -> int:
        return self.n_topics * self.markers_per_topic + self.shared_markers

    @property
    def vocab(self) -> int:
        return self.n_markers + self.n_topics + self.n_neutral

    @property
    def marker_ids(self) -> np.ndarray:
        return np.arange(self.n_markers)

    @property
    def topic_ids(self) -> np.ndarray:
        return self.n_markers + np.arange(self.n_topics)

    @property
    def neutral_ids(self) -> np.ndarray:
        return self.n_markers + self.n_topics + np.arange(self.n_neutral)

    def topic_probs(self) -> np.ndarray:
        w = np.ones(self.n_topics) if self.topic_weights is None else np.asarray(self.topic_weights, float)
        return w / w.sum()

    def topic_tox_prior(self) -> np.ndarray:
        """P(T = 1 | topic), spread symmetrically around ``p_tox``."""
        C = self.n_topics
        ramp = np.zeros(C) if C == 1 else np.linspace(-1.0, 1.0, C)
        room = min(self.p_tox, 1.0 - self.p_tox)
        return self.p_tox + self.topic_tox_spread * room * ramp

    def prior(self) -> float:
        """Marginal P(T = 1)."""
        return float(self.topic_probs() @ self.topic_tox_prior())

    def marker_dist(self, topic: int) -> np.ndarray:
        """P(marker token | marker emitted, topic) over ``marker_ids``."""
        p = np.zeros(self.n_markers)
        k = self.markers_per_topic
        own = list(range(topic * k, (topic + 1) * k)) + list(
            range(self.n_topics * k, self.n_markers))
        p[own] = 1.0
        return p / p.sum()

    def neutral_dist(self, topic: int) -> np.ndarray:
        """P(neutral token | neutral emitted, topic) over ``neutral_ids``."""
        N, C = self.n_neutral, self.n_topics
        block = N // C
        home = np.zeros(N)
        home[topic * block:(topic + 1) * block] = 1.0 / block
        return self.topic_affinity * home + (1.0 - self.topic_affinity) / N

    def shifted(self, topic_weights: Sequence[float], seed: int | None = None) -> ScmConfig:
        """Same mechanism, different topic mix (for transfer runs)."""
        return replace(self, topic_weights=tuple(float(w) for w in topic_weights),
                       seed=self.seed if seed is None else seed)


@dataclass
class PairedExample:
    pair_id: int
    x_plus: np.ndarray
    x_minus: np.ndarray
    topic: int
    y_plus: int = 1
    y_minus: int = 0

    def swapped(self) -> PairedExample:
        return PairedExample(self.pair_id, self.x_minus, self.x_plus, self.topic,
                             self.y_minus, self.y_plus)


@dataclass
class _Noise:
    topic: np.ndarray  # (n,)
    u_tox: np.ndarray  # (n,) draws T via topic prior
    u_emit: np.ndarray  # (n, L-1) marker vs neutral
    u_tok: np.ndarray  # (n, L-1) which token
    u_label: np.ndarray  # (n,) label noise


def _draw_noise(cfg: ScmConfig, n: int, rng: np.random.Generator) -> _Noise:
    topic = rng.choice(cfg.n_topics, size=n, p=cfg.topic_probs())
    return _Noise(topic, rng.random(n), rng.random((n, cfg.seq_len - 1)),
                  rng.random((n, cfg.seq_len - 1)), rng.random(n))


def _realize(cfg: ScmConfig, noise: _Noise, T: np.ndarray) -> np.ndarray:
    """Token sequences as a deterministic function of exogenous noise and the bit T."""
    n = len(noise.topic)
    rate = np.where(T.astype(bool), cfg.rate_toxic, cfg.rate_clean)[:, None]
    emit = noise.u_emit < rate
    out = np.empty((n, cfg.seq_len), dtype=np.int64)
    out[:, 0] = cfg.topic_ids[noise.topic]
    mcdf = np.stack([np.cumsum(cfg.marker_dist(c)) for c in range(cfg.n_topics)])
    ncdf = np.stack([np.cumsum(cfg.neutral_dist(c)) for c in range(cfg.n_topics)])
    m_idx = np.minimum((noise.u_tok[:, :, None] >= mcdf[noise.topic][:, None, :]).sum(-1), cfg.n_markers - 1)
    n_idx = np.minimum((noise.u_tok[:, :, None] >= ncdf[noise.topic][:, None, :]).sum(-1), cfg.n_neutral - 1)
    out[:, 1:] = np.where(emit, cfg.marker_ids[m_idx], cfg.neutral_ids[n_idx])
    return out


def generate_pairs(config: ScmConfig, n: int, seed: int | None = None) -> list[PairedExample]:
    """``n`` toxic/non-toxic pairs sharing topic and exogenous noise."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = make_rng(config.seed if seed is None else seed)
    noise = _draw_noise(config, n, rng)
    plus = _realize(config, noise, np.ones(n, dtype=int))
    minus = _realize(config, noise, np.zeros(n, dtype=int))
    return [PairedExample(i, plus[i], minus[i], int(noise.topic[i])) for i in range(n)]


def sample_corpus(config: ScmConfig, n: int, seed: int | None = None):
    """Observational sequences: T drawn from its topic prior. Returns (tokens, T, topic)."""
    rng = make_rng(config.seed if seed is None else seed)
    noise = _draw_noise(config, n, rng)
    T = (noise.u_tox < config.topic_tox_prior()[noise.topic]).astype(np.int64)
    return _realize(config, noise, T), T, noise.topic


def marker_counts(config: ScmConfig, tokens) -> tuple[np.ndarray, np.ndarray]:
    """(marker count, content length) per sequence; topic tokens are not content."""
    t = np.atleast_2d(np.asarray(tokens))
    is_marker = t < config.n_markers
    is_topic = (t >= config.n_markers) & (t < config.n_markers + config.n_topics)
    return is_marker.sum(-1), (~is_topic).sum(-1)


def posterior_from_counts(config: ScmConfig, m, n) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    n = np.asarray(n, dtype=float)
    q1, q0 = config.rate_toxic, config.rate_clean
    p = config.prior()
    ll1 = m * math.log(q1) + (n - m) * math.log1p(-q1)
    with np.errstate(divide="ignore"):
        ll0 = m * (math.log(q0) if q0 > 0 else -np.inf) + (n - m) * math.log1p(-q0)
    logit = math.log(p) - math.log1p(-p) + ll1 - ll0
    return 1.0 / (1.0 + np.exp(-np.clip(logit, -700, 700)))


def toxicity_oracle(tokens, config: ScmConfig | None = None):
    """Exact posterior P(T = 1 | marker count) for one sequence or a batch."""
    config = config or ScmConfig()
    arr = np.asarray(tokens)
    if arr.ndim == 1 and arr.size == 0:
        return config.prior()
    m, n = marker_counts(config, arr)
    post = posterior_from_counts(config, m, n)
    return float(post[0]) if arr.ndim == 1 else post


def bayes_nll(config: ScmConfig, tokens) -> np.ndarray:
    """Per-position NLL under the exact predictive distribution, shape (n, L-1).

    The topic is read off the first token; the toxicity bit is integrated out.
    """
    t = np.atleast_2d(np.asarray(tokens))
    topic = t[:, 0] - config.n_markers
    if np.any((topic < 0) | (topic >= config.n_topics)):
        raise ValidationError("first token must be a topic token")
    q1, q0 = config.rate_toxic, config.rate_clean
    prior = config.topic_tox_prior()[topic]
    body = t[:, 1:]
    is_m = body < config.n_markers
    m_before = np.concatenate([np.zeros((len(t), 1)), np.cumsum(is_m, 1)[:, :-1]], 1)
    k_before = np.arange(body.shape[1])[None, :] - m_before
    with np.errstate(divide="ignore"):
        lq0 = math.log(q0) if q0 > 0 else -np.inf
    logit = (np.log(prior) - np.log1p(-prior))[:, None] + m_before * (math.log(q1) - lq0) \
        + k_before * (math.log1p(-q1) - math.log1p(-q0))
    post = 1.0 / (1.0 + np.exp(-np.clip(logit, -700, 700)))
    p_marker = post * q1 + (1 - post) * q0
    mdist = np.stack([config.marker_dist(c) for c in range(config.n_topics)])[topic]
    ndist = np.stack([config.neutral_dist(c) for c in range(config.n_topics)])[topic]
    rows = np.arange(len(t))[:, None]
    tok_m = np.clip(body, 0, config.n_markers - 1)
    tok_n = np.clip(body - config.n_markers - config.n_topics, 0, config.n_neutral - 1)
    p_tok = np.where(is_m, p_marker * mdist[rows, tok_m], (1 - p_marker) * ndist[rows, tok_n])
    with np.errstate(divide="ignore"):  # impossible tokens get infinite NLL
        return -np.log(p_tok)


def analytic_entropy(config: ScmConfig, n: int = 20000, seed: int = 12345) -> float:
    """Bayes-optimal cross-entropy per predicted token (nats), averaged over n sampled sequences."""
    tokens, _, _ = sample_corpus(config, n, seed=seed)
    return float(bayes_nll(config, tokens).mean())


# -- corpus file --------------------------------------------------------------
#
# Text, one record per line after the header:
#   pair_id <TAB> variant (toxic|nontoxic|sample) <TAB> topic <TAB> y <TAB> space-separated token ids


def write_corpus(path, pairs: Sequence[PairedExample] = (), samples=None) -> None:
    lines = [CORPUS_HEADER]
    for p in pairs:
        for variant, x, y in (("toxic", p.x_plus, p.y_plus), ("nontoxic", p.x_minus, p.y_minus)):
            lines.append(f"{p.pair_id}\t{variant}\t{p.topic}\t{y}\t{' '.join(map(str, x))}")
    if samples is not None:
        tokens, T, topic = samples
        for i, (x, y, c) in enumerate(zip(tokens, T, topic)):
            lines.append(f"{i}\tsample\t{int(c)}\t{int(y)}\t{' '.join(map(str, x))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_corpus(path):
    """Returns (pairs, samples) where samples is (tokens list, T, topic) or None."""
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != CORPUS_HEADER:
        raise FormatError(f"{path}: missing corpus header")
    halves: dict[int, dict] = {}
    s_tok, s_y, s_c = [], [], []
    for ln, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise FormatError(f"{path}:{ln}: expected 5 tab-separated fields")
        pid, variant, topic, y, toks = parts
        x = np.array([int(t) for t in toks.split()], dtype=np.int64)
        if variant == "sample":
            s_tok.append(x)
            s_y.append(int(y))
            s_c.append(int(topic))
        elif variant in ("toxic", "nontoxic"):
            rec = halves.setdefault(int(pid), {"topic": int(topic)})
            rec[variant] = (x, int(y))
        else:
            raise FormatError(f"{path}:{ln}: unknown variant {variant!r}")
    pairs = []
    for pid in sorted(halves):
        rec = halves[pid]
        if "toxic" not in rec or "nontoxic" not in rec:
            raise FormatError(f"{path}: pair {pid} is missing a variant")
        (xp, yp), (xm, ym) = rec["toxic"], rec["nontoxic"]
        pairs.append(PairedExample(pid, xp, xm, rec["topic"], yp, ym))
    samples = None
    if s_tok:
        samples = (np.stack(s_tok) if len({len(s) for s in s_tok}) == 1 else s_tok,
                   np.array(s_y), np.array(s_c))
    return pairs, samples


# -- counterfactual oracles ------------------------------------------------------


class CounterfactualOracle(Protocol):
    """Binary feature Z and outcome Y with exact counterfactual outcomes.

    ``outcome(z)`` returns Y(Z = z) for every sample. Implementations satisfy
    consistency: ``outcome(Z[i])[i] == Y[i]``.
    """

    Z: np.ndarray
    Y: np.ndarray

    def outcome(self, z: int) -> np.ndarray: ...


class ScmOracle:
    """Counterfactuals of the label Y under interventions on an SCM-level bit.

    ``feature="toxicity"`` intervenes on T itself (Y = T xor label noise);
    ``feature="independent"`` is an exogenous coin with no edge into Y.
    """

    def __init__(self, config: ScmConfig, n: int, feature: str = "toxicity", seed: int = 0):
        rng = make_rng(seed)
        noise = _draw_noise(config, n, rng)
        self.T = (noise.u_tox < config.topic_tox_prior()[noise.topic]).astype(int)
        self.flip = (noise.u_label < config.label_noise).astype(int)
        self.feature = feature
        if feature == "toxicity":
            self.Z = self.T.copy()
        elif feature == "independent":
            self.Z = (rng.random(n) < 0.5).astype(int)
        else:
            raise ValidationError(f"unknown feature {feature!r}")
        self.Y = self.outcome_for(self.Z)

    def outcome_for(self, z_vec) -> np.ndarray:
        if self.feature == "toxicity":
            return np.asarray(z_vec) ^ self.flip
        return self.T ^ self.flip

    def outcome(self, z: int) -> np.ndarray:
        return self.outcome_for(np.full(len(self.Z), int(z)))


@dataclass
class PnsEstimate:
    PN: float
    PS: float
    PNS: float
    p_zy: float  # P(Z = z, Y = y)
    p_not_zy: float  # P(Z != z, Y != y)
    n: int


def exact_pns(oracle: CounterfactualOracle, z: int = 1, y: int = 1) -> PnsEstimate:
    """Monte-Carlo PN, PS, PNS over the oracle's samples, with exact counterfactuals."""
    Z = np.asarray(oracle.Z).astype(int)
    Y = np.asarray(oracle.Y).astype(int)
    y_z = np.asarray(oracle.outcome(z)).astype(int)
    y_notz = np.asarray(oracle.outcome(1 - z)).astype(int)
    cond_n = (Z == z) & (Y == y)
    cond_s = (Z != z) & (Y != y)
    if not cond_n.any() or not cond_s.any():
        raise UndefinedConditional("conditioning event for PN or PS has zero support")
    pn = float(np.mean(y_notz[cond_n] != y))
    ps = float(np.mean(y_z[cond_s] == y))
    pns = float(np.mean((y_notz != y) & (y_z == y)))
    return PnsEstimate(pn, ps, pns, float(cond_n.mean()), float(cond_s.mean()), len(Z))


class HeadPatchOracle:
    """Counterfactuals for a binarized head feature inside a trained model.

    Z is ``beta . z > median`` for the head's last-position activation z; Y is
    whether the model's next-token probability mass on marker tokens exceeds
    ``threshold`` (``"median"`` = the population median, so Y is balanced).
    Y(Z = z') for a sample whose feature differs from z' is obtained by adding
    ``mean(z | Z = z') - mean(z | Z = z)`` to the head output at the last
    position and re-running the model; samples already at z' keep their
    factual outcome, so consistency holds by construction.
    """

    def __init__(self, model, prompts, head, beta, marker_ids, threshold="median",
                 batch_size: int = 2048):
        from .toylm import HookAction, forward_with_hooks

        self._fwd, self._hook = forward_with_hooks, HookAction
        self.model, self.head = model, head
        self.prompts = np.asarray(prompts)
        self.marker_ids = np.asarray(marker_ids)
        self.batch_size = batch_size
        cap = [HookAction.capture(head, positions="last")]
        acts, mass = [], []
        for s in range(0, len(self.prompts), batch_size):
            lg, caps = forward_with_hooks(model, self.prompts[s:s + batch_size], cap)
            acts.append(caps[head][:, -1])
            mass.append(self._marker_mass(lg))
        z = np.concatenate(acts)
        self.mass = np.concatenate(mass)
        proj = z @ np.asarray(beta, dtype=np.float64)
        self.Z = (proj > np.median(proj)).astype(int)
        if self.Z.min() == self.Z.max():
            raise UndefinedConditional("binarized feature is constant")
        self.means = {v: z[self.Z == v].mean(0) for v in (0, 1)}
        self.threshold = float(np.median(self.mass)) if threshold == "median" else float(threshold)
        self.Y = (self.mass > self.threshold).astype(int)
        self._cache: dict[int, np.ndarray] = {}

    def _marker_mass(self, logits) -> np.ndarray:
        last = logits[:, -1]
        last = last - last.max(-1, keepdims=True)
        p = np.exp(last)
        p /= p.sum(-1, keepdims=True)
        return p[:, self.marker_ids].sum(-1)

    def outcome(self, z: int) -> np.ndarray:
        z = int(z)
        if z not in self._cache:
            flip = np.flatnonzero(self.Z != z)
            out = self.Y.copy()
            shift = self.means[z] - self.means[1 - z]
            for s in range(0, len(flip), self.batch_size):
                idx = flip[s:s + self.batch_size]
                hook = self._hook.add(self.head, shift, positions="last")
                lg, _ = self._fwd(self.model, self.prompts[idx], [hook])
                out[idx] = (self._marker_mass(lg) > self.threshold).astype(int)
            self._cache[z] = out
        return self._cache[z]


def marker_logodds_gap(model, toxic_prompts, clean_prompts, marker_ids, hooks=()) -> float:
    """Mean log-odds of next-token marker mass on toxic prompts minus clean prompts."""
    from .toylm import forward_with_hooks

    def logodds(prompts):
        lg, _ = forward_with_hooks(model, prompts, hooks)
        last = lg[:, -1] - lg[:, -1].max(-1, keepdims=True)
        p = np.exp(last)
        p /= p.sum(-1, keepdims=True)
        q = np.clip(p[:, marker_ids].sum(-1), 1e-12, 1 - 1e-12)
        return np.log(q / (1 - q))

    return float(np.mean(logodds(toxic_prompts)) - np.mean(logodds(clean_prompts)))


def masking_impact(model, toxic_prompts, clean_prompts, marker_ids) -> dict:
    """Per head: drop in the toxic-vs-clean marker log-odds gap when that head is zeroed."""
    from .toylm import HookAction

    base = marker_logodds_gap(model, toxic_prompts, clean_prompts, marker_ids)
    return {h: base - marker_logodds_gap(model, toxic_prompts, clean_prompts, marker_ids,
                                         [HookAction.zero(h)])
            for h in model.cfg.all_heads()}


def planted_heads(impact: dict, rel_threshold: float = 0.5, max_heads: int | None = None) -> list:
    """Ground-truth causal heads: impact >= rel_threshold * the largest impact, best first."""
    top = max(impact.values())
    if top <= 0:
        return []
    chosen = sorted((h for h, v in impact.items() if v >= rel_threshold * top),
                    key=lambda h: (-impact[h], h))
    return chosen[:max_heads] if max_heads is not None else chosen


def config_dict(cfg: ScmConfig) -> dict:
    d = asdict(cfg)
    if d["topic_weights"] is not None:
        d["topic_weights"] = list(d["topic_weights"])
    return d
