"""End-to-end experiments with the 2-fold protocol, metrics and reports.

Each fold's pairs fit the factor model, score and select heads, and build
steering vectors; the other fold's toxic prompts are continued and scored.
Rows are averaged over the two role assignments.

Metrics per configuration:

* ``toxicity`` — oracle posterior of the toxicity bit given the continuation
  ("oracle-toxicity"; not comparable to classifier scores),
* ``perplexity`` — the unsteered base model's perplexity on the continuation,
* ``entropy`` — mean next-token entropy of the intervened model along the
  generated positions (a fluency canary).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .confounder import fit_factor_model
from .errors import HeadSteerError, PipelineError, ValidationError
from .numerics import derive_seed
from .pns import HeadScoreTable, HeadSet, make_folds, probe_baseline, random_heads, score_all_heads, select_heads
from .steer import (InterventionConfig, SteeringBundle, build_index, compute_global, mask_hooks,
                    steering_offsets, intervention_hooks)
from .store import ActivationStore, extract
from .synth import ScmConfig, config_dict as scm_dict, generate_pairs, sample_corpus, toxicity_oracle
from .toylm import HeadId, ModelConfig, ToyLM, config_dict as model_dict, generate, train_lm, _as_batch

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ExperimentSpec:
    scm: ScmConfig = ScmConfig()
    model: ModelConfig = ModelConfig()
    n_lm_train: int = 3000
    lm_epochs: int = 4
    lm_lr: float = 3e-3
    lm_batch: int = 64
    n_pairs: int = 2000
    prompt_len: int = 12
    max_new: int = 12
    n_eval: int = 500  # evaluation prompts per fold (0 = all of the held-out fold)
    latent_dim: int = 2
    factor_kind: str = "ppca"
    selection: str = "pns"  # pns | probe | random
    grid: tuple[InterventionConfig, ...] = (InterventionConfig(),)
    n_folds: int = 2
    fold_seed: int = 0
    seed: int = 0
    decode: str = "sampled"
    metrics: tuple[str, ...] = ("toxicity", "perplexity", "entropy")

    def __post_init__(self):
        if not self.grid:
            raise ValidationError("intervention grid is empty")
        if self.selection not in ("pns", "probe", "random"):
            raise ValidationError(f"unknown selection {self.selection!r}")
        if self.prompt_len + self.max_new > self.model.context:
            raise ValidationError("prompt_len + max_new exceeds the model context")
        if self.prompt_len > self.scm.seq_len:
            raise ValidationError("prompt_len exceeds the corpus sequence length")
        if self.scm.vocab != self.model.vocab:
            raise ValidationError(f"corpus vocab {self.scm.vocab} != model vocab {self.model.vocab}")

    def seeds(self) -> dict:
        return {"seed": self.seed, "fold_seed": self.fold_seed, "model_seed": self.model.seed,
                "scm_seed": self.scm.seed, "lm_corpus_seed": self.lm_corpus_seed,
                "pairs_seed": self.pairs_seed}

    @property
    def lm_corpus_seed(self) -> int:
        return derive_seed(self.seed, "lm-corpus")

    @property
    def pairs_seed(self) -> int:
        return derive_seed(self.seed, "pairs")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("scm", "model", "grid")}
        d["scm"] = scm_dict(self.scm)
        d["model"] = model_dict(self.model)
        d["grid"] = [asdict(g) for g in self.grid]
        d["metrics"] = list(self.metrics)
        return d


def desk_spec(seed: int = 0, **kw) -> ExperimentSpec:
    """Default desk-scale experiment for ``seed`` (model and corpus seeds derived from it)."""
    kw.setdefault("scm", ScmConfig(seed=seed))
    kw.setdefault("model", ModelConfig(seed=seed))
    return ExperimentSpec(seed=seed, **kw)


def heterogeneous_scm(seed: int = 0) -> ScmConfig:
    """Topics with strongly separated vocabularies and toxicity priors."""
    return ScmConfig(topic_affinity=0.9, topic_tox_spread=0.8, seed=seed)


@dataclass
class MetricsRow:
    config: dict
    toxicity: float
    perplexity: float
    entropy: float
    per_fold: list[dict] = field(default_factory=list)
    timing_ms: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.toxicity <= 1.0:
            raise ValidationError(f"toxicity {self.toxicity} outside [0, 1]")
        if self.perplexity < 1.0 - 1e-9:
            raise ValidationError(f"perplexity {self.perplexity} below 1")


class StageTimer:
    def __init__(self):
        self.ms: dict[str, float] = {}
        self._t0 = time.perf_counter()

    @contextmanager
    def stage(self, name: str):
        t = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except HeadSteerError as e:
            raise PipelineError(name, e) from e
        finally:
            self.ms[name] = self.ms.get(name, 0.0) + 1e3 * (time.perf_counter() - t)

    def total_ms(self) -> float:
        return 1e3 * (time.perf_counter() - self._t0)


# -- testbed -----------------------------------------------------------------------


@dataclass
class Testbed:
    """Trained model plus extracted paired activations for one spec."""

    __test__ = False  # not a pytest class

    spec: ExperimentSpec
    model: ToyLM
    pairs: list
    store: ActivationStore
    timing_ms: dict = field(default_factory=dict)

    def folds(self) -> list[np.ndarray]:
        return make_folds(self.store.pair_ids, self.spec.n_folds, self.spec.fold_seed)

    def toxic_prompts(self, pair_ids) -> np.ndarray:
        ids = set(int(p) for p in pair_ids)
        return np.stack([p.x_plus[:self.spec.prompt_len] for p in self.pairs if p.pair_id in ids])

    def eval_prompts(self, pair_ids) -> np.ndarray:
        """Toxic-variant prompts of the first ``spec.n_eval`` held-out pairs (by pair id)."""
        ids = np.sort(np.asarray(pair_ids))
        if self.spec.n_eval:
            ids = ids[:self.spec.n_eval]
        return self.toxic_prompts(ids)

    def clean_prompts(self, pair_ids) -> np.ndarray:
        ids = set(int(p) for p in pair_ids)
        return np.stack([p.x_minus[:self.spec.prompt_len] for p in self.pairs if p.pair_id in ids])


def build_testbed(spec: ExperimentSpec, model: ToyLM | None = None) -> Testbed:
    timer = StageTimer()
    if model is None:
        with timer.stage("corpus"):
            toks, _, _ = sample_corpus(spec.scm, spec.n_lm_train, seed=spec.lm_corpus_seed)
        with timer.stage("train"):
            model = train_lm(spec.model, toks, epochs=spec.lm_epochs, lr=spec.lm_lr,
                             batch_size=spec.lm_batch)
    with timer.stage("pairs"):
        pairs = generate_pairs(spec.scm, spec.n_pairs, seed=spec.pairs_seed)
    with timer.stage("extract"):
        store = extract(model, pairs, spec.prompt_len)
    return Testbed(spec, model, pairs, store, timer.ms)


# -- evaluation --------------------------------------------------------------------


def evaluate_generation(tb: Testbed, prompts: np.ndarray, hooks_fn=None, seed: int = 0,
                        generator: ToyLM | None = None) -> dict:
    """Continue ``prompts`` under hooks and compute the three metrics.

    ``hooks_fn(prompts) -> list[HookAction]`` builds the intervention for the batch.
    ``generator`` (default: the testbed model) produces the continuations and
    the entropy; perplexity is always scored by the testbed's base model.
    """
    model, spec = tb.model, tb.spec
    gen = generator if generator is not None else model
    P = prompts.shape[1]
    hooks = hooks_fn(prompts) if hooks_fn is not None else []
    seqs, step_logits = generate(gen, prompts, spec.max_new, hooks, seed=seed, decode=spec.decode,
                                 return_logits=True)
    cont = seqs[:, P:]
    tox = float(np.mean(toxicity_oracle(cont, spec.scm)))
    t = _as_batch(seqs)
    with torch.no_grad():
        base_lp = torch.log_softmax(model(t)[:, P - 1:-1], -1)
        nll = -base_lp.gather(-1, t[:, P:].unsqueeze(-1)).squeeze(-1)
        # entropy of the distributions the generator actually sampled from
        lp = torch.log_softmax(torch.as_tensor(step_logits), -1)
        ent = -(lp.exp() * lp).sum(-1)
    return {"toxicity": tox, "perplexity": float(torch.exp(nll.mean())), "entropy": float(ent.mean())}


def _average(per_fold: list[dict]) -> dict:
    return {k: float(np.mean([f[k] for f in per_fold])) for k in ("toxicity", "perplexity", "entropy")}


def _eval_seed(spec: ExperimentSpec, fold: int, tag: str = "decode") -> int:
    return derive_seed(spec.seed, tag, fold)


@dataclass
class FoldArtifacts:
    train_ids: np.ndarray
    eval_ids: np.ndarray
    train: ActivationStore
    factor: object
    table: HeadScoreTable
    probe: HeadScoreTable | None = None


def fold_artifacts(tb: Testbed, with_probe: bool = False) -> list[FoldArtifacts]:
    """Per fold: factor model, PNS score table (and optionally probe table) on that fold's pairs."""
    spec = tb.spec
    folds = tb.folds()
    out = []
    for k, train_ids in enumerate(folds):
        eval_ids = np.concatenate([f for j, f in enumerate(folds) if j != k])
        train = tb.store.select_pairs(train_ids)
        fm = fit_factor_model(train.concat(), spec.latent_dim, spec.factor_kind,
                              seed=derive_seed(spec.seed, "factor", k))
        table = score_all_heads(train, fm)
        probe = probe_baseline(train, seed=derive_seed(spec.seed, "probe", k)) if with_probe else None
        out.append(FoldArtifacts(train_ids, eval_ids, train, fm, table, probe))
    return out


def choose_heads(fa: FoldArtifacts, method: str, K: int, spec: ExperimentSpec, fold: int,
                 all_heads: Sequence[HeadId]) -> HeadSet:
    if method == "pns":
        return select_heads(fa.table, K)
    if method == "probe":
        probe = fa.probe or probe_baseline(fa.train, seed=derive_seed(spec.seed, "probe", fold))
        fa.probe = probe
        return select_heads(probe, K)
    if method == "random":
        return random_heads(all_heads, K, derive_seed(spec.seed, "random-heads", fold))
    raise ValidationError(f"unknown selection {method!r}")


def _config_key(cfg: InterventionConfig, **extra) -> dict:
    d = asdict(cfg)
    d.update(extra)
    return d


def run_pipeline(spec: ExperimentSpec, testbed: Testbed | None = None,
                 include_base: bool = True) -> list[MetricsRow]:
    """Evaluate every grid point with the fold protocol; one fold-averaged row per point."""
    timer = StageTimer()
    with timer.stage("testbed"):
        tb = testbed or build_testbed(spec)
        if tb.spec is not spec:
            tb = Testbed(spec, tb.model, tb.pairs, tb.store, tb.timing_ms)
    with timer.stage("score"):
        arts = fold_artifacts(tb)
    heads_all = tb.model.cfg.all_heads()
    per_cfg: dict[int, list[dict]] = {i: [] for i in range(len(spec.grid))}
    base_folds = []
    for k, fa in enumerate(arts):
        prompts = tb.eval_prompts(fa.eval_ids)
        seed = _eval_seed(spec, k)
        if include_base:
            with timer.stage("evaluate"):
                base_folds.append(evaluate_generation(tb, prompts, None, seed))
        bundles: dict[int, tuple[SteeringBundle, object]] = {}
        for i, cfg in enumerate(spec.grid):
            with timer.stage("select"):
                hs = choose_heads(fa, spec.selection, cfg.K, spec, k, heads_all)
            with timer.stage("vectors"):
                if cfg.K not in bundles:
                    index = build_index(fa.train) if cfg.mode in ("local", "shuffled") else None
                    bundles[cfg.K] = (compute_global(fa.train, hs), index)
                bundle, index = bundles[cfg.K]
                if index is None and cfg.mode in ("local", "shuffled"):
                    index = build_index(fa.train)
                    bundles[cfg.K] = (bundle, index)
            with timer.stage("evaluate"):
                per_cfg[i].append(evaluate_generation(
                    tb, prompts, _hooks_for(tb, bundle, index, cfg, hs, spec, k), seed))
    rows = []
    if include_base:
        rows.append(MetricsRow({"mode": "base"}, **_average(base_folds), per_fold=base_folds))
    for i, cfg in enumerate(spec.grid):
        rows.append(MetricsRow(_config_key(cfg, selection=spec.selection), **_average(per_cfg[i]),
                               per_fold=per_cfg[i]))
    timing = dict(timer.ms)
    if testbed is None:  # split the testbed stage into its own sub-stages
        for k, v in tb.timing_ms.items():
            timing["testbed." + k] = v
        timing["testbed"] -= sum(tb.timing_ms.values())
    timing["total"] = timer.total_ms()
    for r in rows:
        r.timing_ms = timing
    return rows


def _hooks_for(tb: Testbed, bundle: SteeringBundle, index, cfg: InterventionConfig, hs: HeadSet,
               spec: ExperimentSpec, fold: int):
    if cfg.mode == "mask":
        return lambda prompts: mask_hooks(list(hs), min(cfg.M, len(hs)) if cfg.M else len(hs))

    if index is not None and cfg.top_k > len(index):
        cfg = replace(cfg, top_k=len(index))

    def hooks(prompts):
        offs = steering_offsets(bundle, cfg, prompts, tb.model, index,
                                shuffle_seed=derive_seed(spec.seed, "shuffle", fold), heads=list(hs))
        return intervention_hooks(offs, prompts.shape[1] - 1)

    return hooks


def masking_sweep(spec: ExperimentSpec, Ms: Sequence[int] = tuple(range(9)),
                  methods: Sequence[str] = ("pns", "probe"), testbed: Testbed | None = None) -> list[dict]:
    """Rows (M, method, toxicity, perplexity, entropy): top-M heads of each ranking zeroed."""
    tb = testbed or build_testbed(spec)
    arts = fold_artifacts(tb, with_probe="probe" in methods)
    n_heads = tb.model.cfg.n_total_heads
    rows = []
    done: dict = {}  # identical masked sets (e.g. M=0) are evaluated once per fold
    for method in methods:
        for M in Ms:
            per_fold = []
            for k, fa in enumerate(arts):
                ranking = choose_heads(fa, method, n_heads, spec, k, tb.model.cfg.all_heads()).heads
                key = (k, frozenset(ranking[:M]))
                if key not in done:
                    hooks = mask_hooks(ranking, M)
                    done[key] = evaluate_generation(tb, tb.eval_prompts(fa.eval_ids),
                                                    lambda p, h=hooks: h, _eval_seed(spec, k))
                per_fold.append(done[key])
            rows.append({"M": M, "method": method, **_average(per_fold)})
    return rows


def leakage_controls(spec: ExperimentSpec, cfg: InterventionConfig | None = None,
                     testbed: Testbed | None = None) -> list[dict]:
    """Random/probe/PNS heads with retrieval, and PNS with the shuffled control, same budget."""
    cfg = cfg or InterventionConfig(mode="local")
    if cfg.mode != "local":
        cfg = replace(cfg, mode="local")
    tb = testbed or build_testbed(spec)
    conditions = [("random+retrieval", "random", "local"), ("probe+retrieval", "probe", "local"),
                  ("pns+retrieval", "pns", "local"), ("pns+shuffled", "pns", "shuffled")]
    rows = []
    base = run_pipeline(replace(spec, grid=(InterventionConfig(alpha=0.0),)), tb)[0]
    rows.append({"condition": "base", "toxicity": base.toxicity, "perplexity": base.perplexity,
                 "entropy": base.entropy})
    for name, method, mode in conditions:
        s = replace(spec, selection=method, grid=(replace(cfg, mode=mode),))
        r = run_pipeline(s, tb, include_base=False)[0]
        rows.append({"condition": name, "toxicity": r.toxicity, "perplexity": r.perplexity,
                     "entropy": r.entropy})
    tox = {r["condition"]: r["toxicity"] for r in rows}
    aligned = tox["pns+retrieval"]
    lowest = all(aligned < v for c, v in tox.items() if c not in ("pns+retrieval", "base"))
    for r in rows:
        r["pns_aligned_lowest"] = lowest
    if not lowest:
        log.warning("PNS-aligned retrieval is not the strictly lowest-toxicity condition")
    return rows


def transfer_run(spec: ExperimentSpec, shifted: ScmConfig, testbed: Testbed | None = None,
                 n_eval: int = 1000) -> list[dict]:
    """Vectors from ``spec.scm`` pairs, evaluated on prompts drawn from ``shifted``."""
    tb = testbed or build_testbed(spec)
    arts = fold_artifacts(tb)
    eval_pairs = generate_pairs(shifted, n_eval, seed=derive_seed(spec.seed, "transfer"))
    prompts = np.stack([p.x_plus[:spec.prompt_len] for p in eval_pairs])
    shifted_tb = Testbed(replace(spec, scm=shifted), tb.model, eval_pairs, tb.store)
    rows = []
    base = [evaluate_generation(shifted_tb, prompts, None, _eval_seed(spec, k, "transfer"))
            for k in range(len(arts))]
    rows.append({"config": {"mode": "base"}, **_average(base)})
    for cfg in spec.grid:
        per_fold = []
        for k, fa in enumerate(arts):
            hs = choose_heads(fa, spec.selection, cfg.K, spec, k, tb.model.cfg.all_heads())
            bundle = compute_global(fa.train, hs)
            index = build_index(fa.train) if cfg.mode in ("local", "shuffled") else None
            per_fold.append(evaluate_generation(shifted_tb, prompts,
                                                _hooks_for(tb, bundle, index, cfg, hs, spec, k),
                                                _eval_seed(spec, k, "transfer")))
        rows.append({"config": _config_key(cfg), **_average(per_fold)})
    return rows


def finetune_run(spec: ExperimentSpec, testbed: Testbed | None = None, K: int | None = None,
                 n_ref: int = 256, **ft_kw) -> dict:
    """Fine-tune on each fold's pairs, evaluate without steering on the other fold.

    Returns fold-averaged ``base`` and ``tuned`` metrics, the per-fold reports
    and the relative toxicity / perplexity changes.
    """
    from .finetune import FinetuneConfig, FinetuneData, finetune_pns

    tb = testbed or build_testbed(spec)
    K = K if K is not None else max(1, tb.model.cfg.n_total_heads // 4)
    base_f, tuned_f, reports = [], [], []
    for k, fa in enumerate(fold_artifacts(tb)):
        hs = select_heads(fa.table, K)
        eval_set = set(fa.eval_ids.tolist())
        ref = np.stack([p.x_minus for p in tb.pairs if p.pair_id in eval_set])[:n_ref]
        data = FinetuneData(fa.train.tokens, fa.train.labels, fa.factor, ref)
        cfg = FinetuneConfig(tuple(hs), seed=derive_seed(spec.seed, "finetune", k), **ft_kw)
        tuned, report = finetune_pns(tb.model, data, cfg)
        prompts = tb.eval_prompts(fa.eval_ids)
        seed = _eval_seed(spec, k)
        base_f.append(evaluate_generation(tb, prompts, None, seed))
        tuned_f.append(evaluate_generation(tb, prompts, None, seed, generator=tuned))
        report.toxicity_delta = tuned_f[-1]["toxicity"] - base_f[-1]["toxicity"]
        report.perplexity_delta = tuned_f[-1]["perplexity"] - base_f[-1]["perplexity"]
        reports.append(report)
    base, tuned = _average(base_f), _average(tuned_f)
    return {"base": base, "tuned": tuned, "reports": reports,
            "toxicity_rel_change": tuned["toxicity"] / base["toxicity"] - 1.0,
            "perplexity_rel_change": tuned["perplexity"] / base["perplexity"] - 1.0}


def bench(spec: ExperimentSpec, testbed: Testbed | None = None, repeats: int = 3,
          n_queries: int = 100) -> dict:
    """Wall-clock of PNS scoring vs. probe training, retrieval latency, per-token steering overhead."""
    tb = testbed or build_testbed(spec)
    train = tb.store.select_pairs(tb.folds()[0])
    fm = fit_factor_model(train.concat(), spec.latent_dim, spec.factor_kind)

    def best(fn):
        ts = []
        for _ in range(repeats):
            t = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t)
        return 1e3 * min(ts)

    pns_ms = best(lambda: score_all_heads(train, fm))
    probe_ms = best(lambda: probe_baseline(train))
    index = build_index(train)
    keys = tb.store.keys[:n_queries]
    top_k = min(InterventionConfig().top_k, len(index))
    retrieval_ms = best(lambda: [index.query(q, top_k) for q in keys]) / len(keys)
    hs = select_heads(score_all_heads(train, fm), max(1, tb.model.cfg.n_total_heads // 4))
    bundle = compute_global(train, hs)
    prompts = tb.toxic_prompts(tb.folds()[1][:64])
    cfg = InterventionConfig()
    offs = steering_offsets(bundle, cfg, prompts)
    hooks = intervention_hooks(offs, prompts.shape[1] - 1)
    n_tok = len(prompts) * spec.max_new
    plain = best(lambda: generate(tb.model, prompts, spec.max_new, seed=0, decode=spec.decode))
    steered = best(lambda: generate(tb.model, prompts, spec.max_new, hooks, seed=0, decode=spec.decode))
    return {"schema": SCHEMA_VERSION, "seeds": spec.seeds(),
            "pns_scoring_ms": pns_ms, "probe_training_ms": probe_ms,
            "speedup": probe_ms / pns_ms if pns_ms > 0 else float("inf"),
            "retrieval_ms_per_query": retrieval_ms,
            "steering_overhead_ms_per_token": (steered - plain) / n_tok,
            "generation_ms_per_token": plain / n_tok}


# -- reports -----------------------------------------------------------------------


def _flat(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if isinstance(v, dict):
            for kk, vv in v.items():
                out[f"{k}.{kk}"] = vv
        elif isinstance(v, list):
            continue
        else:
            out[k] = v
    return out


def rows_as_dicts(rows) -> list[dict]:
    out = []
    for r in rows:
        if isinstance(r, MetricsRow):
            r = {"config": r.config, "toxicity": r.toxicity, "perplexity": r.perplexity,
                 "entropy": r.entropy}
        out.append(r)
    return out


def report_json(rows, spec: ExperimentSpec, kind: str) -> str:
    """Deterministic JSON report: schema version, seeds and spec in the header, no timings."""
    doc = {"schema": SCHEMA_VERSION, "kind": kind, "seeds": spec.seeds(), "spec": spec.to_dict(),
           "metric_labels": {"toxicity": "oracle-toxicity"}, "rows": rows_as_dicts(rows)}
    return json.dumps(doc, indent=1, sort_keys=True)


def report_csv(rows, spec: ExperimentSpec, kind: str) -> str:
    flat = [_flat(r) for r in rows_as_dicts(rows)]
    cols: list[str] = []
    for r in flat:
        cols += [c for c in r if c not in cols]
    buf = io.StringIO()
    buf.write(f"# schema={SCHEMA_VERSION} kind={kind} seeds={json.dumps(spec.seeds(), sort_keys=True)}\n")
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in flat:
        w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})
    return buf.getvalue()


def write_reports(rows, spec: ExperimentSpec, kind: str, out_dir, timing: dict | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{kind}.json", out / f"{kind}.csv"]
    paths[0].write_text(report_json(rows, spec, kind))
    paths[1].write_text(report_csv(rows, spec, kind))
    if timing is not None:
        side = out / f"{kind}.timing.json"
        side.write_text(json.dumps(timing, indent=1, sort_keys=True))
        paths.append(side)
    return paths
