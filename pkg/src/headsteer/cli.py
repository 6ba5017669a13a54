"""Command-line entry point: ``headsteer [--seed N] [--config FILE] [--out DIR] <command> ...``.

Every command reads and updates ``<out>/state.json``, which records each
artifact's path and SHA-256. Inputs are re-hashed before any computation and
a mismatch aborts the command. Exit codes: 0 success, 2 invalid input or
usage, 1 runtime failure.

Staged commands work on one split: pairs in fold 0 (of the configured 2-fold
partition) are the fitting half, the remaining pairs are evaluated. ``eval``,
``sweep`` and ``controls`` run the full 2-fold protocol on the trained model.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import confounder, harness, pns, steer, store, synth, toylm
from .errors import FormatError, HeadSteerError, PipelineError, StageOrderError, ValidationError
from .finetune import FinetuneConfig, FinetuneData, finetune_pns, kl_regularizer
from .numerics import derive_seed
from .toylm import HeadId

log = logging.getLogger("headsteer")

STATE_FILE = "state.json"
STATE_SCHEMA = 1

# artifact name -> file name
ARTIFACTS = {
    "corpus": "corpus.txt",
    "lm_corpus": "lm_corpus.txt",
    "model": "model.hslm",
    "acts": "acts.cdtx",
    "factor": "factor.npz",
    "scores": "scores.json",
    "heads": "heads.json",
    "bundle": "bundle.hssb",
    "tuned_model": "model_tuned.hslm",
}

# which earlier command produces each artifact (for ordering messages)
PRODUCER = {"corpus": "gen-corpus", "lm_corpus": "gen-corpus", "model": "train-lm", "acts": "extract",
            "factor": "fit-confounder", "scores": "score", "heads": "select", "bundle": "vectors",
            "tuned_model": "finetune"}


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class PipelineState:
    """Artifact registry with content hashes, persisted as JSON in the output directory."""

    def __init__(self, out: Path, seed: int, config: dict):
        self.out = out
        self.seed = seed
        self.config = config
        self.artifacts: dict[str, dict] = {}

    @classmethod
    def load(cls, out: Path, seed: int, config: dict) -> PipelineState:
        st = cls(out, seed, config)
        f = out / STATE_FILE
        if f.exists():
            doc = json.loads(f.read_text())
            if doc.get("schema") != STATE_SCHEMA:
                raise FormatError(f"{f}: unsupported state schema {doc.get('schema')}")
            st.artifacts = doc.get("artifacts", {})
        return st

    def save(self) -> None:
        doc = {"schema": STATE_SCHEMA, "artifacts": self.artifacts}
        (self.out / STATE_FILE).write_text(json.dumps(doc, indent=1, sort_keys=True))

    def path(self, name: str) -> Path:
        return self.out / ARTIFACTS[name]

    def require(self, *names: str) -> dict[str, Path]:
        """Check presence and hashes of the named artifacts before any work."""
        out = {}
        for n in names:
            if n not in self.artifacts:
                raise StageOrderError(f"missing artifact {n!r}: run `{PRODUCER[n]}` first")
            p = self.out / self.artifacts[n]["path"]
            if not p.exists():
                raise FormatError(f"{p} listed in state but missing")
            if sha256(p) != self.artifacts[n]["sha256"]:
                raise FormatError(f"hash mismatch for {p}; state is stale or the file was modified")
            out[n] = p
        return out

    def record(self, name: str) -> None:
        p = self.path(name)
        self.artifacts[name] = {"path": p.name, "sha256": sha256(p)}
        self.save()


# -- configuration -------------------------------------------------------------


def _dc(cls, d: dict | None, **defaults):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    for k, v in defaults.items():
        d.setdefault(k, v)
    if "topic_weights" in d and d["topic_weights"] is not None:
        d["topic_weights"] = tuple(d["topic_weights"])
    try:
        return cls(**d)
    except TypeError as e:
        raise ValidationError(f"bad {cls.__name__} config: {e}") from None


EXPERIMENT_KEYS = ("n_lm_train", "lm_epochs", "lm_lr", "lm_batch", "n_pairs", "prompt_len", "max_new",
                   "n_eval", "latent_dim", "factor_kind", "selection", "n_folds", "fold_seed", "decode")


def spec_from_config(config: dict, seed: int, grid=None) -> harness.ExperimentSpec:
    """Config JSON: {"scm": {...}, "model": {...}, "experiment": {...}, "intervention": {...}, "grid": [...]}"""
    scm = _dc(synth.ScmConfig, config.get("scm"), seed=seed)
    model = _dc(toylm.ModelConfig, config.get("model"), seed=seed, vocab=scm.vocab)
    exp = dict(config.get("experiment", {}))
    bad = set(exp) - set(EXPERIMENT_KEYS)
    if bad:
        raise ValidationError(f"unknown experiment keys: {sorted(bad)}")
    if grid is None:
        if "grid" in config:
            grid = tuple(_dc(steer.InterventionConfig, g) for g in config["grid"])
        else:
            grid = (intervention_from_config(config),)
    return harness.ExperimentSpec(scm=scm, model=model, seed=seed, grid=tuple(grid), **exp)


def intervention_from_config(config: dict, **override) -> steer.InterventionConfig:
    d = dict(config.get("intervention", {}))
    d.update({k: v for k, v in override.items() if v is not None})
    return _dc(steer.InterventionConfig, d)


# -- shared loaders --------------------------------------------------------------


def _pairs(state: PipelineState):
    pairs, _ = synth.read_corpus(state.require("corpus")["corpus"])
    return pairs


def _split(spec, acts: store.ActivationStore):
    folds = pns.make_folds(acts.pair_ids, spec.n_folds, spec.fold_seed)
    train_ids = folds[0]
    eval_ids = np.concatenate(folds[1:])
    return train_ids, eval_ids


def _testbed(state: PipelineState, spec, model_name="model") -> harness.Testbed:
    paths = state.require(model_name, "corpus", "acts")
    model = toylm.load_checkpoint(paths[model_name])
    pairs, _ = synth.read_corpus(paths["corpus"])
    if model_name == "model":
        acts = store.read_dump(paths["acts"])
        acts.tokens = _prompts_for(acts, pairs, spec.prompt_len)
    else:  # a tuned model's activations differ from the dump's
        acts = store.extract(model, pairs, spec.prompt_len)
    return harness.Testbed(spec, model, pairs, acts)


def _prompts_for(acts: store.ActivationStore, pairs, prompt_len: int) -> np.ndarray:
    """The dump does not persist prompts; rebuild them from the corpus by (pair id, variant)."""
    by_id = {p.pair_id: p for p in pairs}
    try:
        return np.stack([(by_id[int(i)].x_plus if v == store.TOXIC else by_id[int(i)].x_minus)[:prompt_len]
                         for i, v in zip(acts.pair_ids, acts.variant)])
    except KeyError as e:
        raise FormatError(f"activation dump refers to pair {e} missing from the corpus") from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


# -- commands --------------------------------------------------------------------


def cmd_gen_corpus(args, state, spec):
    pairs = synth.generate_pairs(spec.scm, args.n_pairs or spec.n_pairs, seed=spec.pairs_seed)
    synth.write_corpus(state.path("corpus"), pairs)
    state.record("corpus")
    samples = synth.sample_corpus(spec.scm, args.n_lm or spec.n_lm_train, seed=spec.lm_corpus_seed)
    synth.write_corpus(state.path("lm_corpus"), samples=samples)
    state.record("lm_corpus")
    print(f"wrote {len(pairs)} pairs and {len(samples[0])} training sequences")


def cmd_train_lm(args, state, spec):
    p = state.require("lm_corpus")["lm_corpus"]
    _, samples = synth.read_corpus(p)
    if samples is None:
        raise ValidationError("lm corpus holds no sample sequences")
    model = toylm.train_lm(spec.model, samples[0], epochs=args.epochs or spec.lm_epochs,
                           lr=args.lr or spec.lm_lr, batch_size=spec.lm_batch)
    toylm.save_checkpoint(model, state.path("model"))
    state.record("model")
    held = synth.sample_corpus(spec.scm, 500, seed=derive_seed(spec.seed, "heldout"))[0]
    print(f"held-out perplexity {toylm.perplexity(model, held):.3f}")


def cmd_extract(args, state, spec):
    paths = state.require("model", "corpus")
    model = toylm.load_checkpoint(paths["model"])
    pairs, _ = synth.read_corpus(paths["corpus"])
    acts = store.extract(model, pairs, spec.prompt_len)
    store.write_dump(acts, state.path("acts"))
    state.record("acts")
    print(f"extracted {len(acts)} records x {acts.n_layers * acts.n_heads} heads")


def cmd_fit_confounder(args, state, spec):
    acts = store.read_dump(state.require("acts")["acts"])
    train_ids, _ = _split(spec, acts)
    train = acts.select_pairs(train_ids)
    fm = confounder.fit_factor_model(train.concat(), args.latent_dim or spec.latent_dim,
                                     args.kind or spec.factor_kind, seed=derive_seed(spec.seed, "factor", 0))
    state.path("factor").write_bytes(confounder.to_bytes(fm))
    state.record("factor")
    print(f"fit {fm.kind} factor model, d_c = {fm.latent_dim}")


def cmd_score(args, state, spec):
    paths = state.require("acts", "factor")
    acts = store.read_dump(paths["acts"])
    fm = confounder.from_bytes(paths["factor"].read_bytes())
    train = acts.select_pairs(_split(spec, acts)[0])
    if args.method == "probe":
        table = pns.probe_baseline(train, seed=derive_seed(spec.seed, "probe", 0))
    else:
        table = pns.score_all_heads(train, fm)
    state.path("scores").write_text(table.to_json())
    (state.out / "scores.csv").write_text(table.to_csv())
    state.record("scores")
    for h in table.ranking()[:5]:
        print(f"{h}\t{table.mean_scores()[h]:.6g}")


def cmd_select(args, state, spec):
    table = pns.HeadScoreTable.from_json(state.require("scores")["scores"].read_text())
    K = args.K if args.K is not None else _intervention(args, state.config, spec).K
    hs = pns.select_heads(table, K)
    _write_json(state.path("heads"), {"schema": 1, "criterion": hs.criterion,
                                      "heads": [[h.layer, h.head] for h in hs]})
    state.record("heads")
    print("selected", " ".join(map(str, hs)))


def _heads(state) -> pns.HeadSet:
    doc = json.loads(state.require("heads")["heads"].read_text())
    return pns.HeadSet([HeadId(l, h) for l, h in doc["heads"]], doc["criterion"])


def cmd_vectors(args, state, spec):
    hs = _heads(state)
    acts = store.read_dump(state.require("acts")["acts"])
    bundle = steer.compute_global(acts.select_pairs(_split(spec, acts)[0]), hs)
    steer.save_bundle(bundle, state.path("bundle"))
    state.record("bundle")
    print(f"steering vectors for {len(bundle.active_heads())}/{len(hs)} heads")


def _intervention(args, config, spec) -> steer.InterventionConfig:
    """The config's "intervention" section (else the first grid point), with flag overrides."""
    base = intervention_from_config(config) if "intervention" in config else spec.grid[0]
    over = {k: getattr(args, k, None) for k in ("alpha", "tau", "lam", "top_k", "mode")}
    return replace(base, **{k: v for k, v in over.items() if v is not None})


def cmd_steer(args, state, spec):
    state.require("heads", "bundle")
    tb = _testbed(state, spec)
    bundle = steer.load_bundle(state.require("bundle")["bundle"])
    cfg = _intervention(args, state.config, spec)
    train_ids, eval_ids = _split(spec, tb.store)
    index = steer.build_index(tb.store.select_pairs(train_ids)) if cfg.mode in ("local", "shuffled") else None
    prompts = tb.eval_prompts(eval_ids)
    seed = derive_seed(spec.seed, "decode", 0)
    hs = _heads(state)
    base = harness.evaluate_generation(tb, prompts, None, seed)
    steered = harness.evaluate_generation(
        tb, prompts, harness._hooks_for(tb, bundle, index, cfg, hs, spec, 0), seed)
    rows = [{"config": {"mode": "base"}, **base}, {"config": asdict(cfg), **steered}]
    harness.write_reports(rows, spec, "steer", state.out)
    print(f"toxicity {base['toxicity']:.4f} -> {steered['toxicity']:.4f}; "
          f"perplexity {base['perplexity']:.3f} -> {steered['perplexity']:.3f}")


def cmd_mask(args, state, spec):
    tb = _testbed(state, spec)
    table = pns.HeadScoreTable.from_json(state.require("scores")["scores"].read_text())
    prompts = tb.eval_prompts(_split(spec, tb.store)[1])
    seed = derive_seed(spec.seed, "decode", 0)
    rows = []
    for M in (range(args.M + 1) if args.incremental else [args.M]):
        hooks = steer.mask_hooks(table.ranking(), M)
        rows.append({"M": M, "method": table.method,
                     **harness.evaluate_generation(tb, prompts, lambda p, h=hooks: h, seed)})
    harness.write_reports(rows, spec, "mask", state.out)
    for r in rows:
        print(f"M={r['M']}\ttoxicity {r['toxicity']:.4f}\tperplexity {r['perplexity']:.3f}")


def cmd_finetune(args, state, spec):
    hs = _heads(state)
    paths = state.require("factor")
    tb = _testbed(state, spec)
    fm = confounder.from_bytes(paths["factor"].read_bytes())
    train_ids, eval_ids = _split(spec, tb.store)
    train = tb.store.select_pairs(train_ids)
    ref = np.stack([p.x_minus for p in tb.pairs if p.pair_id in set(eval_ids.tolist())])[:args.n_ref]
    data = FinetuneData(train.tokens, train.labels, fm, ref)
    opts = {k: getattr(args, k) for k in ("lam_reg", "epochs", "lr", "refit_interval")
            if getattr(args, k) is not None}
    cfg = FinetuneConfig(tuple(hs), seed=spec.seed, **opts)
    tuned, report = finetune_pns(tb.model, data, cfg)
    prompts = tb.eval_prompts(eval_ids)
    seed = derive_seed(spec.seed, "decode", 0)
    before = harness.evaluate_generation(tb, prompts, None, seed)
    after = harness.evaluate_generation(tb, prompts, None, seed, generator=tuned)
    report.toxicity_delta = after["toxicity"] - before["toxicity"]
    report.perplexity_delta = after["perplexity"] - before["perplexity"]
    toylm.save_checkpoint(tuned, state.path("tuned_model"))
    state.record("tuned_model")
    (state.out / "finetune_report.json").write_text(report.to_json())
    print(f"toxicity {before['toxicity']:.4f} -> {after['toxicity']:.4f}; "
          f"KL {kl_regularizer(tb.model, tuned, ref):.3e}")


def cmd_eval(args, state, spec):
    tb = _testbed(state, spec, "tuned_model" if args.tuned else "model")
    rows = harness.run_pipeline(spec, tb)
    timing = rows[0].timing_ms if rows else {}
    harness.write_reports(rows, spec, "eval", state.out, timing)
    for r in rows:
        print(f"{json.dumps(r.config, sort_keys=True)}\ttox {r.toxicity:.4f}\tppl {r.perplexity:.3f}")


def cmd_sweep(args, state, spec):
    tb = _testbed(state, spec)
    rows = harness.masking_sweep(spec, tuple(range(args.max_M + 1)), testbed=tb)
    harness.write_reports(rows, spec, "sweep", state.out)
    for r in rows:
        print(f"{r['method']}\tM={r['M']}\ttox {r['toxicity']:.4f}\tppl {r['perplexity']:.3f}")


def cmd_controls(args, state, spec):
    tb = _testbed(state, spec)
    cfg = replace(_intervention(args, state.config, spec), mode="local")
    rows = harness.leakage_controls(spec, cfg, testbed=tb)
    harness.write_reports(rows, spec, "controls", state.out)
    for r in rows:
        print(f"{r['condition']}\ttox {r['toxicity']:.4f}\tppl {r['perplexity']:.3f}")


def cmd_bench(args, state, spec):
    tb = _testbed(state, spec)
    res = harness.bench(spec, tb, repeats=args.repeats)
    # wall-clock numbers are inherently run-dependent, so they go to a sidecar
    _write_json(state.out / "bench.timing.json", res)
    print(f"PNS scoring {res['pns_scoring_ms']:.1f} ms vs probe training {res['probe_training_ms']:.1f} ms "
          f"(ratio {res['speedup']:.2f}x)")
    print(f"retrieval {res['retrieval_ms_per_query']:.3f} ms/query; "
          f"steering overhead {res['steering_overhead_ms_per_token']:.4f} ms/token")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "train-lm": cmd_train_lm, "extract": cmd_extract,
    "fit-confounder": cmd_fit_confounder, "score": cmd_score, "select": cmd_select,
    "vectors": cmd_vectors, "steer": cmd_steer, "mask": cmd_mask, "finetune": cmd_finetune,
    "eval": cmd_eval, "sweep": cmd_sweep, "controls": cmd_controls, "bench": cmd_bench,
}


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit 2 in one place."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


class _UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="headsteer", description="Causal head scoring and steering on a toy LM.")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--config", type=Path, help="JSON config (see README)")
    p.add_argument("--out", type=Path, default=Path("headsteer_out"), help="output/state directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, help):
        return sub.add_parser(name, help=help, description=help)

    s = add("gen-corpus", "generate the paired corpus and the LM training corpus")
    s.add_argument("--n-pairs", type=int)
    s.add_argument("--n-lm", type=int)
    s = add("train-lm", "train the toy language model")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    add("extract", "capture per-head activations into the binary dump")
    s = add("fit-confounder", "fit the latent factor model on the fitting fold")
    s.add_argument("--latent-dim", type=int)
    s.add_argument("--kind", choices=["ppca", "vae"])
    s = add("score", "score every head (lower bound or probe accuracy)")
    s.add_argument("--method", choices=["pns", "probe"], default="pns")
    s = add("select", "select the top-K heads")
    s.add_argument("-K", type=int)

    add("vectors", "compute steering vectors for the selected heads")

    def steer_args(s):
        s.add_argument("--alpha", type=float)
        s.add_argument("--tau", type=float)
        s.add_argument("--lam", type=float)
        s.add_argument("--top-k", type=int, dest="top_k")

    s = add("steer", "generate with steering and report metrics")
    steer_args(s)
    s.add_argument("--mode", choices=["global", "local", "shuffled"])
    s = add("mask", "zero the top-M ranked heads and report metrics")
    s.add_argument("-M", type=int, default=4)
    s.add_argument("--incremental", action="store_true", help="report every M' in 0..M")
    s = add("finetune", "fine-tune the selected heads' projections")
    s.add_argument("--epochs", type=int, help="default 5")
    s.add_argument("--lr", type=float, help="default 1e-5")
    s.add_argument("--lam-reg", type=float, help="default 1e3")
    s.add_argument("--refit-interval", type=int, help="default 1")
    s.add_argument("--n-ref", type=int, default=256, help="reference sequences for the KL term")
    s = add("eval", "2-fold evaluation of the configured intervention grid")
    s.add_argument("--tuned", action="store_true", help="evaluate the fine-tuned model")
    s = add("sweep", "incremental masking sweep, PNS vs. probe rankings")
    s.add_argument("--max-M", type=int, default=8, dest="max_M")
    s = add("controls", "retrieval-leakage controls")
    steer_args(s)
    s = add("bench", "timing: scoring vs. probes, retrieval, steering overhead")
    s.add_argument("--repeats", type=int, default=3)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = json.loads(args.config.read_text()) if args.config else {}
        spec = spec_from_config(config, args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        state = PipelineState.load(args.out, args.seed, config)
        t = time.perf_counter()
        COMMANDS[args.command](args, state, spec)
        log.info("%s took %.1f ms", args.command, 1e3 * (time.perf_counter() - t))
        return 0
    except (ValidationError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2 if isinstance(e.cause, ValidationError) else 1
    except (HeadSteerError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
