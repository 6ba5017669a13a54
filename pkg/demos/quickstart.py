"""Score heads, steer and mask on a small synthetic testbed (about 30 s on one core).

    python3 demos/quickstart.py [seed]
"""
import sys
from dataclasses import replace

from headsteer.harness import build_testbed, desk_spec, fold_artifacts, masking_sweep, run_pipeline
from headsteer.steer import InterventionConfig

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
spec = desk_spec(seed, n_pairs=600, n_eval=150)
tb = build_testbed(spec)

fa = fold_artifacts(tb)[0]
print("head ranking on fold 0 (score per sample):")
for h in fa.table.ranking()[:4]:
    print(f"  L{h.layer}H{h.head}  {fa.table.mean_scores()[h] / fa.table.n_samples[0]:.4f}")

grid = (InterventionConfig(K=4, alpha=5.0),
        InterventionConfig(K=4, alpha=5.0, mode="local", top_k=64),
        InterventionConfig(K=4, alpha=5.0, mode="shuffled", top_k=64))
print("\nsteering (2-fold averaged):")
for r in run_pipeline(replace(spec, grid=grid), tb):
    print(f"  {r.config.get('mode'):9s} toxicity {r.toxicity:.3f}  perplexity {r.perplexity:.2f}  "
          f"entropy {r.entropy:.3f}")

print("\nmasking the top-M heads:")
for r in masking_sweep(spec, Ms=range(0, 9, 2), testbed=tb):
    print(f"  {r['method']:5s} M={r['M']}  toxicity {r['toxicity']:.3f}  perplexity {r['perplexity']:.2f}")
