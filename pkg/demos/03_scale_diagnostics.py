"""
Looking inside the per-scale score matrices
===========================================

After training, every scale has its own image-text score matrix. The
diagonal holds the matched pairs; its spread per scale shows how well each
scale aligns, and the cross-attention gates show which caption tokens each
scale listens to.
"""

import numpy as np

from msalign.config import TrainConfig
from msalign.evalkit import attention_dump, scale_diagnostics
from msalign.synth import SynthSpec, synth_dataset
from msalign.trainer import train

spec = SynthSpec(pairs=704, split_sizes=(512, 64, 128), seed=0)
ds = synth_dataset(spec)
cfg = TrainConfig(ablation="full", epochs=8)
state, _ = train(cfg, ds)

diag = scale_diagnostics(state.eval_params, ds.test, cfg)
print(f"diagonal scores per scale (quartiles: {diag.quartile_method} interpolation)")
for i, (s, gap) in enumerate(zip(diag.stats, diag.gap_to_largest), 1):
    print(f"  scale {i}: median {s['median']:+.3f}  iqr [{s['q1']:+.3f}, {s['q3']:+.3f}]  "
          f"mean {s['mean']:+.3f}  gap to scale 4 {gap:+.4f}")

# mean gate on each scale's own tokens for matched pairs, averaged over heads
gates = attention_dump(state.eval_params, ds.test, cfg, max_pairs=32)
tokens = ds.test.tokens[:32]
print("\nmean gate on the matched caption's scale-s token (rows: MSCMAT scale)")
for i, g in enumerate(gates, 1):
    matched = g[np.arange(32), np.arange(32)].mean(axis=1)       # pairs x tokens
    cells = []
    for a, b in spec.ranges:
        on = (tokens >= a) & (tokens < b)
        cells.append(matched[on].mean())
    print(f"  scale {i}: " + "  ".join(f"{c:.3f}" for c in cells))
