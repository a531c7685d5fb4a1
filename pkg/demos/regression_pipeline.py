"""End-to-end synthetic regression: encoder, compression, 4-fold CV.

The label of each mini-WSI is the fraction of its grid covered by one
connected proliferative region, so the image-level CNN has to aggregate over
many patches. Smaller 16x16-patch images keep the run under half a
minute; pass ``--full`` for 32x32-patch images (about two minutes).

    python3 demos/regression_pipeline.py [--full]
"""

import sys
import time
from dataclasses import replace

from mtnic.metrics import spearman_ci
from mtnic.pipeline import ExperimentConfig, run_regression

cfg = ExperimentConfig(seed=0)
if "--full" not in sys.argv:
    # 16x16-patch mini-WSIs need one stride-2 layer fewer to reach a single cell
    cfg = replace(cfg, grid=16, wsi_strides=(2, 2, 2, 2, 1, 1, 1, 1))

t0 = time.perf_counter()
res = run_regression(cfg)
lo, hi = spearman_ci(res.predictions, res.labels)
print(f"{cfg.n_images} mini-WSIs, {cfg.grid}x{cfg.grid} patches, encoder tasks {'+'.join(cfg.tasks)}")
print(f"out-of-fold Spearman {res.score:.3f}  95% CI [{lo:.3f}, {hi:.3f}]  ({time.perf_counter() - t0:.0f} s)")
for target, pred in list(zip(res.labels, res.predictions))[:8]:
    print(f"  target {target:.3f}  predicted {pred:.3f}")
