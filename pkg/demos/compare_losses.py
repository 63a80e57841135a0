# Baseline MSE vs the pixel-wise and image-wise JND losses on a short lambda sweep,
# scored with BD-rate and (when thresholds fall inside both curves) BS_JND.
import math
import warnings

import torch

from jndlc import LossConfig, TrainConfig, bd_rate, bs_jnd, evaluate_sweep, sweep, toy_pairs
from jndlc.errors import OutOfRangeError

torch.set_num_threads(1)
warnings.simplefilter("ignore")

train_set = toy_pairs(32, 64, seed=0)
eval_set = toy_pairs(6, 64, seed=99)

curves = {}
for variant in ("baseline", "pwl", "iwl"):
    cfg = TrainConfig.preset("desk", LossConfig(variant=variant), max_steps=150)
    runs = sweep(cfg, train_set)
    res = evaluate_sweep([ck for ck, _ in runs], eval_set)
    curves[variant] = res
    for p in res.points:
        print(f"{variant:8s} lambda={p.lam:<7} bpp={p.bpp:.3f} psnr={p.psnr:.2f} msssim={p.msssim:.4f}")

# iwl only shifts the baseline distortion by a per-image constant, so the
# gradients match and its rows above repeat the baseline ones
base, prop = curves["baseline"], curves["pwl"]
for metric in ("psnr", "msssim"):
    try:
        print("pwl", metric, "BD-rate %:", round(bd_rate(base.curve(), prop.curve(), metric), 2))
    except (OutOfRangeError, ValueError) as e:
        # three lambdas are too few for the interpolated fit
        print("pwl", metric, "BD-rate undefined:", e)

vals = []
for q in base.jnd:
    try:
        vals.append(bs_jnd(base.curve(), prop.curve(), q))
    except (OutOfRangeError, ValueError):
        pass
if vals:
    print("mean BS_JND %:", round(sum(vals) / len(vals), 2), f"over {len(vals)} thresholds")
else:
    # short runs rarely reach the quality of a JND pair
    print("no JND threshold inside both curves; top psnr was",
          round(max(p.psnr for p in base.points), 2), "vs lowest threshold",
          round(min(q.value for q in base.jnd if q.metric == "psnr"), 2) if base.jnd else math.nan)
