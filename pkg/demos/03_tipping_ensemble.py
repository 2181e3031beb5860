"""
Ensemble over end-of-training years
===================================

Repeat the tipping pipeline with fresh parent seeds and end-of-training
years drawn uniformly from [800, 1800], then summarise the pairwise RMSE
differences (parent minus child) per window and per 100-year bucket.
"""
import sys

from weightextrap.evalharness import run_ensemble
from weightextrap.experiments import config_from_dict

n_runs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
cfg = config_from_dict({"experiment": "tipping", "regression": [{"name": "poly1", "degree": 1}]})
res = run_ensemble(cfg, n_runs, (800, 1800), seed=0)["poly1"]

print(f"{n_runs} runs, {len(res.failures)} failures")
for name, b in res.boxes["diff"].items():
    print(f"{name:12s} median {b.median:+.3f}  IQR [{b.q1:+.3f}, {b.q3:+.3f}]")
print("fixed_tail pairs improved:", f"{(res.diffs('fixed_tail') > 0).mean():.0%}")

print("\nby end-of-training bucket (fixed_tail diff median):")
for (lo, hi), per in sorted(res.eot_buckets.items()):
    b = per["diff"]["fixed_tail"]
    print(f"  [{lo:.0f}, {hi:.0f})  n={b.n}  {b.median:+.3f}")
