"""
Extrapolating a toy equation of state to depth
==============================================

Train on the upper 2000 m of a gridded toy ocean, regress the weights on
the six raw inputs (quadratic features) from a quantile-stratified set of
episodes, and compare parent and children below the cutoff.
"""

from weightextrap.data import gen_toy_eos
from weightextrap.evalharness import grouped_rmse
from weightextrap.experiments import config_from_dict, run_pipeline

cfg = config_from_dict({"experiment": "toy_eos"})
ds = gen_toy_eos(cfg.toy_eos)
res = run_pipeline(cfg, parent_seed=0, ds=ds)
rep = res.reports["poly2"]
for w in rep.windows:
    print(f"{w.name:12s} n={w.n:6d} parent {w.parent_rmse:.4f} child {w.child_rmse:.4f}")
gain = (rep["beyond"].parent_rmse - rep["beyond"].child_rmse) / rep["beyond"].parent_rmse
print(f"below-cutoff improvement: {gain:.1%}")

# depth profile of the errors
p = res.predictions["poly2"]
gp = grouped_rmse(p.parent, p.target, p.keys)
gc = grouped_rmse(p.child, p.target, p.keys)
print("\n  depth   parent    child")
for z, a, b in zip(gp["groups"], gp["rmse"], gc["rmse"]):
    if z % 500 == 0:
        print(f"{z:7.0f}  {a:7.4f}  {b:7.4f}")
