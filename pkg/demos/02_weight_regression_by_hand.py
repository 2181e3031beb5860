"""
Weight extrapolation step by step
=================================

The full chain on the tipping series, using the library pieces directly
rather than the pipeline driver: train a parent on the years up to the end
of training, fine-tune it once per training year, regress every weight on
the leading principal components, and build one child per year.
"""
import numpy as np

from weightextrap.data import TippingConfig, gen_tipping
from weightextrap.evalharness import apply_models, rmse_windows, standard_windows
from weightextrap.netcore import NetworkSpec, TrainConfig, build_network, train
from weightextrap.predictors import FeatureMapSpec, fit_eof, make_predictors, project
from weightextrap.sensitivity import FocusSetConfig, collect_sequential
from weightextrap.weightreg import fit_linear, predict_params_batch

eot = 1000
ds = gen_tipping(TippingConfig(seed=0))
inside = ds.keys <= eot

# four leading EOFs of the in-training fields serve as both network inputs
# and regression predictors
basis = fit_eof(ds.X[inside], k=4)
pcs = project(basis, ds.X)
print("explained variance of 4 EOFs:", np.round(basis.explained_fraction.sum(), 4))

spec = NetworkSpec([4, 16, 1], ["elu", "linear"], seed=1)
train_ds = ds.subset(np.flatnonzero(inside))
parent = train(build_network(spec), pcs[inside], train_ds.Y, TrainConfig(epochs=100)).model

# one fine-tuning episode per training year, each continuing the previous one
focus = FocusSetConfig(n=200, finetune_lr=1e-4, seed=1)
sens = collect_sequential(parent, train_ds, inputs=pcs[inside], cfg=focus)
print("weight table:", sens.W.shape)

preds = make_predictors(pcs[inside], ["pc1", "pc2", "pc3", "pc4"])
model = fit_linear(sens, preds, FeatureMapSpec(degree=1))

children = predict_params_batch(model, pcs)
report = rmse_windows(apply_models(parent, children, ds, inputs=pcs), standard_windows(eot))
for w in report.windows:
    print(f"{w.name:12s} n={w.n:5d} parent {w.parent_rmse:.3f} child {w.child_rmse:.3f} diff {w.diff:+.3f}")
