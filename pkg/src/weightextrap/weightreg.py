"""Regress every network parameter on the predictors and predict new weights.

Two families are provided:

* ``linear``: one least-squares fit per parameter on a polynomial feature map
  of the (standardised) predictors, optionally ridge-guarded and with
  t-statistic pruning of insignificant slopes.
* ``nn``: one shared MLP with an output head per predicted parameter, trained
  on weight anomalies scaled by each head's standard deviation.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .netcore import (ModelState, NetworkSpec, TrainConfig, TrainingDiverged, build_network,
                      fmt_float, forward, train)
from .predictors import FeatureMapSpec, PredictorMatrix, Standardizer, n_features, poly_features
from .sensitivity import SensitivityMatrix


class SingularFitError(ValueError):
    pass


class PredictionError(ValueError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    enabled: bool = False
    t_threshold: float = 2.0

    def __post_init__(self):
        if self.t_threshold < 0:
            raise ValueError("t_threshold must be >= 0")


@dataclass(frozen=True)
class NnRegressorSpec:
    hidden: tuple[int, ...] = (32, 32)
    learning_rate: float = 1e-3
    epochs: int = 300
    batch_size: int = 64
    seed: int = 0


def _baseline_checksum(baseline) -> str:
    return hashlib.sha256(np.asarray(baseline, dtype=np.float64).tobytes()).hexdigest()


@dataclass(eq=False)
class WeightRegressionModel:
    family: str
    mask: np.ndarray
    baseline: np.ndarray
    standardizer: Standardizer
    predictor_names: tuple[str, ...]
    anomalies: bool
    feature_spec: FeatureMapSpec | None = None
    coefficients: np.ndarray | None = None  # (n_features, n_predicted)
    t_stats: np.ndarray | None = None
    nn: ModelState | None = None
    head_mean: np.ndarray | None = None
    head_scale: np.ndarray | None = None
    constant_heads: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def predicted_index(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    def to_dict(self) -> dict:
        enc = lambda a: None if a is None else np.vectorize(fmt_float, otypes=[object])(a).tolist()  # noqa: E731
        d = {
            "family": self.family,
            "mask": [bool(m) for m in self.mask],
            "baseline_sha256": _baseline_checksum(self.baseline),
            "standardizer": self.standardizer.to_dict(),
            "predictor_names": list(self.predictor_names),
            "anomalies": self.anomalies,
            "info": self.info,
        }
        if self.family == "linear":
            d["feature_spec"] = self.feature_spec.to_dict()
            d["coefficients"] = enc(self.coefficients)
        else:
            d["nn_spec"] = self.nn.spec.to_dict()
            d["nn_params"] = enc(self.nn.params)
            d["head_mean"] = enc(self.head_mean)
            d["head_scale"] = enc(self.head_scale)
            d["constant_heads"] = [bool(c) for c in self.constant_heads]
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path, baseline) -> "WeightRegressionModel":
        """Load a saved model; ``baseline`` must match the recorded checksum."""
        d = json.loads(Path(path).read_text())
        baseline = np.asarray(baseline, dtype=np.float64)
        if _baseline_checksum(baseline) != d["baseline_sha256"]:
            raise ValueError("baseline parameters do not match the regression model's checksum")
        dec = lambda a: np.array(a, dtype=object).astype(np.float64)  # noqa: E731
        common = dict(mask=np.array(d["mask"], dtype=bool), baseline=baseline,
                      standardizer=Standardizer.from_dict(d["standardizer"]),
                      predictor_names=tuple(d["predictor_names"]), anomalies=d["anomalies"], info=d["info"])
        if d["family"] == "linear":
            fs = FeatureMapSpec(**d["feature_spec"])
            shape = (n_features(len(common["predictor_names"]), fs), int(np.sum(common["mask"])))
            coef = dec(d["coefficients"]).reshape(shape)
            return cls("linear", feature_spec=fs, coefficients=coef, **common)
        nn = ModelState(NetworkSpec.from_dict(d["nn_spec"]), dec(d["nn_params"]))
        return cls("nn", nn=nn, head_mean=dec(d["head_mean"]), head_scale=dec(d["head_scale"]),
                   constant_heads=np.array(d["constant_heads"], dtype=bool), **common)


def _resolve_mask(mask, K):
    if mask is None:
        return np.ones(K, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (K,):
        raise ValueError(f"mask must have length {K}")
    return mask


def _design(preds: PredictorMatrix, spec: FeatureMapSpec, rows=None) -> np.ndarray:
    R = preds.rows if rows is None else np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if spec.standardize_before:
        R = preds.standardizer.transform(R)
    return poly_features(R, spec)


def _check_pairing(sens: SensitivityMatrix, preds: PredictorMatrix):
    if len(preds) != sens.n_episodes:
        raise ValueError(f"{sens.n_episodes} episodes but {len(preds)} predictor rows")


def fit_linear(sens: SensitivityMatrix, preds: PredictorMatrix, feature_spec: FeatureMapSpec = FeatureMapSpec(),
               ridge_lambda: float = 1e-8, prune: PruneConfig = PruneConfig(), mask=None,
               anomalies: bool | None = None) -> WeightRegressionModel:
    """Least squares for every selected parameter via the normal equations.

    The ridge penalty acts on all non-intercept coefficients. With pruning,
    slopes whose |t| falls below the threshold are zeroed and the intercept is
    refitted to the remaining residual mean.

    ``anomalies`` selects whether weight anomalies or totals are regressed
    (default: whatever ``sens`` stores).
    """
    _check_pairing(sens, preds)
    K = sens.baseline.size
    mask = _resolve_mask(mask, K)
    use_anom = sens.store_anomalies if anomalies is None else anomalies
    target = (sens.anomalies() if use_anom else sens.totals())[:, mask]
    Phi = _design(preds, feature_spec)
    N, F = Phi.shape
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be >= 0")
    if N < F and ridge_lambda == 0:
        raise SingularFitError(f"{N} episodes for {F} features: set ridge_lambda > 0")
    G = Phi.T @ Phi
    pen = np.full(F, ridge_lambda)
    pen[0] = 0.0
    A = G + np.diag(pen)
    first = int(np.flatnonzero(mask)[0]) if mask.any() else -1
    try:
        cho = linalg.cho_factor(A, lower=False, check_finite=True)
    except linalg.LinAlgError:
        raise SingularFitError(
            f"normal matrix is singular fitting parameter {first}; use ridge_lambda > 0"
        ) from None
    if ridge_lambda == 0 and np.linalg.cond(A) > 1e14:
        raise SingularFitError(
            f"normal matrix is numerically singular fitting parameter {first}; use ridge_lambda > 0"
        )
    B = linalg.cho_solve(cho, Phi.T @ target)

    dof = N - F
    t_stats = None
    if dof > 0:
        resid = target - Phi @ B
        s2 = np.sum(resid**2, axis=0) / dof
        Ainv_diag = np.diag(linalg.cho_solve(cho, np.eye(F)))
        se = np.sqrt(np.outer(Ainv_diag, s2))
        with np.errstate(divide="ignore", invalid="ignore"):
            t_stats = np.where(se > 0, np.abs(B) / se, np.where(B != 0, np.inf, 0.0))
    if prune.enabled:
        if t_stats is None:
            raise ValueError("pruning needs more episodes than features")
        drop = t_stats < prune.t_threshold
        drop[0] = False
        cols = np.flatnonzero(drop.any(axis=0))
        if cols.size:
            B = B.copy()
            B[drop] = 0.0
            B[0, cols] = np.mean(target[:, cols] - Phi[:, 1:] @ B[1:, cols], axis=0)

    return WeightRegressionModel(
        "linear", mask, sens.baseline.copy(), preds.standardizer, preds.feature_names, use_anom,
        feature_spec=feature_spec, coefficients=B, t_stats=t_stats,
        info={"ridge_lambda": ridge_lambda, "prune": {"enabled": prune.enabled, "t_threshold": prune.t_threshold},
              "n_episodes": N, "n_features": F},
    )


def fit_nn_regressor(sens: SensitivityMatrix, preds: PredictorMatrix, spec: NnRegressorSpec = NnRegressorSpec(),
                     mask=None) -> WeightRegressionModel:
    """Shared MLP mapping standardised predictors to all masked weight anomalies.

    Each head learns its anomaly divided by the head's standard deviation over
    episodes (mean removed), which equalises the per-head loss scales. Heads
    with zero variance are served as constants.
    """
    _check_pairing(sens, preds)
    K = sens.baseline.size
    mask = _resolve_mask(mask, K)
    if not mask.any():
        raise ValueError("mask selects no parameters")
    if sens.n_episodes < 2:
        raise ValueError("need at least two episodes")
    target = sens.anomalies()[:, mask]
    mean = target.mean(axis=0)
    sd = target.std(axis=0)
    constant = ~(sd > 1e-12 * np.maximum(1.0, np.abs(sens.baseline[mask])))
    scale = np.where(constant, 1.0, sd)
    Z = (target - mean) / scale
    Z[:, constant] = 0.0
    X = preds.standardized()
    sizes = (X.shape[1], *spec.hidden, int(mask.sum()))
    nspec = NetworkSpec(sizes, ("elu",) * len(spec.hidden) + ("linear",), seed=spec.seed)
    net = build_network(nspec)
    cfg = TrainConfig(epochs=spec.epochs, batch_size=spec.batch_size, learning_rate=spec.learning_rate,
                      optimizer="adam", shuffle_seed=spec.seed)
    try:
        res = train(net, X, Z, cfg)
    except TrainingDiverged as exc:
        raise TrainingDiverged(f"weight-regressor training diverged: {exc}") from None
    return WeightRegressionModel(
        "nn", mask, sens.baseline.copy(), preds.standardizer, preds.feature_names, True,
        nn=res.model, head_mean=mean, head_scale=scale, constant_heads=constant,
        info={"final_scaled_mse": res.final_mse, "loss_trace": res.history[-5:],
              "hidden": list(spec.hidden), "epochs": spec.epochs, "learning_rate": spec.learning_rate},
    )


def predict_params_batch(model: WeightRegressionModel, R) -> np.ndarray:
    """Full parameter vectors (n, K) for a batch of raw predictor rows."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    if R.shape[1] != len(model.predictor_names):
        raise PredictionError(f"predictor rows have {R.shape[1]} columns, model expects {len(model.predictor_names)}")
    idx = model.predicted_index
    out = np.tile(model.baseline, (R.shape[0], 1))
    if idx.size == 0:
        return out
    if model.family == "linear":
        fs = model.feature_spec
        Rs = model.standardizer.transform(R) if fs.standardize_before else R
        vals = poly_features(Rs, fs) @ model.coefficients
    else:
        z = forward(model.nn, model.standardizer.transform(R))
        z[:, model.constant_heads] = 0.0
        vals = model.head_mean + model.head_scale * z
    if model.anomalies:
        vals = vals + model.baseline[idx]
    bad = ~np.isfinite(vals)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise PredictionError(f"non-finite prediction for parameter {idx[c]} at predictor row {R[r].tolist()}")
    out[:, idx] = vals
    return out


def predict_params(model: WeightRegressionModel, R_t) -> np.ndarray:
    """Predicted parameter vector for one target predictor row."""
    R_t = np.asarray(R_t, dtype=np.float64)
    if R_t.ndim != 1:
        raise PredictionError("predict_params takes a single predictor row")
    return predict_params_batch(model, R_t[None, :])[0]


def make_child(parent: ModelState, predicted) -> ModelState:
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.shape != (parent.n_params,):
        raise ValueError(f"predicted vector has length {predicted.size}, parent has {parent.n_params}")
    return ModelState(parent.spec, predicted, parent.trainable_mask)
