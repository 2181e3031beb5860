"""End-to-end pipelines for the built-in experiments and CSV data.

Every stage is a plain function of its inputs so the CLI can persist and
reload intermediate artifacts between stages. :func:`run_pipeline` chains
them in memory.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .evalharness import EvalReport, EvalWindow, Predictions, apply_models, rmse_windows, standard_windows
from .netcore import ModelState, NetworkSpec, TrainConfig, build_network, train
from .predictors import EofBasis, FeatureMapSpec, PredictorMatrix, Standardizer, fit_eof, make_predictors, project
from .sensitivity import FocusSetConfig, SensitivityMatrix, collect_reset, collect_sequential
from .weightreg import (NnRegressorSpec, PruneConfig, WeightRegressionModel, fit_linear, fit_nn_regressor,
                        predict_params_batch)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


# configuration ---------------------------------------------------------------

@dataclass
class SplitConfig:
    eot: float | None = None          # None: experiment default (800 years / 2000 m)
    direction: str = "le"
    train_fraction: float = 0.9
    shuffle: bool = True


@dataclass
class ParentConfig:
    hidden: list = field(default_factory=lambda: [16])
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"


@dataclass
class PredictorConfig:
    kind: str = "eof"                 # eof | raw
    n_eof: int = 4
    columns: list = field(default_factory=list)
    standardize: bool = True


@dataclass
class SensitivityConfig:
    mode: str = "sequential"          # reset | sequential
    n: int = 200
    regularize: bool = True
    finetune_epochs: int = 1
    finetune_lr: float | None = None  # None: 0.1 x parent learning rate
    batch_size: int = 32
    optimizer: str = "sgd"
    selection: str = "all"            # all | quantile
    n_quantiles: int = 300
    m_per_bin: int = 1
    store_anomalies: bool = False


@dataclass
class VariantConfig:
    name: str = "poly1"
    family: str = "linear"            # linear | nn
    degree: int = 1
    include_interactions: bool = True
    ridge_lambda: float = 1e-8
    prune: bool = False
    t_threshold: float = 2.0
    mask: object = "all"              # all | final_layer | none | list of layer numbers
    anomalies: bool = False
    nn_hidden: list = field(default_factory=lambda: [32, 32])
    nn_epochs: int = 300
    nn_batch_size: int = 64
    nn_learning_rate: float = 1e-3


@dataclass
class EvaluationConfig:
    tail: list = field(default_factory=lambda: [1800.0, 2200.0])


@dataclass
class EnsembleConfig:
    n_runs: int = 30
    eot_lo: float = 800.0
    eot_hi: float = 1800.0
    bucket_width: float = 100.0
    seed: int = 0


@dataclass
class SeedConfig:
    data: int = 0
    parent: int = 0
    sensitivity: int = 0
    regression: int = 0


@dataclass
class CsvSourceConfig:
    path: str = ""
    input_cols: list = field(default_factory=list)
    target_cols: list = field(default_factory=list)
    key_col: str = ""
    aux_cols: list = field(default_factory=list)


@dataclass
class RunConfig:
    experiment: str = "tipping"       # tipping | toy_eos | csv
    tipping: D.TippingConfig = field(default_factory=D.TippingConfig)
    toy_eos: D.EosConfig = field(default_factory=D.EosConfig)
    csv: CsvSourceConfig = field(default_factory=CsvSourceConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    parent: ParentConfig = field(default_factory=ParentConfig)
    predictors: PredictorConfig = field(default_factory=PredictorConfig)
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    regression: list = field(default_factory=lambda: [VariantConfig()])
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, d, path):
    if not isinstance(d, dict):
        raise ConfigError(path, f"expected a table, got {type(d).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(names))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")
    kw = {}
    defaults = cls()
    for key, val in d.items():
        sub = f"{path}.{key}" if path else key
        current = getattr(defaults, key)
        if dataclasses.is_dataclass(current):
            kw[key] = _build(type(current), val, sub)
        elif cls is RunConfig and key == "regression":
            if not isinstance(val, list):
                raise ConfigError(sub, "expected a list of variant tables")
            kw[key] = [_build(VariantConfig, v, f"{sub}[{i}]") for i, v in enumerate(val)]
        else:
            kw[key] = _coerce(current, val, sub)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def _coerce(default, val, path):
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(path, f"expected true/false, got {val!r}")
        return val
    if isinstance(default, int) and not isinstance(default, bool) and isinstance(val, float) and val.is_integer():
        return int(val)
    if isinstance(default, (int, float)) and not isinstance(default, bool):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(path, f"expected a number, got {val!r}")
        return type(default)(val) if isinstance(default, float) else val
    if path.endswith(".mask") and isinstance(val, list):
        return val
    if isinstance(default, str) and not isinstance(val, str):
        raise ConfigError(path, f"expected a string, got {val!r}")
    return val


def config_from_dict(d: dict) -> RunConfig:
    """Build and validate a :class:`RunConfig`. Experiment defaults fill gaps."""
    d = dict(d or {})
    experiment = d.get("experiment", "tipping")
    if experiment not in ("tipping", "toy_eos", "csv"):
        raise ConfigError("experiment", f"unknown experiment {experiment!r}")
    base = _to_plain(default_config(experiment))
    merged = _merge(base, d)
    cfg = _build(RunConfig, merged, "")
    _validate(cfg)
    return cfg


def _merge(base, over):
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _validate(cfg: RunConfig):
    if cfg.sensitivity.mode not in ("reset", "sequential"):
        raise ConfigError("sensitivity.mode", "must be 'reset' or 'sequential'")
    if cfg.sensitivity.selection not in ("all", "quantile"):
        raise ConfigError("sensitivity.selection", "must be 'all' or 'quantile'")
    if cfg.predictors.kind not in ("eof", "raw"):
        raise ConfigError("predictors.kind", "must be 'eof' or 'raw'")
    if not 0 < cfg.split.train_fraction <= 1:
        raise ConfigError("split.train_fraction", "must be in (0, 1]")
    if not cfg.regression:
        raise ConfigError("regression", "at least one variant required")
    names = [v.name for v in cfg.regression]
    if len(set(names)) != len(names):
        raise ConfigError("regression", "variant names must be unique")
    for i, v in enumerate(cfg.regression):
        if v.family not in ("linear", "nn"):
            raise ConfigError(f"regression[{i}].family", "must be 'linear' or 'nn'")
        if v.degree < 1:
            raise ConfigError(f"regression[{i}].degree", "must be >= 1")
        if not (v.mask in ("all", "final_layer", "none") or isinstance(v.mask, list)):
            raise ConfigError(f"regression[{i}].mask", "must be 'all', 'final_layer', 'none' or a list of layers")
    if cfg.experiment == "csv":
        c = cfg.csv
        if not c.path or not c.input_cols or not c.target_cols or not c.key_col:
            raise ConfigError("csv", "path, input_cols, target_cols and key_col are required")
        if cfg.split.eot is None:
            raise ConfigError("split.eot", "required for csv experiments")


def default_config(experiment: str = "tipping") -> RunConfig:
    """Defaults for each built-in experiment."""
    if experiment == "tipping":
        return RunConfig(experiment="tipping", split=SplitConfig(eot=800.0),
                         regression=[VariantConfig("poly1", degree=1), VariantConfig("poly2", degree=2)])
    if experiment == "toy_eos":
        return RunConfig(
            experiment="toy_eos",
            split=SplitConfig(eot=2000.0, train_fraction=1.0),
            parent=ParentConfig(hidden=[32], epochs=3, batch_size=128),
            predictors=PredictorConfig(kind="raw", columns=list(D.EOS_FEATURES)),
            sensitivity=SensitivityConfig(mode="reset", regularize=False, selection="quantile",
                                          n_quantiles=300, m_per_bin=1),
            regression=[VariantConfig("poly2", degree=2)],
        )
    if experiment == "csv":
        return RunConfig(experiment="csv", split=SplitConfig(),
                         predictors=PredictorConfig(kind="raw"))
    raise ConfigError("experiment", f"unknown experiment {experiment!r}")


# stages ----------------------------------------------------------------------

@dataclass(eq=False)
class Prepared:
    """Everything derived from data and split before any network is trained.

    ``net_inputs`` and ``predictor_rows`` cover all rows of ``ds``;
    ``train_rows`` index the rows inside the training region.
    """

    ds: D.Dataset
    train_rows: np.ndarray
    fit_rows: np.ndarray
    net_inputs: np.ndarray
    predictor_rows: np.ndarray
    predictor_names: tuple
    target_mean: float
    target_scale: float
    eot: float
    basis: EofBasis | None = None
    input_scaler: Standardizer | None = None
    windows: list = field(default_factory=list)

    def scaled_targets(self) -> np.ndarray:
        return (self.ds.Y - self.target_mean) / self.target_scale

    def train_dataset(self) -> D.Dataset:
        idx = self.train_rows
        names = tuple(f"in{j}" for j in range(self.net_inputs.shape[1]))
        return D.Dataset(self.net_inputs[idx], self.scaled_targets()[idx], self.ds.keys[idx], names,
                         self.ds.target_names, self.ds.key_name, ordered=self.ds.ordered)

    def predictors(self) -> PredictorMatrix:
        """Training-row predictors with their frozen standardisation."""
        return make_predictors(self.predictor_rows[self.train_rows], self.predictor_names, True)


def load_dataset(cfg: RunConfig) -> D.Dataset:
    if cfg.experiment == "tipping":
        return D.gen_tipping(dataclasses.replace(cfg.tipping, seed=cfg.seeds.data))
    if cfg.experiment == "toy_eos":
        return D.gen_toy_eos(dataclasses.replace(cfg.toy_eos, seed=cfg.seeds.data))
    c = cfg.csv
    return D.load_csv(c.path, c.input_cols, c.target_cols, c.key_col, c.aux_cols)


def _default_eot(cfg: RunConfig) -> float:
    if cfg.split.eot is not None:
        return float(cfg.split.eot)
    return 800.0 if cfg.experiment == "tipping" else cfg.toy_eos.cutoff


def prepare(cfg: RunConfig, ds: D.Dataset | None = None, eot: float | None = None) -> Prepared:
    """Split, build network inputs and weight predictors.

    Tipping: the network consumes the leading principal components (mean
    removed, unscaled) and the same components are the weight predictors.
    EOS and CSV: the network consumes standardised raw inputs and targets;
    predictors are raw columns (or EOFs of the inputs).
    """
    ds = load_dataset(cfg) if ds is None else ds
    eot = _default_eot(cfg) if eot is None else float(eot)
    inside = ds.keys <= eot if cfg.split.direction == "le" else ds.keys >= eot
    train_rows = np.flatnonzero(inside)
    if train_rows.size < 2:
        raise ConfigError("split.eot", f"only {train_rows.size} training rows at threshold {eot}")
    local, _ = D.train_validation_split(train_rows.size, cfg.split.train_fraction, cfg.seeds.parent,
                                        cfg.split.shuffle)
    fit_rows = train_rows[local]
    basis = scaler = None
    Xtr = ds.X[train_rows]
    pc = cfg.predictors
    if cfg.experiment == "tipping":
        basis = fit_eof(Xtr, pc.n_eof)
        net_inputs = project(basis, ds.X)
        pred_rows, pred_names = net_inputs, tuple(f"pc{j + 1}" for j in range(basis.k_leading))
        t_mean, t_scale = 0.0, 1.0
    else:
        scaler = Standardizer.fit(Xtr)
        net_inputs = scaler.transform(ds.X)
        if pc.kind == "eof":
            basis = fit_eof(Xtr, pc.n_eof)
            pred_rows = project(basis, ds.X)
            pred_names = tuple(f"pc{j + 1}" for j in range(basis.k_leading))
        else:
            cols = pc.columns or list(ds.feature_names)
            try:
                pred_rows = np.column_stack([ds.column(c) for c in cols])
            except KeyError as exc:
                raise ConfigError("predictors.columns", str(exc)) from None
            pred_names = tuple(cols)
        y = ds.Y[train_rows, 0]
        t_mean, t_scale = float(y.mean()), float(y.std() or 1.0)
    return Prepared(ds, train_rows, fit_rows, net_inputs, pred_rows, pred_names, t_mean, t_scale, eot,
                    basis, scaler, evaluation_windows(cfg, ds, eot))


def evaluation_windows(cfg: RunConfig, ds: D.Dataset, eot: float) -> list[EvalWindow]:
    if cfg.experiment == "tipping":
        return standard_windows(eot, tuple(cfg.evaluation.tail))
    if cfg.split.direction == "le":
        return [EvalWindow.full_period(), EvalWindow("inside", -math.inf, eot),
                EvalWindow("beyond", eot, math.inf, lo_open=True)]
    return [EvalWindow.full_period(), EvalWindow("inside", eot, math.inf),
            EvalWindow("beyond", -math.inf, math.nextafter(eot, -math.inf))]


def train_parent(cfg: RunConfig, prep: Prepared, parent_seed: int | None = None):
    """Train ParentModel_0 on the fit rows. Returns (model, TrainResult)."""
    seed = cfg.seeds.parent if parent_seed is None else parent_seed
    pc = cfg.parent
    sizes = (prep.net_inputs.shape[1], *pc.hidden, prep.ds.Y.shape[1])
    spec = NetworkSpec(sizes, ("elu",) * len(pc.hidden) + ("linear",), seed=seed)
    tcfg = TrainConfig(epochs=pc.epochs, batch_size=pc.batch_size, learning_rate=pc.learning_rate,
                       optimizer=pc.optimizer, shuffle_seed=seed)
    Y = prep.scaled_targets()
    res = train(build_network(spec), prep.net_inputs[prep.fit_rows], Y[prep.fit_rows], tcfg)
    return res.model, res


def resolve_mask(spec: NetworkSpec, selector) -> np.ndarray:
    if selector == "all":
        return np.ones(spec.n_params, dtype=bool)
    if selector == "final_layer":
        return spec.layer_mask([-1])
    if selector == "none":
        return np.zeros(spec.n_params, dtype=bool)
    if isinstance(selector, (list, tuple)):
        try:
            return spec.layer_mask([int(s) for s in selector])
        except IndexError:
            raise ConfigError("regression.mask", f"layer out of range in {selector}") from None
    raise ConfigError("regression.mask", f"unknown selector {selector!r}")


def mask_key(selector) -> str:
    if isinstance(selector, str):
        return selector
    return "layers-" + "-".join(str(s) for s in selector) if selector else "none"


def focus_config(cfg: RunConfig, seed: int | None = None) -> FocusSetConfig:
    s = cfg.sensitivity
    lr = 0.1 * cfg.parent.learning_rate if s.finetune_lr is None else s.finetune_lr
    return FocusSetConfig(n=s.n, regularize=s.regularize, finetune_epochs=s.finetune_epochs, finetune_lr=lr,
                          batch_size=s.batch_size, optimizer=s.optimizer,
                          seed=cfg.seeds.sensitivity if seed is None else seed)


def episode_rows(cfg: RunConfig, prep: Prepared, seed: int | None = None) -> np.ndarray:
    """Episode indices relative to the training rows."""
    s = cfg.sensitivity
    train_ds = prep.ds.subset(prep.train_rows)
    if s.selection == "all":
        return np.arange(len(train_ds))
    cols = list(prep.predictor_names) if cfg.predictors.kind == "raw" else list(train_ds.feature_names)
    return D.stratified_quantile_sample(train_ds, cols, s.n_quantiles, s.m_per_bin,
                                        cfg.seeds.sensitivity if seed is None else seed)


def collect(cfg: RunConfig, prep: Prepared, parent: ModelState, mask=None, seed: int | None = None) -> SensitivityMatrix:
    """Online-learning step; ``mask`` freezes the non-predicted parameters."""
    model = parent if mask is None else parent.with_mask(mask)
    ep = episode_rows(cfg, prep, seed)
    fn = collect_sequential if cfg.sensitivity.mode == "sequential" else collect_reset
    return fn(model, prep.train_dataset(), episode_indices=ep, cfg=focus_config(cfg, seed),
              store_anomalies=cfg.sensitivity.store_anomalies)


def fit_variant(v: VariantConfig, prep: Prepared, sens: SensitivityMatrix, mask, seed: int = 0) -> WeightRegressionModel:
    preds = prep.predictors().subset(sens.episode_indices)
    if v.family == "linear":
        fs = FeatureMapSpec(degree=v.degree, include_interactions=v.include_interactions)
        return fit_linear(sens, preds, fs, v.ridge_lambda, PruneConfig(v.prune, v.t_threshold), mask,
                          anomalies=v.anomalies)
    spec = NnRegressorSpec(tuple(v.nn_hidden), v.nn_learning_rate, v.nn_epochs, v.nn_batch_size, seed)
    return fit_nn_regressor(sens, preds, spec, mask)


def predict_children(model: WeightRegressionModel, prep: Prepared) -> np.ndarray:
    """One child parameter vector per row of the dataset (chunked)."""
    rows = prep.predictor_rows
    out = np.empty((rows.shape[0], model.baseline.size))
    for s in range(0, rows.shape[0], 20000):
        out[s:s + 20000] = predict_params_batch(model, rows[s:s + 20000])
    return out


def evaluate(prep: Prepared, parent: ModelState, children: np.ndarray, meta=None) -> tuple[Predictions, EvalReport]:
    p = apply_models(parent, children, prep.ds, inputs=prep.net_inputs)
    p = Predictions(p.keys, p.target, p.parent * prep.target_scale + prep.target_mean,
                    p.child * prep.target_scale + prep.target_mean)
    return p, rmse_windows(p, prep.windows, meta)


@dataclass(eq=False)
class PipelineResult:
    prep: Prepared
    parent: ModelState
    parent_train_mse: float
    sensitivities: dict
    models: dict
    predictions: dict
    reports: dict


def run_pipeline(cfg: RunConfig, eot: float | None = None, parent_seed: int | None = None,
                 ds: D.Dataset | None = None) -> PipelineResult:
    """All five stages in memory, for every regression variant in ``cfg``.

    Variants sharing a mask selector share one sensitivity collection.
    """
    prep = prepare(cfg, ds, eot)
    parent, res = train_parent(cfg, prep, parent_seed)
    sens_seed = cfg.seeds.sensitivity if parent_seed is None else parent_seed
    sens, models, preds, reports = {}, {}, {}, {}
    for v in cfg.regression:
        key = mask_key(v.mask)
        mask = resolve_mask(parent.spec, v.mask)
        if key not in sens:
            sens[key] = collect(cfg, prep, parent, None if key == "all" else mask, sens_seed)
        model = fit_variant(v, prep, sens[key], mask, cfg.seeds.regression if parent_seed is None else parent_seed)
        children = predict_children(model, prep)
        meta = {"eot": prep.eot, "parent_seed": parent.spec.seed, "variant": v.name, "degree": v.degree,
                "family": v.family, "mask": key, "n_episodes": sens[key].n_episodes}
        preds[v.name], reports[v.name] = evaluate(prep, parent, children, meta)
        models[v.name] = model
    return PipelineResult(prep, parent, res.final_mse * prep.target_scale**2, sens, models, preds, reports)


def tipping_pipeline(cfg: RunConfig, eot: float, parent_seed: int) -> dict[str, EvalReport]:
    """Ensemble hook: one full run, reports per variant."""
    return run_pipeline(cfg, eot=eot, parent_seed=parent_seed).reports
