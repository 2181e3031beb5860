"""Per-sample fine-tuning of a parent network and the resulting weight table.

Every episode fine-tunes on a focus set built around one training sample and
records the full parameter vector afterwards. In reset mode each episode
starts from the parent; in sequential mode each starts where the previous
one ended.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, write_table
from .netcore import ModelState, OptimizerState, _apply_update, _loss_and_grad, fmt_float

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FocusSetConfig:
    n: int = 200
    regularize: bool = True
    finetune_epochs: int = 1
    finetune_lr: float = 1e-4
    batch_size: int = 32
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("focus set size n must be >= 1")
        if self.finetune_epochs < 0 or self.batch_size < 1:
            raise ValueError("finetune_epochs must be >= 0 and batch_size >= 1")
        if self.finetune_lr < 0:
            raise ValueError("finetune_lr must be non-negative")


def build_focus_set(i: int, inputs, targets, cfg: FocusSetConfig, rng=None):
    """Focus set for training row ``i``: n copies of it plus n other rows.

    Returns ``(X, Y)`` arrays. Without regularisation only the copies are
    returned. The other rows are distinct draws unless the training set is too
    small, in which case they are drawn with replacement.
    """
    X = np.asarray(inputs, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64).reshape(X.shape[0], -1)
    if not 0 <= i < X.shape[0]:
        raise IndexError(f"row {i} not in training set of {X.shape[0]}")
    rng = np.random.default_rng([cfg.seed, i]) if rng is None else rng
    idx = np.full(cfg.n, i)
    if cfg.regularize:
        others = X.shape[0] - 1
        if others < 1:
            raise ValueError("regularised focus set needs at least two training rows")
        replace = others < cfg.n
        if replace:
            warnings.warn(f"only {others} other rows for n={cfg.n}; sampling with replacement", stacklevel=2)
        draw = rng.choice(others, size=cfg.n, replace=replace)
        draw[draw >= i] += 1
        idx = np.concatenate([idx, draw])
    return X[idx], Y[idx]


@dataclass(eq=False)
class SensitivityMatrix:
    """Weight table: one row of K parameter values per successful episode.

    ``W`` holds totals, or anomalies relative to ``baseline`` when
    ``store_anomalies`` is set.
    """

    episode_indices: np.ndarray
    episode_keys: np.ndarray
    W: np.ndarray
    baseline: np.ndarray
    mode: str
    store_anomalies: bool = False
    missing: list = field(default_factory=list)
    final_params: np.ndarray | None = None

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        self.episode_indices = np.asarray(self.episode_indices, dtype=int)
        self.episode_keys = np.asarray(self.episode_keys, dtype=np.float64)
        self.baseline = np.asarray(self.baseline, dtype=np.float64)
        if self.W.shape[0] != self.episode_indices.size or self.W.shape[0] != self.episode_keys.size:
            raise ValueError("one row per episode required")
        if self.W.shape[1] != self.baseline.size:
            raise ValueError("row width must match baseline length")
        if self.mode not in ("reset", "sequential"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def n_episodes(self) -> int:
        return self.W.shape[0]

    def totals(self) -> np.ndarray:
        return self.W + self.baseline if self.store_anomalies else self.W

    def anomalies(self) -> np.ndarray:
        return self.W if self.store_anomalies else self.W - self.baseline

    def as_anomalies(self) -> "SensitivityMatrix":
        return self._replace(self.anomalies(), True)

    def as_totals(self) -> "SensitivityMatrix":
        return self._replace(self.totals(), False)

    def _replace(self, W, anomalies):
        return SensitivityMatrix(self.episode_indices, self.episode_keys, W, self.baseline,
                                 self.mode, anomalies, list(self.missing), self.final_params)

    def select(self, rows) -> "SensitivityMatrix":
        return SensitivityMatrix(self.episode_indices[rows], self.episode_keys[rows], self.W[rows],
                                 self.baseline, self.mode, self.store_anomalies, list(self.missing),
                                 self.final_params)

    # persistence

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "store_anomalies": self.store_anomalies,
            "episode_indices": self.episode_indices.tolist(),
            "episode_keys": [fmt_float(v) for v in self.episode_keys],
            "baseline": [fmt_float(v) for v in self.baseline],
            "W": [[fmt_float(v) for v in row] for row in self.W],
            "missing": list(self.missing),
            "final_params": None if self.final_params is None else [fmt_float(v) for v in self.final_params],
        }

    @classmethod
    def from_dict(cls, d) -> "SensitivityMatrix":
        fl = lambda xs: np.array([float(v) for v in xs])  # noqa: E731
        W = np.array([[float(v) for v in row] for row in d["W"]]).reshape(len(d["W"]), len(d["baseline"]))
        return cls(np.array(d["episode_indices"], dtype=int), fl(d["episode_keys"]), W, fl(d["baseline"]),
                   d["mode"], d["store_anomalies"], list(d["missing"]),
                   None if d.get("final_params") is None else fl(d["final_params"]))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load_json(cls, path) -> "SensitivityMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_csv(self, values_path, meta_path) -> None:
        """CSV pair: one values row per episode, plus a metadata file."""
        K = self.baseline.size
        write_table(values_path, [f"p{k}" for k in range(K)], self.W)
        header = ["episode_index", "episode_key"]
        write_table(meta_path, header, np.column_stack([self.episode_indices, self.episode_keys]))


def _finetune(spec, params, mask, X, Y, cfg: FocusSetConfig, rng) -> bool:
    """Fine-tune ``params`` in place on the focus set. False on divergence."""
    if cfg.finetune_lr == 0 or cfg.finetune_epochs == 0:
        return True
    opt = OptimizerState.create(cfg.optimizer, cfg.finetune_lr, params.size)
    n = X.shape[0]
    for _ in range(cfg.finetune_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grad = _loss_and_grad(spec, params, X[idx], Y[idx])
            if not math.isfinite(loss):
                return False
            _apply_update(params, grad, opt, mask)
    return bool(np.all(np.isfinite(params)))


def _episode_rows(train: Dataset, episode_indices):
    idx = np.arange(len(train)) if episode_indices is None else np.asarray(episode_indices, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= len(train)):
        raise IndexError("episode index outside the training set")
    return idx


def collect_reset(parent: ModelState, train: Dataset, inputs=None, episode_indices=None,
                  cfg: FocusSetConfig = FocusSetConfig(), store_anomalies: bool = False) -> SensitivityMatrix:
    """Forgetful online learning: every episode restarts from the parent.

    ``inputs`` optionally overrides ``train.X`` as network input (e.g. when the
    network consumes EOF-compressed fields).
    """
    X = train.X if inputs is None else np.asarray(inputs, dtype=np.float64)
    Y = train.Y
    idx = _episode_rows(train, episode_indices)
    base = parent.params
    rows, kept, missing = [], [], []
    for i in idx:
        rng = np.random.default_rng([cfg.seed, int(i)])
        Xf, Yf = build_focus_set(int(i), X, Y, cfg, rng)
        p = base.copy()
        if _finetune(parent.spec, p, parent.trainable_mask, Xf, Yf, cfg, rng):
            rows.append(p)
            kept.append(i)
        else:
            missing.append(int(i))
    if missing:
        log.warning("fine-tuning diverged on %d of %d episodes; rows dropped", len(missing), idx.size)
    W = np.array(rows).reshape(len(rows), base.size)
    sens = SensitivityMatrix(np.array(kept, dtype=int), train.keys[np.array(kept, dtype=int)], W, base,
                             "reset", False, missing)
    return sens.as_anomalies() if store_anomalies else sens


def collect_sequential(parent: ModelState, train: Dataset, inputs=None, episode_indices=None,
                       cfg: FocusSetConfig = FocusSetConfig(), store_anomalies: bool = False) -> SensitivityMatrix:
    """Non-forgetful variant: episodes in key order, each continuing the last.

    The focus sets still draw their regularising rows from the whole training set.
    """
    X = train.X if inputs is None else np.asarray(inputs, dtype=np.float64)
    Y = train.Y
    idx = _episode_rows(train, episode_indices)
    keys = train.keys[idx]
    if idx.size > 1 and not np.all(np.diff(keys) > 0):
        raise ValueError("sequential collection needs episodes in strictly increasing key order")
    p = parent.params.copy()
    rows, kept, missing = [], [], []
    for i in idx:
        rng = np.random.default_rng([cfg.seed, int(i)])
        Xf, Yf = build_focus_set(int(i), X, Y, cfg, rng)
        trial = p.copy()
        if _finetune(parent.spec, trial, parent.trainable_mask, Xf, Yf, cfg, rng):
            p = trial
            rows.append(p.copy())
            kept.append(i)
        else:
            missing.append(int(i))
    if missing:
        log.warning("fine-tuning diverged on %d of %d episodes; rows dropped", len(missing), idx.size)
    kept = np.array(kept, dtype=int)
    W = np.array(rows).reshape(len(rows), p.size)
    sens = SensitivityMatrix(kept, train.keys[kept], W, parent.params, "sequential", False, missing, p)
    return sens.as_anomalies() if store_anomalies else sens
