"""Datasets, the two synthetic generators and CSV ingestion.

A :class:`Dataset` is column oriented: inputs ``X`` (n, d), targets ``Y``
(n, m), one ordering key per sample and optional named auxiliary columns.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .netcore import fmt_float


class Sample(NamedTuple):
    input: np.ndarray
    target: np.ndarray
    key: float
    aux: dict


def _frozen(a, ndim):
    a = np.array(a, dtype=np.float64)
    if ndim == 2 and a.ndim == 1:
        a = a.reshape(-1, 1)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    keys: np.ndarray
    feature_names: tuple[str, ...]
    target_names: tuple[str, ...]
    key_name: str = "key"
    aux: dict = field(default_factory=dict)
    ordered: bool = False

    def __post_init__(self):
        X, Y, keys = _frozen(self.X, 2), _frozen(self.Y, 2), _frozen(self.keys, 1).reshape(-1)
        n = X.shape[0]
        if Y.shape[0] != n or keys.shape[0] != n:
            raise ValueError("X, Y and keys must have the same number of rows")
        if len(self.feature_names) != X.shape[1] or len(self.target_names) != Y.shape[1]:
            raise ValueError("column names do not match array widths")
        aux = {}
        for name, col in self.aux.items():
            col = _frozen(col, 1).reshape(-1)
            if col.shape[0] != n:
                raise ValueError(f"aux column {name!r} has wrong length")
            aux[name] = col
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y)) and np.all(np.isfinite(keys))):
            raise ValueError("dataset entries must be finite")
        if self.ordered and n > 1 and not np.all(np.diff(keys) > 0):
            raise ValueError(f"ordering key {self.key_name!r} is not strictly increasing")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "aux", aux)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "target_names", tuple(self.target_names))

    def __len__(self) -> int:
        return self.X.shape[0]

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def sample(self, i: int) -> Sample:
        return Sample(self.X[i], self.Y[i], float(self.keys[i]), {k: float(v[i]) for k, v in self.aux.items()})

    def column(self, name: str) -> np.ndarray:
        """Look a column up by name among inputs, targets, aux and the key."""
        if name in self.feature_names:
            return self.X[:, self.feature_names.index(name)]
        if name in self.target_names:
            return self.Y[:, self.target_names.index(name)]
        if name in self.aux:
            return self.aux[name]
        if name == self.key_name:
            return self.keys
        raise KeyError(f"no column named {name!r}")

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        ordered = self.ordered and (idx.dtype == bool or np.all(np.diff(idx) > 0))
        return Dataset(
            self.X[idx], self.Y[idx], self.keys[idx], self.feature_names, self.target_names,
            self.key_name, {k: v[idx] for k, v in self.aux.items()}, ordered,
        )


@dataclass(frozen=True)
class TippingConfig:
    t_max: int = 2200
    tip_center: float = 1800.0
    field_dim: int = 40
    baseline: float = 17.0
    drift: float = 4.0
    collapse_depth: float = 10.0
    collapse_width: float = 25.0
    noise_y: float = 0.3
    noise_field: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tip_center < self.t_max:
            raise ValueError("tip_center must lie inside (0, t_max)")
        if self.collapse_width <= 0:
            raise ValueError("collapse_width must be positive")
        if self.field_dim < 2:
            raise ValueError("field_dim must be at least 2")
        if self.noise_y < 0 or self.noise_field < 0:
            raise ValueError("noise levels must be non-negative")


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def tipping_signal(t, cfg: TippingConfig) -> np.ndarray:
    """Noise-free overturning strength: linear drift plus a logistic collapse."""
    t = np.asarray(t, dtype=np.float64)
    return (
        cfg.baseline
        - cfg.drift * (t / cfg.tip_center)
        - cfg.collapse_depth * logistic((t - cfg.tip_center) / cfg.collapse_width)
    )


def tipping_patterns(cfg: TippingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal spatial patterns derived from the seed."""
    rng = np.random.default_rng([cfg.seed, 1])
    a, b = rng.standard_normal((2, cfg.field_dim))
    p1 = a / np.linalg.norm(a)
    b = b - (b @ p1) * p1
    return p1, b / np.linalg.norm(b)


def gen_tipping(cfg: TippingConfig = TippingConfig()) -> Dataset:
    """Synthetic regime-shift series: y(t) and a 40-dim field per year t = 1..t_max."""
    rng = np.random.default_rng([cfg.seed, 2])
    t = np.arange(1, cfg.t_max + 1, dtype=np.float64)
    y = tipping_signal(t, cfg) + cfg.noise_y * rng.standard_normal(t.size)
    p1, p2 = tipping_patterns(cfg)
    fields = np.outer(y, p1) + 0.05 * np.outer(y**2, p2)
    fields += cfg.noise_field * rng.standard_normal(fields.shape)
    names = tuple(f"x{j:02d}" for j in range(cfg.field_dim))
    return Dataset(fields, y, t, names, ("amoc",), key_name="year", ordered=True)


# Standard depth levels of a 5-degree ocean atlas: 102 levels from 0 to 5500 m.
ATLAS_DEPTHS = np.concatenate([
    np.arange(0, 100 + 1, 5),
    np.arange(125, 500 + 1, 25),
    np.arange(550, 2000 + 1, 50),
    np.arange(2100, 5500 + 1, 100),
]).astype(np.float64)


@dataclass(frozen=True)
class EosCoefficients:
    """rho = c0 + cS*S + cT*T + cTT*T^2 + cP*P + cPP*P^2 + cST*S*T + cTP*T*P"""

    c0: float = 1000.0
    cS: float = 0.8
    cT: float = -0.12
    cTT: float = -0.0045
    cP: float = 0.045
    cPP: float = -2.0e-5
    cST: float = 3.0e-4
    cTP: float = -1.5e-4


def toy_density(S, T, P, c: EosCoefficients = EosCoefficients()):
    S, T, P = (np.asarray(v, dtype=np.float64) for v in (S, T, P))
    return (c.c0 + c.cS * S + c.cT * T + c.cTT * T**2 + c.cP * P + c.cPP * P**2
            + c.cST * S * T + c.cTP * T * P)


@dataclass(frozen=True)
class EosConfig:
    n_lat: int = 36
    n_lon: int = 72
    n_depth: int = 102
    depth_min: float = 0.0
    depth_max: float = 5500.0
    cutoff: float = 2000.0
    noise: float = 0.0
    seed: int = 0
    coefficients: EosCoefficients = EosCoefficients()

    def __post_init__(self):
        if min(self.n_lat, self.n_lon, self.n_depth) < 1:
            raise ValueError("grid sizes must be positive")
        if not self.depth_min <= self.cutoff <= self.depth_max:
            raise ValueError("cutoff must lie inside the depth range")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    def depths(self) -> np.ndarray:
        if self.n_depth == ATLAS_DEPTHS.size and (self.depth_min, self.depth_max) == (0.0, 5500.0):
            return ATLAS_DEPTHS.copy()
        return np.linspace(self.depth_min, self.depth_max, self.n_depth)


EOS_FEATURES = ("S", "T", "P", "lat", "lon", "z")


def gen_toy_eos(cfg: EosConfig = EosConfig()) -> Dataset:
    """Gridded toy ocean. Samples are ordered depth-major, then latitude, then longitude."""
    rng = np.random.default_rng([cfg.seed, 3])
    lat = -90.0 + (np.arange(cfg.n_lat) + 0.5) * 180.0 / cfg.n_lat
    lon = (np.arange(cfg.n_lon) + 0.5) * 360.0 / cfg.n_lon
    z, phi, lam = (a.ravel() for a in np.meshgrid(cfg.depths(), lat, lon, indexing="ij"))
    T = 2.0 + 22.0 * np.exp(-z / 700.0) * np.cos(np.deg2rad(phi)) ** 2
    S = 34.5 + 0.7 * np.exp(-z / 1000.0)
    if cfg.noise > 0:
        T = T + cfg.noise * rng.standard_normal(T.size)
        S = S + cfg.noise * rng.standard_normal(S.size)
    P = 0.1 * z
    rho = toy_density(S, T, P, cfg.coefficients)
    X = np.column_stack([S, T, P, phi, lam, z])
    return Dataset(X, rho, z, EOS_FEATURES, ("rho",), key_name="z", aux={"lat": phi, "lon": lam})


def split_by_key(ds: Dataset, threshold: float, direction: str = "le") -> tuple[Dataset, Dataset]:
    """Split into (inside, beyond) by comparing the key with ``threshold``.

    ``direction="le"`` keeps ``key <= threshold`` inside, ``"ge"`` keeps
    ``key >= threshold`` inside. Both halves keep the original order.
    """
    if direction == "le":
        inside = ds.keys <= threshold
    elif direction == "ge":
        inside = ds.keys >= threshold
    else:
        raise ValueError("direction must be 'le' or 'ge'")
    a, b = ds.subset(inside), ds.subset(~inside)
    for name, part in (("inside", a), ("beyond", b)):
        if len(part) == 0:
            warnings.warn(f"split_by_key: {name} part is empty at threshold {threshold}", stacklevel=2)
    return a, b


def train_validation_split(n: int, fraction: float = 0.9, seed: int = 0, shuffle: bool = True):
    """Index arrays for a (train, validation) split of ``n`` rows."""
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    cut = int(round(fraction * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


def stratified_quantile_sample(ds: Dataset, columns, n_quantiles: int = 300, m_per_bin: int = 1, seed: int = 0) -> np.ndarray:
    """Indices drawn from every empirical quantile bin of every listed column.

    Each column is binned on its own; from each non-empty bin ``m_per_bin``
    indices are drawn without replacement (all of them if the bin is smaller).
    Returns the sorted union.
    """
    if n_quantiles < 1 or m_per_bin < 1:
        raise ValueError("n_quantiles and m_per_bin must be >= 1")
    n = len(ds)
    if n_quantiles > n:
        warnings.warn(f"{n_quantiles} quantiles for {n} samples; using {n}", stacklevel=2)
        n_quantiles = n
    rng = np.random.default_rng(seed)
    chosen = []
    for name in columns:
        col = ds.column(name)
        edges = np.unique(np.quantile(col, np.linspace(0.0, 1.0, n_quantiles + 1)))
        bins = np.searchsorted(edges[1:-1], col, side="right")
        order = np.argsort(bins, kind="stable")
        counts = np.bincount(bins, minlength=edges.size)
        starts = np.concatenate([[0], np.cumsum(counts)])
        for b in np.flatnonzero(counts):
            members = order[starts[b]:starts[b + 1]]
            take = min(m_per_bin, members.size)
            chosen.append(rng.choice(members, size=take, replace=False))
    return np.unique(np.concatenate(chosen)) if chosen else np.empty(0, dtype=int)


class CsvSchemaError(ValueError):
    pass


def load_csv(path, input_cols, target_cols, key_col=None, aux_cols=(), ordered=False) -> Dataset:
    """Read a header-first CSV into a :class:`Dataset`; row order is kept."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvSchemaError(f"{path}: file is empty") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    wanted = list(input_cols) + list(target_cols) + list(aux_cols) + ([key_col] if key_col else [])
    missing = [c for c in wanted if c not in header]
    if missing:
        raise CsvSchemaError(f"{path}: missing column(s) {missing}")
    if not rows:
        raise CsvSchemaError(f"{path}: no data rows")
    pos = {c: header.index(c) for c in wanted}
    values = np.empty((len(rows), len(wanted)))
    for r, row in enumerate(rows):
        for j, c in enumerate(wanted):
            try:
                values[r, j] = float(row[pos[c]])
            except (ValueError, IndexError):
                cell = row[pos[c]] if pos[c] < len(row) else "<missing>"
                raise CsvSchemaError(f"{path}: row {r + 1}, column {c!r}: non-numeric value {cell!r}") from None
    ni, nt = len(input_cols), len(target_cols)
    keys = values[:, -1] if key_col else np.arange(len(rows), dtype=np.float64)
    aux = {c: values[:, ni + nt + j] for j, c in enumerate(aux_cols)}
    return Dataset(values[:, :ni], values[:, ni:ni + nt], keys, tuple(input_cols), tuple(target_cols),
                   key_col or "row", aux, ordered)


def write_csv(path, ds: Dataset) -> None:
    """Write key, inputs, targets and aux columns with round-trip precision."""
    cols = [ds.key_name, *ds.feature_names, *ds.target_names, *ds.aux]
    data = np.column_stack([ds.keys, ds.X, ds.Y, *ds.aux.values()])
    write_table(path, cols, data)


def write_table(path, header, data) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.atleast_2d(data):
            w.writerow([fmt_float(v) for v in row])
