"""Predictor construction for the weight regressions.

EOF (PCA) compression of input fields, raw-column extraction, frozen
standardisation and polynomial feature maps.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .netcore import fmt_float


@dataclass(frozen=True, eq=False)
class EofBasis:
    """Empirical orthogonal functions of a set of fields.

    Attributes
    ----------
    mean_field : ndarray (d,)
    components : ndarray (k, d)
        Orthonormal patterns, leading first.
    explained_variance : ndarray (k,)
        Covariance eigenvalues (ddof=1) of the leading patterns.
    total_variance : float
        Trace of the field covariance.
    """

    mean_field: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    total_variance: float

    @property
    def k_leading(self) -> int:
        return self.components.shape[0]

    @property
    def explained_fraction(self) -> np.ndarray:
        return self.explained_variance / self.total_variance

    def to_dict(self) -> dict:
        return {
            "mean_field": [fmt_float(v) for v in self.mean_field],
            "components": [[fmt_float(v) for v in row] for row in self.components],
            "explained_variance": [fmt_float(v) for v in self.explained_variance],
            "total_variance": fmt_float(self.total_variance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EofBasis":
        f = np.vectorize(float)
        return cls(f(np.array(d["mean_field"])), f(np.array(d["components"])),
                   f(np.array(d["explained_variance"])), float(d["total_variance"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def fit_eof(fields, k: int = 4) -> EofBasis:
    """Fit EOFs by eigendecomposition of the field covariance.

    Each component is signed so that its largest-magnitude entry is positive.
    """
    F = np.asarray(fields, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ValueError("need at least two fields as rows of a 2-D array")
    mean = F.mean(axis=0)
    A = F - mean
    cov = A.T @ A / (F.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    rank = min(F.shape[0] - 1, F.shape[1])
    if k > rank:
        warnings.warn(f"requested {k} EOFs but the fields have rank <= {rank}; truncating", stacklevel=2)
        k = rank
    comps = evecs[:, :k].T.copy()
    lead = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), lead])[:, None]
    return EofBasis(mean, comps, evals[:k].copy(), float(np.trace(cov)))


def project(basis: EofBasis, fields) -> np.ndarray:
    """Principal components of one field or a batch of fields (no refit)."""
    F = np.asarray(fields, dtype=np.float64)
    if F.shape[-1] != basis.mean_field.size:
        raise ValueError(f"field has {F.shape[-1]} entries, basis expects {basis.mean_field.size}")
    return (F - basis.mean_field) @ basis.components.T


def reconstruct(basis: EofBasis, pcs) -> np.ndarray:
    return basis.mean_field + np.asarray(pcs) @ basis.components


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, rows) -> "Standardizer":
        """Column mean and population sd; zero-variance columns keep scale 1."""
        R = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        sd = R.std(axis=0)
        return cls(R.mean(axis=0), np.where(sd > 0, sd, 1.0))

    @classmethod
    def identity(cls, width: int) -> "Standardizer":
        return cls(np.zeros(width), np.ones(width))

    def transform(self, rows) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, rows) -> np.ndarray:
        return np.asarray(rows) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": [fmt_float(v) for v in self.mean], "scale": [fmt_float(v) for v in self.scale]}

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(np.array([float(v) for v in d["mean"]]), np.array([float(v) for v in d["scale"]]))


@dataclass(frozen=True)
class FeatureMapSpec:
    degree: int = 1
    include_interactions: bool = True
    standardize_before: bool = True

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError("degree must be >= 1")

    def to_dict(self) -> dict:
        return {"degree": self.degree, "include_interactions": self.include_interactions,
                "standardize_before": self.standardize_before}


def _monomials(p: int, spec: FeatureMapSpec) -> list[tuple[int, ...]]:
    terms: list[tuple[int, ...]] = [()]
    for d in range(1, spec.degree + 1):
        pure = [(a,) * d for a in range(p)]
        terms += pure
        if spec.include_interactions and d > 1:
            terms += [c for c in combinations_with_replacement(range(p), d) if len(set(c)) > 1]
    return terms


def feature_names(names, spec: FeatureMapSpec) -> list[str]:
    out = []
    for term in _monomials(len(names), spec):
        if not term:
            out.append("1")
        else:
            out.append("*".join(names[a] for a in term))
    return out


def n_features(p: int, spec: FeatureMapSpec) -> int:
    return len(_monomials(p, spec))


def poly_features(R, spec: FeatureMapSpec) -> np.ndarray:
    """Polynomial expansion of a predictor row (or rows).

    Column order: intercept, then for each degree the pure powers r_a^d
    followed by the mixed products in lexicographic order.
    """
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 1
    R2 = np.atleast_2d(R)
    if spec.degree > 2:
        warnings.warn(
            f"degree {spec.degree} features: high-order terms barely vary inside the training "
            "range and their fitted slopes are mostly noise, which can wreck extrapolation",
            stacklevel=2,
        )
    cols = [np.prod(R2[:, list(t)], axis=1) if t else np.ones(R2.shape[0])
            for t in _monomials(R2.shape[1], spec)]
    out = np.column_stack(cols)
    return out[0] if single else out


@dataclass(frozen=True, eq=False)
class PredictorMatrix:
    """Raw predictor rows plus the standardisation fitted on training rows.

    ``rows`` are stored unstandardised; :meth:`standardized` applies the frozen
    transform.
    """

    rows: np.ndarray
    feature_names: tuple[str, ...]
    standardizer: Standardizer

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if rows.shape[1] != len(self.feature_names):
            raise ValueError("predictor width does not match feature names")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self):
        return self.rows.shape[0]

    def standardized(self) -> np.ndarray:
        return self.standardizer.transform(self.rows)

    def subset(self, idx) -> "PredictorMatrix":
        return PredictorMatrix(self.rows[idx], self.feature_names, self.standardizer)

    def with_rows(self, rows) -> "PredictorMatrix":
        """New rows (e.g. out-of-distribution targets) under the same frozen transform."""
        return PredictorMatrix(rows, self.feature_names, self.standardizer)


def make_predictors(rows, names, standardize: bool = True, fit_rows=None) -> PredictorMatrix:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    ref = rows if fit_rows is None else fit_rows
    st = Standardizer.fit(ref) if standardize else Standardizer.identity(rows.shape[1])
    return PredictorMatrix(rows, tuple(names), st)


def raw_predictors(ds, columns, standardize: bool = True, fit_rows=None) -> PredictorMatrix:
    """Pass selected dataset columns through as predictors.

    The standardisation is fitted on ``fit_rows`` (indices into ``ds``) or on
    all of ``ds`` when not given.
    """
    rows = np.column_stack([ds.column(c) for c in columns])
    ref = rows if fit_rows is None else rows[fit_rows]
    return make_predictors(rows, columns, standardize, ref)


def eof_predictors(basis: EofBasis, fields, standardize: bool = True, fit_rows=None) -> PredictorMatrix:
    pcs = project(basis, fields)
    ref = pcs if fit_rows is None else pcs[fit_rows]
    return make_predictors(pcs, [f"pc{j + 1}" for j in range(basis.k_leading)], standardize, ref)
