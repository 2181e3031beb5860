"""Applying parents and children to targets, windowed RMSE and box statistics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .netcore import ModelState, forward, forward_many, fmt_float

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalWindow:
    """Closed key interval ``[lo, hi]``; ``lo_open`` makes the lower end strict."""

    name: str
    lo: float = -math.inf
    hi: float = math.inf
    lo_open: bool = False

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"window {self.name!r}: lo > hi")

    def contains(self, keys) -> np.ndarray:
        keys = np.asarray(keys)
        lower = keys > self.lo if self.lo_open else keys >= self.lo
        return lower & (keys <= self.hi)

    @classmethod
    def full_period(cls) -> "EvalWindow":
        return cls("full_period")

    @classmethod
    def beyond_eot(cls, eot: float) -> "EvalWindow":
        return cls("beyond_eot", eot, math.inf, lo_open=True)

    @classmethod
    def fixed_tail(cls, lo: float = 1800.0, hi: float = 2200.0) -> "EvalWindow":
        return cls("fixed_tail", lo, hi)


def standard_windows(eot: float, tail=(1800.0, 2200.0)) -> list[EvalWindow]:
    return [EvalWindow.full_period(), EvalWindow.beyond_eot(eot), EvalWindow.fixed_tail(*tail)]


@dataclass(frozen=True, eq=False)
class Predictions:
    keys: np.ndarray
    target: np.ndarray
    parent: np.ndarray
    child: np.ndarray

    def to_table(self):
        header = ["key", "target", "parent", "child"]
        return header, np.column_stack([self.keys, self.target, self.parent, self.child])


def apply_models(parent: ModelState, children, targets: Dataset, inputs=None) -> Predictions:
    """Run the parent on every target and child ``t`` on target ``t`` only.

    ``children`` may be one shared :class:`ModelState`, a list of one model per
    target, or an (n_targets, K) array of child parameter vectors. ``inputs``
    overrides ``targets.X`` as network input. Only the first output is kept.
    """
    X = targets.X if inputs is None else np.asarray(inputs, dtype=np.float64)
    n = X.shape[0]
    par = forward(parent, X)[:, 0]
    if isinstance(children, ModelState):
        child = forward(children, X)[:, 0]
    else:
        if isinstance(children, (list, tuple)):
            if any(c.spec != parent.spec for c in children):
                raise ValueError("children must share the parent architecture")
            P = np.array([c.params for c in children]).reshape(len(children), -1)
        else:
            P = np.asarray(children, dtype=np.float64)
        if P.shape != (n, parent.n_params):
            raise ValueError(f"need one child per target: got {P.shape[0]} children for {n} targets")
        # the parent goes through the same per-row kernel so that identical
        # parameters give bit-identical outputs
        child = np.empty(n)
        for s in range(0, n, 20000):
            rows = slice(s, s + 20000)
            child[rows] = forward_many(parent.spec, P[rows], X[rows])[:, 0]
            tiled = np.broadcast_to(parent.params, P[rows].shape)
            par[rows] = forward_many(parent.spec, tiled, X[rows])[:, 0]
    return Predictions(targets.keys.copy(), targets.Y[:, 0].copy(), par, child)


@dataclass(frozen=True)
class WindowResult:
    name: str
    n: int
    parent_rmse: float | None
    child_rmse: float | None

    @property
    def diff(self) -> float | None:
        if self.parent_rmse is None:
            return None
        return self.parent_rmse - self.child_rmse


@dataclass(eq=False)
class EvalReport:
    windows: list[WindowResult]
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> WindowResult:
        for w in self.windows:
            if w.name == name:
                return w
        raise KeyError(name)

    def diffs(self) -> dict:
        return {w.name: w.diff for w in self.windows}

    def to_dict(self) -> dict:
        return {"windows": [{**asdict(w), "diff": w.diff} for w in self.windows], "meta": self.meta}

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, default=_json_default) + "\n")

    def save_csv(self, path) -> None:
        header = ["window", "n", "parent_rmse", "child_rmse", "diff"]
        lines = [",".join(header)]
        for w in self.windows:
            vals = [w.parent_rmse, w.child_rmse, w.diff]
            lines.append(",".join([w.name, str(w.n)] + ["" if v is None else fmt_float(v) for v in vals]))
        Path(path).write_text("\n".join(lines) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def rmse(pred, target) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(target)) ** 2)))


def rmse_windows(pred: Predictions, windows, meta=None) -> EvalReport:
    """RMSE of parent and child in each window; empty windows are reported as absent."""
    results = []
    for w in windows:
        sel = w.contains(pred.keys)
        n = int(sel.sum())
        if n == 0:
            results.append(WindowResult(w.name, 0, None, None))
            continue
        results.append(WindowResult(w.name, n, rmse(pred.parent[sel], pred.target[sel]),
                                    rmse(pred.child[sel], pred.target[sel])))
    return EvalReport(results, dict(meta or {}))


def grouped_rmse(values, target, group, bins=None) -> dict:
    """RMSE per group with every sample weighted equally.

    Without ``bins`` each distinct group value is its own bin. With ``bins``
    (sorted edges) samples fall into ``[edge_j, edge_j+1)``, the last bin closed.
    Returns ``{"groups", "n", "rmse"}`` arrays.
    """
    values, target, group = (np.asarray(a, dtype=np.float64).reshape(-1) for a in (values, target, group))
    sq = (values - target) ** 2
    if bins is None:
        labels, inv = np.unique(group, return_inverse=True)
    else:
        edges = np.asarray(bins, dtype=np.float64)
        inv = np.clip(np.searchsorted(edges, group, side="right") - 1, 0, edges.size - 2)
        labels = edges[:-1]
    n = np.bincount(inv, minlength=labels.size)
    s = np.bincount(inv, weights=sq, minlength=labels.size)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(s / n)
    return {"groups": labels, "n": n, "rmse": r}


def _type7(s: np.ndarray, p: float) -> float:
    # np.quantile's lerp flips form at weight 0.5, so spell out s[lo] + g * (s[hi] - s[lo])
    h = (s.size - 1) * p
    lo = int(math.floor(h))
    hi = min(lo + 1, s.size - 1)
    return float(s[lo] + (h - lo) * (s[hi] - s[lo]))


@dataclass(frozen=True)
class BoxStats:
    """Five-number summary plus mean; quartiles by linear interpolation (type 7)."""

    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    n: int

    @classmethod
    def of(cls, values) -> "BoxStats":
        v = np.asarray([x for x in values if x is not None], dtype=np.float64)
        if v.size == 0:
            raise ValueError("BoxStats needs at least one value")
        q = [_type7(np.sort(v), p) for p in (0.0, 0.25, 0.5, 0.75, 1.0)]
        return cls(*q, float(v.mean()), int(v.size))

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def box_table(reports: list[EvalReport], quantity: str = "diff") -> dict[str, BoxStats]:
    """BoxStats per window over a list of reports for parent, child or diff."""
    names = [w.name for w in reports[0].windows]
    out = {}
    for name in names:
        vals = []
        for rep in reports:
            w = rep[name]
            vals.append({"diff": w.diff, "parent": w.parent_rmse, "child": w.child_rmse}[quantity])
        vals = [v for v in vals if v is not None]
        if vals:
            out[name] = BoxStats.of(vals)
    return out


@dataclass(eq=False)
class EnsembleResult:
    reports: list[EvalReport]
    eots: list[float]
    failures: list[dict]
    boxes: dict            # quantity -> window -> BoxStats
    eot_buckets: dict      # (lo, hi) -> quantity -> window -> BoxStats

    def diffs(self, window: str) -> np.ndarray:
        return np.array([r[window].diff for r in self.reports if r[window].diff is not None])

    def save_csv(self, path) -> None:
        """One row per run and window."""
        rows = []
        for run, (rep, eot) in enumerate(zip(self.reports, self.eots)):
            for w in rep.windows:
                rows.append([run, eot, w.name, w.n, w.parent_rmse, w.child_rmse, w.diff])
        header = "run,eot,window,n,parent_rmse,child_rmse,diff"
        body = [",".join(str(x) if isinstance(x, (int, str)) else ("" if x is None else fmt_float(x))
                         for x in row) for row in rows]
        Path(path).write_text("\n".join([header, *body]) + "\n")

    def box_rows(self):
        """Flat rows (scope, quantity, window, stats...) for export."""
        rows = []
        for q, per in self.boxes.items():
            for name, b in per.items():
                rows.append(("all", q, name, b))
        for (lo, hi), perq in self.eot_buckets.items():
            for q, per in perq.items():
                for name, b in per.items():
                    rows.append((f"eot[{lo:g},{hi:g})", q, name, b))
        return rows

    def save_box_csv(self, path) -> None:
        header = "scope,quantity,window,min,q1,median,q3,max,mean,n"
        body = [",".join([s, q, w, *(fmt_float(getattr(b, f)) for f in ("min", "q1", "median", "q3", "max", "mean")),
                          str(b.n)]) for s, q, w, b in self.box_rows()]
        Path(path).write_text("\n".join([header, *body]) + "\n")


def aggregate(reports, eots, failures=(), bucket_width: float = 100.0, bucket_range=(800.0, 1800.0)) -> EnsembleResult:
    boxes = {q: box_table(reports, q) for q in ("parent", "child", "diff")} if reports else {}
    buckets = {}
    lo, hi = bucket_range
    edges = np.arange(lo, hi + bucket_width, bucket_width)
    for a, b in zip(edges[:-1], edges[1:]):
        last = b >= hi
        sel = [r for r, e in zip(reports, eots) if a <= e < b or (last and e == b)]
        if sel:
            buckets[(float(a), float(b))] = {q: box_table(sel, q) for q in ("parent", "child", "diff")}
    return EnsembleResult(list(reports), list(eots), list(failures), boxes, buckets)


def run_ensemble(base_config, n_runs: int, eot_range=(800.0, 1800.0), seed: int = 0, pipeline=None,
                 bucket_width: float = 100.0, variant: str | None = None) -> dict[str, EnsembleResult]:
    """Repeat a pipeline with fresh parent seeds and uniformly drawn end-of-training keys.

    ``pipeline(base_config, eot=..., parent_seed=...)`` must return a mapping of
    variant name to :class:`EvalReport`; the default runs the tipping
    experiment. Failed runs are logged, counted and excluded. Returns one
    :class:`EnsembleResult` per variant.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    if pipeline is None:
        from .experiments import tipping_pipeline as pipeline
    rng = np.random.default_rng([seed, 11])
    lo, hi = eot_range
    per_variant: dict[str, list] = {}
    failures = []
    for run in range(n_runs):
        eot = float(rng.integers(int(lo), int(hi) + 1))
        parent_seed = int(rng.integers(0, 2**31))
        try:
            reports = pipeline(base_config, eot=eot, parent_seed=parent_seed)
        except Exception as exc:  # noqa: BLE001 - failures are counted, not fatal
            log.warning("ensemble run %d (eot=%g) failed: %s", run, eot, exc)
            failures.append({"run": run, "eot": eot, "parent_seed": parent_seed, "error": str(exc)})
            continue
        for name, rep in reports.items():
            if variant is None or name == variant:
                per_variant.setdefault(name, []).append((rep, eot))
    return {
        name: aggregate([r for r, _ in pairs], [e for _, e in pairs], failures, bucket_width, eot_range)
        for name, pairs in per_variant.items()
    }
