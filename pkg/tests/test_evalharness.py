import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weightextrap.data import Dataset
from weightextrap.evalharness import (BoxStats, EvalReport, EvalWindow, Predictions, WindowResult, aggregate,
                                      apply_models, grouped_rmse, rmse, rmse_windows, run_ensemble,
                                      standard_windows)
from weightextrap.netcore import NetworkSpec, build_network


def preds(keys, target, parent, child):
    return Predictions(*(np.asarray(a, dtype=float) for a in (keys, target, parent, child)))


def test_rmse_examples():
    t = np.linspace(0, 1, 9)
    assert rmse(t, t) == 0.0
    assert rmse(t + 0.3, t) == pytest.approx(0.3, abs=1e-15)


def test_diff_sign_convention():
    assert WindowResult("w", 3, 2.0, 1.5).diff == 0.5
    assert WindowResult("w", 0, None, None).diff is None


def test_windows():
    keys = np.arange(1, 2201)
    w = standard_windows(800)
    assert [x.name for x in w] == ["full_period", "beyond_eot", "fixed_tail"]
    assert w[0].contains(keys).sum() == 2200
    assert w[1].contains(keys).sum() == 1400 and not w[1].contains([800])[0]
    assert w[2].contains(keys).sum() == 401
    with pytest.raises(ValueError):
        EvalWindow("bad", 2, 1)


def test_rmse_windows_and_empty_window():
    p = preds([1, 2, 3, 4], [0, 0, 0, 0], [1, 1, 2, 2], [0, 0, 1, 1])
    rep = rmse_windows(p, [EvalWindow("lo", hi=2), EvalWindow("hi", lo=3), EvalWindow("none", lo=10)])
    assert rep["lo"].parent_rmse == 1.0 and rep["lo"].child_rmse == 0.0 and rep["lo"].diff == 1.0
    assert rep["hi"].n == 2 and rep["hi"].diff == pytest.approx(1.0)
    assert rep["none"].n == 0 and rep["none"].parent_rmse is None
    with pytest.raises(KeyError):
        rep["missing"]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(0, 1000))
def test_window_partition_identity(n, seed):
    r = np.random.default_rng(seed)
    keys = np.arange(n, dtype=float)
    cut = float(r.integers(0, n - 1))
    p = preds(keys, r.standard_normal(n), r.standard_normal(n), r.standard_normal(n))
    rep = rmse_windows(p, [EvalWindow.full_period(), EvalWindow("in", hi=cut), EvalWindow.beyond_eot(cut)])
    a, b, full = rep["in"], rep["beyond_eot"], rep["full_period"]
    assert a.n + b.n == n
    for attr in ("parent_rmse", "child_rmse"):
        combined = (a.n * getattr(a, attr) ** 2 + b.n * getattr(b, attr) ** 2) / n
        assert combined == pytest.approx(getattr(full, attr) ** 2, rel=1e-12)


def test_grouped_rmse_against_one_pass_oracle(rng):
    g = rng.integers(0, 5, 200).astype(float)
    v, t = rng.standard_normal(200), rng.standard_normal(200)
    out = grouped_rmse(v, t, g)
    sums, counts = {}, {}
    for gi, vi, ti in zip(g, v, t):
        sums[gi] = sums.get(gi, 0.0) + (vi - ti) ** 2
        counts[gi] = counts.get(gi, 0) + 1
    for label, n, r in zip(out["groups"], out["n"], out["rmse"]):
        assert n == counts[label] and r == pytest.approx(math.sqrt(sums[label] / n), rel=1e-12)


def test_grouped_rmse_single_bin_and_zero_bin(rng):
    v, t = rng.standard_normal(50), rng.standard_normal(50)
    one = grouped_rmse(v, t, np.zeros(50))
    assert one["rmse"][0] == pytest.approx(rmse(v, t), rel=1e-12)
    g = np.repeat([0.0, 1.0], 25)
    v2 = v.copy()
    v2[:25] = t[:25]
    before, after = grouped_rmse(v, t, g), grouped_rmse(v2, t, g)
    assert after["rmse"][0] == 0 and after["rmse"][1] == before["rmse"][1]


def test_grouped_rmse_with_bins():
    out = grouped_rmse([1, 2, 3, 4], [0, 0, 0, 0], [0, 5, 10, 20], bins=[0, 10, 20])
    np.testing.assert_array_equal(out["n"], [2, 2])
    assert out["rmse"][1] == pytest.approx(5.0 / math.sqrt(2))


def test_boxstats_known_values():
    b = BoxStats.of([1, 2, 3, 4])
    assert (b.min, b.q1, b.median, b.q3, b.max, b.mean) == (1, 1.75, 2.5, 3.25, 4, 2.5)
    assert b.iqr == 1.5
    assert BoxStats.of([None, 5.0]).n == 1
    with pytest.raises(ValueError):
        BoxStats.of([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_boxstats_bounds(values):
    b = BoxStats.of(values)
    assert b.min <= b.q1 <= b.median <= b.q3 <= b.max
    assert b.median == pytest.approx(float(np.median(values)), rel=1e-12, abs=1e-9)


def test_apply_models_shared_per_target_and_array():
    spec = NetworkSpec([2, 3, 1], ["elu", "linear"], seed=0)
    parent = build_network(spec)
    r = np.random.default_rng(1)
    ds = Dataset(r.standard_normal((6, 2)), r.standard_normal(6), np.arange(6.0), ["a", "b"], ["y"])
    same = apply_models(parent, [parent] * 6, ds)
    np.testing.assert_array_equal(same.parent, same.child)
    shared = apply_models(parent, parent, ds)
    np.testing.assert_array_equal(shared.child, shared.parent)
    P = np.tile(parent.params, (6, 1))
    P[2] = 0.0
    out = apply_models(parent, P, ds)
    assert out.child[2] == 0.0 and np.delete(out.child, 2).tolist() == np.delete(out.parent, 2).tolist()
    with pytest.raises(ValueError, match="one child per target"):
        apply_models(parent, P[:3], ds)


def _fake_pipeline(cfg, eot, parent_seed):
    r = np.random.default_rng(parent_seed)
    d = float(r.standard_normal()) if cfg == "random" else 1.0
    return {"v": EvalReport([WindowResult("fixed_tail", 10, 2.0 + d, 2.0)], {"eot": eot})}


def test_ensemble_single_run():
    res = run_ensemble("random", 1, pipeline=_fake_pipeline)["v"]
    b = res.boxes["diff"]["fixed_tail"]
    assert b.n == 1 and b.min == b.max == b.median
    assert 800 <= res.eots[0] <= 1800


def test_ensemble_identical_runs_have_zero_iqr():
    res = run_ensemble("fixed", 7, pipeline=_fake_pipeline)["v"]
    assert res.boxes["diff"]["fixed_tail"].iqr == 0 and len(res.reports) == 7


def test_ensemble_counts_failures(tmp_path):
    def flaky(cfg, eot, parent_seed):
        if parent_seed % 2:
            raise RuntimeError("boom")
        return _fake_pipeline(cfg, eot, parent_seed)

    out = run_ensemble("fixed", 10, pipeline=flaky)
    res = out["v"]
    assert len(res.reports) + len(res.failures) == 10
    res.save_csv(tmp_path / "runs.csv")
    res.save_box_csv(tmp_path / "box.csv")
    assert (tmp_path / "runs.csv").read_text().startswith("run,eot,window")


def test_eot_buckets():
    reps = [EvalReport([WindowResult("w", 1, float(k), 0.0)]) for k in range(4)]
    res = aggregate(reps, [800, 850, 1799, 1800], bucket_width=100)
    assert res.eot_buckets[(800.0, 900.0)]["diff"]["w"].n == 2
    assert res.eot_buckets[(1700.0, 1800.0)]["diff"]["w"].n == 2
    assert len(res.eot_buckets) == 2


def test_report_serialisation(tmp_path):
    rep = EvalReport([WindowResult("a", 2, 1.0, 0.5), WindowResult("b", 0, None, None)], {"x": np.float64(1)})
    rep.save_json(tmp_path / "r.json")
    rep.save_csv(tmp_path / "r.csv")
    assert rep.to_dict()["windows"][0]["diff"] == 0.5
    assert (tmp_path / "r.csv").read_text().splitlines()[2] == "b,0,,,"
