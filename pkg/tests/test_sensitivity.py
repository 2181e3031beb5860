import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weightextrap.data import Dataset
from weightextrap.netcore import ModelState, NetworkSpec, build_network
from weightextrap.sensitivity import (FocusSetConfig, SensitivityMatrix, build_focus_set, collect_reset,
                                      collect_sequential)


def line_parent():
    return ModelState(NetworkSpec([1, 1], ["linear"]), [0.0, 0.0])


def two_point_ds():
    return Dataset([[1.0], [2.0]], [1.0, 0.0], [1.0, 2.0], ["x"], ["y"], ordered=True)


def small_problem(n=30, seed=0):
    r = np.random.default_rng(seed)
    X = r.standard_normal((n, 3))
    ds = Dataset(X, np.sin(X[:, 0]), np.arange(n, dtype=float), ["a", "b", "c"], ["y"], ordered=True)
    return build_network(NetworkSpec([3, 4, 1], ["elu", "linear"], seed=seed)), ds


def test_focus_set_sizes():
    X = np.arange(500.0)[:, None]
    Xf, _ = build_focus_set(3, X, X, FocusSetConfig(n=200))
    assert Xf.shape == (400, 1) and np.all(Xf[:200] == 3) and not np.any(Xf[200:] == 3)
    assert np.unique(Xf[200:]).size == 200
    Xf, _ = build_focus_set(7, X, X, FocusSetConfig(n=5, regularize=False))
    np.testing.assert_array_equal(Xf[:, 0], [7] * 5)
    Xf, _ = build_focus_set(0, X[:2], X[:2], FocusSetConfig(n=1))
    np.testing.assert_array_equal(Xf[:, 0], [0, 1])


def test_focus_set_small_training_set_warns():
    X = np.arange(4.0)[:, None]
    with pytest.warns(UserWarning, match="replacement"):
        Xf, _ = build_focus_set(1, X, X, FocusSetConfig(n=10))
    assert Xf.shape[0] == 20 and not np.any(Xf[10:] == 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(1, 40), st.integers(0, 1000))
def test_focus_set_never_redraws_the_focus_row(n_rows, n, seed):
    X = np.arange(float(n_rows))[:, None]
    i = seed % n_rows
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        Xf, Yf = build_focus_set(i, X, X, FocusSetConfig(n=n, seed=seed))
    assert Xf.shape[0] == 2 * n and np.all(Xf[:n] == i) and not np.any(Xf[n:] == i)
    np.testing.assert_array_equal(Xf, Yf)


def test_zero_learning_rate_gives_baseline():
    parent, ds = small_problem()
    cfg = FocusSetConfig(n=10, finetune_lr=0.0)
    for collect in (collect_reset, collect_sequential):
        sens = collect(parent, ds, cfg=cfg)
        assert sens.n_episodes == len(ds)
        assert np.all(sens.W == parent.params) and np.all(sens.anomalies() == 0)


def test_single_step_matches_hand_update():
    cfg = FocusSetConfig(n=5, regularize=False, finetune_lr=0.1, batch_size=32)
    sens = collect_reset(line_parent(), two_point_ds(), episode_indices=[0], cfg=cfg)
    np.testing.assert_allclose(sens.W, [[0.2, 0.2]], rtol=1e-15)


def test_sequential_continues_and_reset_forgets():
    cfg = FocusSetConfig(n=1, regularize=False, finetune_lr=0.1)
    seq = collect_sequential(line_parent(), two_point_ds(), cfg=cfg)
    np.testing.assert_allclose(seq.W, [[0.2, 0.2], [-0.04, 0.08]], atol=1e-15)
    np.testing.assert_allclose(seq.final_params, [-0.04, 0.08], atol=1e-15)
    reset = collect_reset(line_parent(), two_point_ds(), cfg=cfg)
    np.testing.assert_allclose(reset.W, [[0.2, 0.2], [0.0, 0.0]], atol=1e-15)


def test_reset_rows_do_not_depend_on_order():
    parent, ds = small_problem()
    cfg = FocusSetConfig(n=8, finetune_lr=1e-2, seed=3)
    a = collect_reset(parent, ds, episode_indices=[4, 9], cfg=cfg)
    b = collect_reset(parent, ds, episode_indices=[9, 4], cfg=cfg)
    np.testing.assert_array_equal(a.W[0], b.W[1])
    np.testing.assert_array_equal(a.W[1], b.W[0])


def test_sequential_requires_increasing_keys():
    parent, ds = small_problem()
    with pytest.raises(ValueError, match="increasing"):
        collect_sequential(parent, ds, episode_indices=[5, 2])


def test_mask_freezes_rows():
    parent, ds = small_problem()
    mask = parent.spec.layer_mask([-1])
    sens = collect_reset(parent.with_mask(mask), ds, cfg=FocusSetConfig(n=8, finetune_lr=1e-2))
    assert np.all(sens.anomalies()[:, ~mask] == 0) and np.any(sens.anomalies()[:, mask] != 0)


def test_store_anomalies_roundtrip(tmp_path):
    parent, ds = small_problem()
    sens = collect_sequential(parent, ds, cfg=FocusSetConfig(n=8, finetune_lr=1e-2), store_anomalies=True)
    assert sens.store_anomalies
    np.testing.assert_allclose(sens.totals() - parent.params, sens.W, atol=1e-15)
    sens.save_json(tmp_path / "s.json")
    back = SensitivityMatrix.load_json(tmp_path / "s.json")
    assert back.W.tobytes() == sens.W.tobytes() and back.mode == "sequential"
    assert back.final_params.tobytes() == sens.final_params.tobytes()
    sens.save_csv(tmp_path / "v.csv", tmp_path / "m.csv")
    assert len((tmp_path / "v.csv").read_text().splitlines()) == len(ds) + 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_episodes_are_dropped():
    spec = NetworkSpec([1, 1], ["linear"])
    parent = ModelState(spec, [0.0, 0.0])
    ds = Dataset([[1.0], [1e200]], [1.0, 1e200], [0.0, 1.0], ["x"], ["y"])
    sens = collect_reset(parent, ds, cfg=FocusSetConfig(n=1, regularize=False, finetune_lr=1.0))
    assert sens.missing == [1] and sens.episode_indices.tolist() == [0]


def test_episode_index_validation():
    parent, ds = small_problem()
    with pytest.raises(IndexError):
        collect_reset(parent, ds, episode_indices=[100])
