import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weightextrap.data import EOS_FEATURES, EosConfig, gen_toy_eos
from weightextrap.predictors import (EofBasis, FeatureMapSpec, Standardizer, eof_predictors, feature_names,
                                     fit_eof, make_predictors, n_features, poly_features, project,
                                     raw_predictors, reconstruct)


def test_eof_symmetric_pair():
    b = fit_eof([[1.0, 0.0], [-1.0, 0.0]], k=1)
    np.testing.assert_array_equal(b.mean_field, [0, 0])
    np.testing.assert_allclose(b.components, [[1.0, 0.0]], atol=1e-15)
    assert b.explained_fraction[0] == pytest.approx(1.0)


def test_eof_matches_svd_oracle(rng):
    F = rng.standard_normal((80, 12)) @ rng.standard_normal((12, 12))
    b = fit_eof(F, k=5)
    A = F - F.mean(axis=0)
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    np.testing.assert_allclose(b.explained_variance, s[:5] ** 2 / 79, rtol=1e-10)
    np.testing.assert_allclose(np.abs(b.components @ Vt[:5].T), np.eye(5), atol=1e-8)
    assert b.total_variance == pytest.approx(np.sum(s**2) / 79, rel=1e-12)


def test_eof_sign_convention(rng):
    b = fit_eof(rng.standard_normal((30, 6)), k=3)
    lead = b.components[np.arange(3), np.argmax(np.abs(b.components), axis=1)]
    assert np.all(lead > 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_eof_orthonormal_and_residual_equals_trailing_variance(seed, k):
    r = np.random.default_rng(seed)
    F = r.standard_normal((40, 8)) * np.arange(1, 9)
    b = fit_eof(F, k=k)
    np.testing.assert_allclose(b.components @ b.components.T, np.eye(k), atol=1e-10)
    full = fit_eof(F, k=8)
    resid = F - reconstruct(b, project(b, F))
    assert np.sum(resid**2) / 39 == pytest.approx(full.explained_variance[k:].sum(), rel=1e-8, abs=1e-9)


def test_eof_rank_truncation_warns():
    with pytest.warns(UserWarning, match="truncating"):
        b = fit_eof(np.random.default_rng(0).standard_normal((3, 10)), k=5)
    assert b.k_leading == 2


def test_project_examples(rng):
    b = fit_eof(rng.standard_normal((50, 7)), k=4)
    np.testing.assert_allclose(project(b, b.mean_field), 0.0, atol=1e-15)
    np.testing.assert_allclose(project(b, b.mean_field + 3 * b.components[0]), [3, 0, 0, 0], atol=1e-12)
    with pytest.raises(ValueError):
        project(b, np.zeros(6))


def test_eof_serialisation_roundtrip(rng):
    b = fit_eof(rng.standard_normal((20, 5)), k=2)
    back = EofBasis.from_dict(b.to_dict())
    assert back.components.tobytes() == b.components.tobytes()
    assert back.mean_field.tobytes() == b.mean_field.tobytes()


def test_feature_counts_and_order():
    assert n_features(4, FeatureMapSpec(degree=2)) == 15
    np.testing.assert_array_equal(poly_features([2.0, 3.0], FeatureMapSpec(degree=1)), [1, 2, 3])
    np.testing.assert_array_equal(poly_features([2.0, 3.0], FeatureMapSpec(degree=2)), [1, 2, 3, 4, 9, 6])
    assert feature_names(["a", "b"], FeatureMapSpec(degree=2)) == ["1", "a", "b", "a*a", "b*b", "a*b"]
    assert n_features(3, FeatureMapSpec(degree=2, include_interactions=False)) == 7


def test_high_degree_warns():
    with pytest.warns(UserWarning):
        out = poly_features(np.ones((3, 2)), FeatureMapSpec(degree=4))
    assert out.shape == (3, n_features(2, FeatureMapSpec(degree=4)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=5))
def test_degree_two_matches_direct_expansion(r):
    r = np.array(r)
    p = r.size
    direct = [1.0, *r, *(r**2), *[r[a] * r[b] for a in range(p) for b in range(a + 1, p)]]
    np.testing.assert_allclose(poly_features(r, FeatureMapSpec(degree=2)), direct, rtol=1e-15)


def test_standardizer(rng):
    R = rng.standard_normal((200, 3)) * [1, 10, 0.1] + [5, -2, 0]
    st_ = Standardizer.fit(R)
    Z = st_.transform(R)
    np.testing.assert_allclose(Z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(Z.std(axis=0), 1, atol=1e-12)
    np.testing.assert_allclose(st_.inverse(Z), R, rtol=1e-13)
    assert Standardizer.fit(np.ones((4, 1))).scale[0] == 1.0


def test_standardizer_is_frozen_on_fit_rows(rng):
    R = rng.standard_normal((10, 2))
    pm = make_predictors(R, ["a", "b"], fit_rows=R[:5])
    np.testing.assert_allclose(pm.standardized()[:5].mean(axis=0), 0, atol=1e-12)
    new = pm.with_rows(R[5:] + 100)
    assert new.standardizer is pm.standardizer


def test_raw_predictors_eos():
    ds = gen_toy_eos(EosConfig(n_lat=4, n_lon=4))
    pm = raw_predictors(ds, EOS_FEATURES)
    assert pm.rows.shape == (len(ds), 6) and pm.feature_names == EOS_FEATURES


def test_eof_predictors_names(rng):
    F = rng.standard_normal((30, 6))
    pm = eof_predictors(fit_eof(F, 3), F)
    assert pm.feature_names == ("pc1", "pc2", "pc3") and len(pm) == 30
