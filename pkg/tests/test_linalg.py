import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from reinjectr.errors import InvalidInput
from reinjectr.linalg import layer_norm, pca_fit, pca_project, pca_reconstruct, restore, svd, token_stats


def test_svd_identity():
    res = svd(np.eye(3))
    np.testing.assert_allclose(res.sigma, [1, 1, 1])


def test_svd_diagonal():
    np.testing.assert_allclose(svd(np.diag([3.0, 1.0])).sigma, [3, 1])


def test_svd_reconstruction_and_orthogonality(rng):
    a = rng.standard_normal((20, 8))
    res = svd(a)
    assert np.linalg.norm(res.reconstruct() - a) / np.linalg.norm(a) < 1e-10
    np.testing.assert_allclose(res.u.T @ res.u, np.eye(8), atol=1e-10)
    np.testing.assert_allclose(res.vt @ res.vt.T, np.eye(8), atol=1e-10)
    assert np.all(np.diff(res.sigma) <= 0)


def test_svd_sign_convention(rng):
    a = rng.standard_normal((12, 5))
    for res in (svd(a), svd(-a)):
        pivots = np.abs(res.u).argmax(axis=0)
        assert np.all(res.u[pivots, np.arange(5)] > 0)


def test_svd_rejects_non_finite():
    with pytest.raises(InvalidInput):
        svd(np.array([[1.0, np.nan]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_svd_reconstruction_property(m, n, seed):
    a = np.random.default_rng(seed).standard_normal((m, n))
    res = svd(a)
    assert np.linalg.norm(res.reconstruct() - a) / np.linalg.norm(a) < 1e-10


def test_token_stats_constant_row():
    st_ = token_stats(np.array([[2.0, 2.0, 2.0]]), eps=1e-6)
    assert st_.mean[0] == 2.0
    assert st_.std[0] == pytest.approx(np.sqrt(1e-6))


def test_token_stats_two_point():
    st_ = token_stats(np.array([[0.0, 2.0]]), eps=1e-6)
    assert st_.mean[0] == 1.0
    assert st_.std[0] == pytest.approx(np.sqrt(1 + 1e-6), rel=1e-15)


@pytest.mark.parametrize("eps", [0.0, -1e-3])
def test_token_stats_rejects_bad_eps(eps):
    with pytest.raises(InvalidInput):
        token_stats(np.array([[1.0, -1.0]]), eps=eps)


def test_layer_norm_two_point():
    np.testing.assert_allclose(layer_norm(np.array([[1.0, 3.0]]), eps=1e-14), [[-1.0, 1.0]], atol=1e-12)


def test_layer_norm_constant_row():
    np.testing.assert_allclose(layer_norm(np.array([[5.0, 5.0, 5.0]])), 0.0, atol=1e-12)


def test_layer_norm_row_moments(rng):
    out = layer_norm(3.0 * rng.standard_normal((30, 16)) + 2.0, eps=1e-12)
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-8)
    np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(-1e3, 1e3)))
def test_layer_norm_restore_round_trip(t):
    back = restore(layer_norm(t), token_stats(t))
    np.testing.assert_allclose(back, t, rtol=0, atol=1e-12 * max(1.0, np.abs(t).max()))


def test_pca_line_explains_everything(rng):
    s = rng.standard_normal(50)
    x = np.outer(s, [3.0, 4.0]) + [1.0, -2.0]
    model = pca_fit(x, 1)
    total = x.var(axis=0).sum()
    assert model.explained_variance[0] / total == pytest.approx(1.0, abs=1e-12)


def test_pca_full_rank_is_isometry(rng):
    x = rng.standard_normal((500, 8))
    model = pca_fit(x, 8)
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(8), atol=1e-8)
    proj = pca_project(model, x)
    d_in = np.linalg.norm(x[:, None] - x[None], axis=-1)
    d_out = np.linalg.norm(proj[:, None] - proj[None], axis=-1)
    assert np.max(np.abs(d_in - d_out)) < 1e-8


def test_pca_reconstruction_monotone(rng):
    centers = np.array([[5, 0, 0], [0, 5, 0], [0, 0, 5]], dtype=float)
    x = centers[rng.integers(3, size=300)] + 0.3 * rng.standard_normal((300, 3))
    errs = []
    for q in (1, 2):
        model = pca_fit(x, q)
        errs.append(np.linalg.norm(pca_reconstruct(model, pca_project(model, x)) - x))
    assert errs[1] <= errs[0]


def test_pca_explained_variance_descending(rng):
    model = pca_fit(rng.standard_normal((40, 6)) * [5, 4, 3, 2, 1, 0.5], 4)
    assert np.all(np.diff(model.explained_variance) <= 0)


@pytest.mark.parametrize("q", [0, 9, 20])
def test_pca_rejects_bad_q(rng, q):
    with pytest.raises(InvalidInput):
        pca_fit(rng.standard_normal((10, 8)), q)
