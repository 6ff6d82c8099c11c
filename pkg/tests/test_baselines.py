import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from epiout import baselines, nn
from conftest import central_diff, rel_err


def dense_posterior(x, y, xq, ls, sf2, sn2):
    """Posterior from plain solves against the full matrices; no factor reuse."""
    def k(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) / ls) ** 2
        return sf2 * np.exp(-0.5 * d2.sum(-1))
    K = k(x, x) + sn2 * np.eye(len(x))
    ks = k(xq, x)
    mean = ks @ np.linalg.solve(K, y)
    var = sf2 - np.einsum("ij,ji->i", ks, np.linalg.solve(K, ks.T))
    return mean, var


def dense_nlml(logp, x, y):
    d = x.shape[1]
    ls, sf2, sn2 = np.exp(logp[:d]), np.exp(logp[d]), np.exp(logp[d + 1])
    d2 = ((x[:, None, :] - x[None, :, :]) / ls) ** 2
    K = sf2 * np.exp(-0.5 * d2.sum(-1)) + sn2 * np.eye(len(x))
    _, logdet = np.linalg.slogdet(K)
    return 0.5 * y @ np.linalg.solve(K, y) + 0.5 * logdet + 0.5 * len(x) * np.log(2 * np.pi)


# ---------------------------------------------------------------------- GP

def test_posterior_matches_dense_oracle():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (20, 1))
    y = np.sin(3 * x[:, 0]) + 0.1 * rng.standard_normal(20)
    xq = np.linspace(-3, 3, 50)[:, None]
    m = baselines.gp_condition(x, y, [0.7], 1.3, 0.05)
    mean, var = baselines.gp_predict(m, xq)
    om, ov = dense_posterior(x, y, xq, np.array([0.7]), 1.3, 0.05)
    assert np.max(np.abs(mean - om)) < 1e-8
    assert np.max(np.abs(var - ov)) < 1e-8


def test_fitted_posterior_matches_dense_oracle():
    rng = np.random.default_rng(1)
    x = rng.uniform(-2, 2, (20, 1))
    y = np.sin(3 * x[:, 0]) + 0.05 * rng.standard_normal(20)
    m = baselines.gp_fit(x, y, restarts=2, seed=0, steps=200)
    xq = np.linspace(-3, 3, 50)[:, None]
    mean, var = baselines.gp_predict(m, xq)
    om, ov = dense_posterior(x, y, xq, m.lengthscales, m.signal_var, m.noise_var + m.jitter)
    assert np.max(np.abs(mean - om)) < 1e-8
    assert np.max(np.abs(var - ov)) < 1e-8


def test_single_point_interpolates():
    m = baselines.gp_condition([[0.5]], [2.0], [1.0], 1.0, 1e-12)
    mean, var = baselines.gp_predict(m, [[0.5]])
    assert mean[0] == pytest.approx(2.0, abs=1e-9)
    assert var[0] < 1e-8


def test_far_query_reverts_to_prior():
    m = baselines.gp_condition(np.linspace(0, 1, 10)[:, None], np.ones(10), [0.3], 2.0, 0.01)
    mean, var = baselines.gp_predict(m, [[10 * 0.3 + 1.0 + 1e-9]])
    assert var[0] == pytest.approx(2.0, rel=0.01)
    assert abs(mean[0]) < 1e-6


def test_variance_bounds():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((30, 2))
    m = baselines.gp_fit(x, x[:, 0] * x[:, 1], restarts=1, steps=100)
    _, var = baselines.gp_predict(m, rng.standard_normal((500, 2)) * 3)
    assert np.all(var >= 0)
    assert np.all(var <= m.signal_var + m.noise_var + 1e-9)


def test_cholesky_factor_shape():
    m = baselines.gp_fit(np.linspace(0, 1, 8)[:, None], np.arange(8.0), restarts=1, steps=50)
    assert np.allclose(m.chol, np.tril(m.chol))
    assert np.all(np.diag(m.chol) > 0)


def test_nlml_value_and_gradient():
    rng = np.random.default_rng(4)
    for _ in range(10):
        d = int(rng.integers(1, 4))
        x = rng.standard_normal((15, d))
        y = rng.standard_normal(15)
        logp = rng.normal(0, 0.5, d + 2)
        val, grad = baselines.gp_nlml(logp, x, y)
        assert val == pytest.approx(dense_nlml(logp, x, y), rel=1e-10)
        fd = central_diff(lambda p: baselines.gp_nlml(p, x, y)[0], logp)
        assert rel_err(grad, fd) < 1e-4


def test_fit_improves_marginal_likelihood():
    x = np.linspace(-2, 2, 30)[:, None]
    y = np.sin(2 * x[:, 0])
    m = baselines.gp_fit(x, y, restarts=3, seed=0, steps=300)
    assert baselines.gp_nlml(m.log_params, x, y)[0] < baselines.gp_nlml(np.zeros(3), x, y)[0]


def test_subsampling_cap():
    x = np.linspace(0, 1, 40)[:, None]
    m = baselines.gp_fit(x, x[:, 0], restarts=1, steps=5, cap=25)
    assert len(m.x) == 25


def test_cholesky_failure_raises():
    K = np.array([[1.0, 2.0], [2.0, 1.0]]) - 10 * np.eye(2)
    with pytest.raises(baselines.CholeskyError):
        baselines._chol(K)


def test_gp_needs_data():
    with pytest.raises(ValueError):
        baselines.gp_fit(np.empty((0, 1)), np.empty(0))


# ----------------------------------------------------------------- dropout

def test_zero_dropout_is_deterministic_forward():
    p = nn.init_params(1, (10, 10), seed=0)
    model = baselines.DropoutModel(p, p=0.0, samples=5)
    x = np.linspace(-1, 1, 9)[:, None]
    mean, var = baselines.dropout_predict(model, x)
    assert np.all(var == 0)
    assert np.allclose(mean, nn.forward(p, x).mean, rtol=0, atol=1e-15)


def test_dropout_prediction_is_seeded():
    model = baselines.DropoutModel(nn.init_params(1, (10, 10), seed=0), p=0.2, samples=10)
    x = np.linspace(-1, 1, 5)[:, None]
    a = baselines.dropout_predict(model, x, seed=3)
    b = baselines.dropout_predict(model, x, seed=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_dropout_masks_are_scaled():
    # identity-like net: one hidden relu layer of width 1000 with equal weights
    W1 = np.ones((1, 1000))
    W2 = np.full((1000, 2), 1.0 / 1000)
    p = nn.NetworkParams([W1, W2], [np.zeros(1000), np.zeros(2)], ["relu", "identity"])
    out = [nn.forward(p, [1.0], dropout=(0.3, np.random.default_rng(s))).mean[0]
           for s in range(200)]
    assert np.mean(out) == pytest.approx(1.0, abs=0.01)


def test_dropout_variance_grows_off_data():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (100, 1))
    model = baselines.dropout_fit(x, np.sin(np.pi * x), epochs=2000, seed=0)
    _, var = baselines.dropout_predict(model, np.array([[0.0], [3.0]]), seed=0)
    assert var[1, 0] > var[0, 0]


def test_more_samples_reduce_estimate_spread():
    model = baselines.DropoutModel(nn.init_params(1, (20, 20), seed=1), p=0.2, samples=5)
    x = np.array([[0.7]])
    spread = []
    for k in (5, 100):
        model.samples = k
        v = [baselines.dropout_predict(model, x, seed=s)[1][0, 0] for s in range(20)]
        spread.append(np.std(v))
    assert spread[1] < spread[0]


def test_sample_order_does_not_change_variance():
    model = baselines.DropoutModel(nn.init_params(1, (20,), seed=2), p=0.2, samples=30)
    streams = np.random.SeedSequence(0).spawn(30)
    outs = np.array([nn.forward(model.params, [[0.4]], dropout=(0.2, np.random.default_rng(s))).mean[0, 0]
                     for s in streams])
    _, var = baselines.dropout_predict(model, [[0.4]], seed=0)
    assert var[0, 0] == pytest.approx(np.var(outs[::-1], ddof=1), rel=1e-12)


@pytest.mark.parametrize("kw", [dict(p=1.0), dict(p=-0.1), dict(samples=1)])
def test_dropout_model_validation(kw):
    with pytest.raises(ValueError):
        baselines.DropoutModel(nn.init_params(1, (2,), seed=0), **kw)


# ----------------------------------------------------------- normalisation

def test_normalize_examples():
    assert baselines.normalize_uncertainty([2, 4, 6]).tolist() == [0, 0.5, 1]
    with pytest.warns(UserWarning):
        assert baselines.normalize_uncertainty([3, 3]).tolist() == [0, 0]
    with pytest.raises(ValueError):
        baselines.normalize_uncertainty([])


def test_normalize_with_reference_clips():
    out = baselines.normalize_uncertainty([0.0, 5.0, 20.0], reference=[1.0, 11.0])
    assert out.tolist() == [0.0, 0.4, 1.0]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0, 1e3)),
       st.floats(1e-2, 1e2), st.floats(-1e2, 1e2))
def test_normalize_affine_invariant(v, a, b):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = baselines.normalize_uncertainty(v)
        moved = baselines.normalize_uncertainty(a * v + b)
    if np.ptp(v) > 1e-6 * max(1.0, np.abs(v).max()):
        assert np.allclose(base, moved, atol=1e-6)
