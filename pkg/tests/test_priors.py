import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import simpson
from scipy.stats import multivariate_normal

from piecewise_guidance.operators import make_dense, make_random_mask
from piecewise_guidance.priors import (CallCounter, GmmPrior, GmmScoreModel,
                                       finite_difference_vjp, forward_diffuse,
                                       gaussian_exact_posterior, gmm_denoise,
                                       gmm_marginal_logpdf, gmm_predict_noise, gmm_score,
                                       gmm_vjp_denoise, load_gmm)
from piecewise_guidance.schedule import build_linear_schedule

S = build_linear_schedule()


def _random_gmm(n, k, seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 1.5, k)
    A = rng.standard_normal((k, n, n)) * 0.4
    covs = A @ np.swapaxes(A, 1, 2) + 0.2 * np.eye(n)
    return GmmPrior(w / w.sum(), rng.standard_normal((k, n)) * 1.5, covs)


def _logpdf_reference(prior, a, x):
    """Mixture density evaluated component by component with scipy."""
    n = prior.dim
    dens = sum(w * multivariate_normal(np.sqrt(a) * m, a * c + (1 - a) * np.eye(n)).pdf(x)
               for w, m, c in zip(prior.weights, prior.means, prior.covs))
    return np.log(dens)


def _posterior_mean_reference(prior, a, x):
    """E[x0 | x_t] by per-component Gaussian conditioning, no Tweedie."""
    n = prior.dim
    num, den = np.zeros(n), 0.0
    for w, m, c in zip(prior.weights, prior.means, prior.covs):
        Sx = a * c + (1 - a) * np.eye(n)
        lik = w * multivariate_normal(np.sqrt(a) * m, Sx).pdf(x)
        mean = m + np.sqrt(a) * c @ np.linalg.solve(Sx, x - np.sqrt(a) * m)
        num += lik * mean
        den += lik
    return num / den


@pytest.mark.parametrize("t", [0, 1, 100, 500, 1000])
def test_logpdf_matches_scipy(t):
    prior = _random_gmm(3, 4, 0)
    x = np.random.default_rng(1).standard_normal((10, 3))
    got = gmm_marginal_logpdf(prior, S, t, x)
    np.testing.assert_allclose(got, _logpdf_reference(prior, S.ab(t), x), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("t", [0, 300])
def test_logpdf_integrates_to_one(t):
    prior = _random_gmm(2, 3, 4)
    g = np.linspace(-12, 12, 481)
    X, Y = np.meshgrid(g, g, indexing="ij")
    dens = np.exp(gmm_marginal_logpdf(prior, S, t, np.stack([X, Y], -1)))
    total = simpson(simpson(dens, x=g, axis=1), x=g)
    assert total == pytest.approx(1.0, abs=1e-6)


def test_score_vs_finite_differences():
    prior = _random_gmm(4, 3, 2)
    rng = np.random.default_rng(5)
    h = 1e-5
    worst = 0.0
    for i in range(50):
        t = int(rng.integers(1, 1001))
        x = rng.standard_normal(4) * 2
        fd = np.array([(gmm_marginal_logpdf(prior, S, t, x + h * e)
                        - gmm_marginal_logpdf(prior, S, t, x - h * e)) / (2 * h)
                       for e in np.eye(4)])
        worst = max(worst, np.max(np.abs(gmm_score(prior, S, t, x) - fd)))
    assert worst <= 1e-5


@pytest.mark.parametrize("t", [1, 20, 250, 700, 1000])
def test_vjp_vs_finite_differences(t):
    prior = _random_gmm(5, 3, 7)
    rng = np.random.default_rng(t)
    x = rng.standard_normal(5)
    w = rng.standard_normal(5)
    got = gmm_vjp_denoise(prior, S, t, x, w)
    fd = finite_difference_vjp(lambda z, tt: gmm_denoise(prior, S, tt, z), x, t, w, step=1e-5)
    assert np.linalg.norm(got - fd) <= 1e-4 * np.linalg.norm(fd)


def test_vjp_batched_matches_single():
    prior = _random_gmm(3, 2, 0)
    rng = np.random.default_rng(0)
    X, W = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    batched = gmm_vjp_denoise(prior, S, 400, X, W)
    for i in range(4):
        np.testing.assert_allclose(batched[i], gmm_vjp_denoise(prior, S, 400, X[i], W[i]),
                                   rtol=1e-13, atol=1e-14)


def test_vjp_gaussian_closed_form():
    # for a single Gaussian the denoiser is affine with J = sqrt(a) Sigma (a Sigma + (1-a) I)^-1
    rng = np.random.default_rng(2)
    A = rng.standard_normal((3, 3))
    cov = A @ A.T + np.eye(3)
    prior = GmmPrior.gaussian(np.ones(3), cov)
    a = S.ab(350)
    J = np.sqrt(a) * cov @ np.linalg.inv(a * cov + (1 - a) * np.eye(3))
    w = rng.standard_normal(3)
    np.testing.assert_allclose(gmm_vjp_denoise(prior, S, 350, rng.standard_normal(3), w),
                               J.T @ w, rtol=1e-10)


@pytest.mark.parametrize("t", [1, 10, 400, 1000])
def test_tweedie_identity(t):
    prior = _random_gmm(3, 3, 11)
    x = np.random.default_rng(t).standard_normal((20, 3))
    a = S.ab(t)
    eps = gmm_predict_noise(prior, S, t, x)
    x0 = gmm_denoise(prior, S, t, x)
    assert np.max(np.abs(x0 - (x - np.sqrt(1 - a) * eps) / np.sqrt(a))) <= 1e-10
    np.testing.assert_allclose(eps, -np.sqrt(1 - a) * gmm_score(prior, S, t, x), rtol=1e-14)


@pytest.mark.parametrize("t", [5, 300, 900])
def test_denoiser_is_posterior_mean(t):
    prior = _random_gmm(3, 3, 12)
    for x in np.random.default_rng(t).standard_normal((5, 3)):
        np.testing.assert_allclose(gmm_denoise(prior, S, t, x),
                                   _posterior_mean_reference(prior, S.ab(t), x),
                                   rtol=1e-8, atol=1e-9)


def test_score_extreme_points_stay_finite():
    prior = _random_gmm(2, 3, 0)
    x = np.array([[1e3, -1e3], [0.0, 1e4]])
    for t in (1, 1000):
        assert np.all(np.isfinite(gmm_score(prior, S, t, x)))
        assert np.all(np.isfinite(gmm_vjp_denoise(prior, S, t, x, np.ones_like(x))))


def test_standard_normal_closed_forms():
    prior = GmmPrior.standard_normal(4)
    x = np.random.default_rng(0).standard_normal(4)
    # marginal stays N(0, I) for every t
    for t in (1, 500, 1000):
        np.testing.assert_allclose(gmm_score(prior, S, t, x), -x, rtol=1e-14)
        np.testing.assert_allclose(gmm_denoise(prior, S, t, x), np.sqrt(S.ab(t)) * x, atol=1e-13)


def test_exact_posterior_matches_gain_form():
    rng = np.random.default_rng(4)
    A = rng.standard_normal((5, 5))
    Sigma0 = A @ A.T + 0.5 * np.eye(5)
    mu0 = rng.standard_normal(5)
    op = make_dense(rng.standard_normal((3, 5)))
    y = rng.standard_normal(3)
    C = op.to_dense()
    K = Sigma0 @ C.T @ np.linalg.inv(C @ Sigma0 @ C.T + 0.09 * np.eye(3))
    mu, Sig = gaussian_exact_posterior(mu0, Sigma0, op, y, 0.3)
    np.testing.assert_allclose(mu, mu0 + K @ (y - C @ mu0), rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(Sig, Sigma0 - K @ C @ Sigma0, rtol=1e-9, atol=1e-10)
    with pytest.raises(ValueError):
        gaussian_exact_posterior(mu0, Sigma0, op, y, 0.0)


def test_exact_posterior_importance_sampling():
    # self-normalised importance sampling from the prior
    op = make_random_mask(2, 4, 1, 0.5, seed=0)
    prior = GmmPrior.standard_normal(8)
    rng = np.random.default_rng(0)
    y = rng.standard_normal(op.m)
    mu, Sig = gaussian_exact_posterior(np.zeros(8), np.eye(8), op, y, 0.8)
    X = prior.sample(rng, 400_000)
    logw = -0.5 * np.sum((y - op.apply(X)) ** 2, axis=1) / 0.64
    wts = np.exp(logw - logw.max())
    wts /= wts.sum()
    m_is = wts @ X
    np.testing.assert_allclose(m_is, mu, atol=0.02)
    np.testing.assert_allclose(wts @ (X - m_is) ** 2, np.diag(Sig), rtol=0.03)


def test_sample_moments():
    prior = _random_gmm(2, 2, 3)
    X = prior.sample(np.random.default_rng(0), 200_000)
    mean = prior.weights @ prior.means
    np.testing.assert_allclose(X.mean(0), mean, atol=0.02)
    cov = sum(w * (c + np.outer(m - mean, m - mean))
              for w, m, c in zip(prior.weights, prior.means, prior.covs))
    np.testing.assert_allclose(np.cov(X.T), cov, atol=0.05)


def test_forward_diffuse():
    x0, eps = np.ones(3), np.full(3, 2.0)
    a = S.ab(10)
    np.testing.assert_allclose(forward_diffuse(S, 10, x0, eps),
                               np.sqrt(a) + 2 * np.sqrt(1 - a))


@pytest.mark.parametrize("bad", [
    dict(weights=[0.5, 0.6]),
    dict(weights=[1.0, 0.0]),
    dict(covs=[[[1, 0.5], [0.4, 1]], [[1, 0], [0, 1]]]),
    dict(covs=[[[1, 2], [2, 1]], [[1, 0], [0, 1]]]),
])
def test_invalid_gmm(bad):
    kw = dict(weights=[0.5, 0.5], means=np.zeros((2, 2)), covs=[np.eye(2)] * 2)
    kw.update(bad)
    with pytest.raises(ValueError):
        GmmPrior(**kw)


def test_load_gmm(tmp_path):
    prior = _random_gmm(2, 2, 8)
    lines = ["# two components", "2 2"]
    for w, m, c in zip(prior.weights, prior.means, prior.covs):
        lines.append(" ".join(repr(float(v)) for v in [w, *m, *c.ravel()]))
    p = tmp_path / "g.txt"
    p.write_text("\n".join(lines))
    got = load_gmm(p)
    np.testing.assert_array_equal(got.means, prior.means)
    np.testing.assert_array_equal(got.covs, prior.covs)
    p.write_text("1 2\n1 0 0 1 0\n")
    with pytest.raises(ValueError):
        load_gmm(p)


def test_model_counters():
    m = GmmScoreModel(_random_gmm(2, 2, 0), S)
    x = np.zeros(2)
    m.predict_noise(x, 5)
    m.denoise(x, 5)
    m.denoise(x, 6)
    m.vjp_denoise(x, 5, x)
    assert m.counter.snapshot() == {"predict_noise": 1, "denoise": 2, "vjp_denoise": 1}
    m.counter.reset()
    assert m.counter["denoise"] == 0


def test_counter_thread_safe():
    c = CallCounter()

    def work():
        for _ in range(5000):
            c.bump("x")

    threads = [threading.Thread(target=work) for _ in range(8)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert c["x"] == 40000


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(1, 1000))
def test_vjp_is_linear_in_w(seed, t):
    prior = _random_gmm(3, 2, seed % 17)
    rng = np.random.default_rng(seed)
    x, u, v = rng.standard_normal((3, 3))
    a, b = rng.standard_normal(2)
    lhs = gmm_vjp_denoise(prior, S, t, x, a * u + b * v)
    rhs = a * gmm_vjp_denoise(prior, S, t, x, u) + b * gmm_vjp_denoise(prior, S, t, x, v)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)
