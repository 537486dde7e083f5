import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piecewise_guidance import analysis
from piecewise_guidance.analysis import (GaussianDist, TheoremMismatch, gaussian_kl,
                                         gaussian_kl_monte_carlo, gaussian_kl_mp, kl_theorem1,
                                         kl_theorem1_mp, kl_theorem2, kl_theorem2_mp,
                                         lemma_kl_theorem2_mp, theorem1_pair, theorem_suite)
from piecewise_guidance.operators import make_center_mask, make_dense
from piecewise_guidance.schedule import build_linear_schedule

S = build_linear_schedule()


def _rand_gauss(rng, k):
    A = rng.standard_normal((k, k))
    return GaussianDist(rng.standard_normal(k), A @ A.T + 0.5 * np.eye(k))


def test_kl_one_dimensional_example():
    p = GaussianDist([0.0], [[1.0]])
    q = GaussianDist([1.0], [[2.0]])
    assert gaussian_kl(p, q) == pytest.approx(0.5 * math.log(2.0), rel=1e-14)
    assert gaussian_kl(p, p) == 0.0


def test_kl_isotropic_shift():
    p = GaussianDist(np.zeros(3), 4.0 * np.eye(3))
    q = GaussianDist(np.array([1.0, 2.0, 2.0]), 4.0 * np.eye(3))
    assert gaussian_kl(p, q) == pytest.approx(9.0 / 8.0, rel=1e-14)


def test_kl_float_matches_extended():
    rng = np.random.default_rng(0)
    for _ in range(10):
        p, q = _rand_gauss(rng, 4), _rand_gauss(rng, 4)
        ref = float(gaussian_kl_mp(p, q))
        assert gaussian_kl(p, q) == pytest.approx(ref, rel=1e-10)


@pytest.mark.slow
def test_kl_monte_carlo_oracle():
    rng = np.random.default_rng(1)
    p, q = _rand_gauss(rng, 3), _rand_gauss(rng, 3)
    mc = gaussian_kl_monte_carlo(p, q, 1_000_000, np.random.default_rng(2), antithetic=False)
    assert mc == pytest.approx(gaussian_kl(p, q), rel=0.01)


def test_gaussian_dist_validation():
    with pytest.raises(ValueError):
        GaussianDist(np.zeros(2), np.eye(3))
    with pytest.raises(ValueError):
        GaussianDist(np.zeros(2), [[1.0, 0.2], [0.1, 1.0]])
    with pytest.raises(ValueError):
        gaussian_kl(GaussianDist([0.0], [[1.0]]), GaussianDist(np.zeros(2), np.eye(2)))


def test_closed_forms_by_hand():
    op = make_dense(np.array([[1.0, 0.0, 2.0]]))
    v = np.array([1.0, 5.0, 1.0])
    a = S.ab(500)
    # ||C v||^2 = 9
    assert kl_theorem1(op, S, 500, v, 0.5) == pytest.approx((1 - a) / a * 9 / 0.5, rel=1e-12)
    assert kl_theorem2(op, S, 500, v, v, 0.5) == 0.0
    assert kl_theorem2(op, S, 500, v, np.zeros(3), 0.5) == kl_theorem1(op, S, 500, v, 0.5)


def test_closed_forms_match_lemma_with_mask():
    op = make_center_mask(4, 4, 1, 2, 2)
    rng = np.random.default_rng(3)
    x, v, vh = rng.standard_normal((3, 16))
    for t in (1, 300, 1000):
        kl1 = kl_theorem1(op, S, t, v, 0.3, x_t=x)
        assert kl1 == pytest.approx(gaussian_kl(*theorem1_pair(op, S, t, v, 0.3, x)), rel=1e-10)
        kl_theorem2(op, S, t, v, vh, 0.3, x_t=x)


def test_mismatch_detected(monkeypatch):
    op = make_dense(np.eye(2))
    monkeypatch.setattr(analysis, "gaussian_kl", lambda p, q: 123.0)
    with pytest.raises(TheoremMismatch):
        kl_theorem1(op, S, 10, np.ones(2), 1.0)
    assert kl_theorem1(op, S, 10, np.ones(2), 1.0, check=False) > 0


def test_extended_closed_form_equals_lemma():
    rng = np.random.default_rng(4)
    C = rng.standard_normal((4, 6))
    x, v, vh = rng.standard_normal((3, 6))
    a = S.ab(1000)
    closed = kl_theorem2_mp(C, a, v, vh, 0.1)
    lemma = lemma_kl_theorem2_mp(C, a, x, v, vh, 0.1)
    with mpmath.workdps(50):
        assert abs(closed - lemma) < mpmath.mpf(10) ** -35
    assert float(kl_theorem1_mp(C, a, v, 0.1)) == pytest.approx(
        kl_theorem1(make_dense(C), S, 1000, v, 0.1), rel=1e-10)


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        kl_theorem1(make_dense(np.eye(2)), S, 5, np.ones(2), 0.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.integers(1, 1000), c=st.floats(0.1, 10.0),
       sz=st.floats(0.05, 5.0))
def test_scaling_laws(seed, t, c, sz):
    rng = np.random.default_rng(seed)
    op = make_dense(rng.standard_normal((3, 5)))
    v = rng.standard_normal(5)
    base = kl_theorem1(op, S, t, v, sz, check=False)
    assert kl_theorem1(op, S, t, c * v, sz, check=False) == pytest.approx(c * c * base, rel=1e-10)
    assert kl_theorem1(op, S, t, v, c * sz, check=False) == pytest.approx(base / (c * c), rel=1e-10)
    if t < 1000:
        assert kl_theorem1(op, S, t + 1, v, sz, check=False) > base


def test_better_noise_estimate_beats_low_branch():
    rng = np.random.default_rng(5)
    wins = 0
    for _ in range(200):
        op = make_dense(rng.standard_normal((4, 6)))
        v = rng.standard_normal(6)
        vh = v + 0.3 * rng.standard_normal(6)
        wins += kl_theorem2(op, S, 500, v, vh, 1.0) < kl_theorem1(op, S, 500, v, 1.0)
    assert wins / 200 >= 0.9


def test_theorem_suite_rows_and_fault():
    rows = theorem_suite(S, n_trials=5, mc_samples=2000)
    assert len(rows) == 10
    assert {r.theorem for r in rows} == {1, 2}
    assert all(r.abs_err <= 1e-10 for r in rows)
    assert all(r.t in (1, 250, 500, 750, 1000) and r.sigma_z in (0.1, 1.0) for r in rows)
    bad = theorem_suite(S, n_trials=5, mc_samples=2000, fault=1e-6)
    # the offset survives rounding on KL values up to ~1e8 (ulp ~1.5e-8)
    assert all(r.abs_err > 1e-10 and abs(r.abs_err - 1e-6) < 5e-8 for r in bad)


def test_theorem_suite_monte_carlo_column():
    rows = theorem_suite(S, n_trials=20, seed=3, mc_samples=20000)
    for r in rows:
        # KL here is a pure mean shift, so the antithetic estimate is exact up to rounding
        assert r.mc_estimate == pytest.approx(r.closed_form, rel=1e-6, abs=1e-8)
