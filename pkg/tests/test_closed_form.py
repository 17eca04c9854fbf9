import numpy as np
import pytest
from scipy.optimize import brentq

from lifetime_ruin.checks import lyapunov_sample, lyapunov_scan
from lifetime_ruin.closed_form import (
    Candidate,
    OutsideSolvencyRegion,
    build_lyapunov,
    compute_constants,
    frictionless_psi_k,
    lower_bound_by_branches,
    lower_bound_psi,
    lyapunov_p_max,
    midpoint_k,
    psi_k_candidate,
    upper_bound_candidate,
    upper_bound_psi,
    vi_operator_eval,
)
from lifetime_ruin.market import MarketParams


def quadratic_root_oracle(p):
    # d is the larger root of r d^2 - (r + beta + R) d + beta = 0
    R = 0.5 * ((p.alpha - p.r) / p.sigma) ** 2
    roots = np.roots([p.r, -(p.r + p.beta + R), p.beta])
    return float(np.max(roots.real)), R


def test_reference_constants(params):
    cf = compute_constants(params)
    assert cf.R == pytest.approx(0.02, abs=1e-15)
    assert cf.d == pytest.approx(2.0, abs=1e-14)


@pytest.mark.parametrize(
    "kw", [{}, {"beta": 0.1}, {"beta": 0.01}, {"alpha": 0.2, "sigma": 0.5}, {"r": 0.01, "c": 0.3}],
)
def test_constants_match_root_oracle(kw):
    p = MarketParams(**kw)
    d, R = quadratic_root_oracle(p)
    cf = compute_constants(p)
    assert cf.d == pytest.approx(d, rel=1e-12)
    assert cf.R == pytest.approx(R, rel=1e-14)
    assert cf.d > 1 and cf.d >= p.beta / p.r


def test_d_limit_small_premium():
    # R -> 0 with beta > r gives d -> beta / r
    p = MarketParams(alpha=0.04 + 1e-7, beta=0.1)
    assert compute_constants(p).d == pytest.approx(p.beta / p.r, rel=1e-9)


def test_upper_bound_examples(params):
    assert upper_bound_psi(params, 0.0, 0.0) == 1.0
    assert upper_bound_psi(params, 25.0, 0.0) == 0.0
    assert upper_bound_psi(params, 12.5, 0.0) == pytest.approx(0.5, abs=1e-15)
    assert upper_bound_psi(params, 40.0, 3.0) == 0.0
    with pytest.raises(OutsideSolvencyRegion):
        upper_bound_psi(params, -1.0, 0.0)


def test_frictionless_examples(params):
    cf = compute_constants(params)
    assert frictionless_psi_k(params, cf, 1.0, 0.0, 0.0) == 1.0
    assert frictionless_psi_k(params, cf, 1.0, 20.0, 5.0) == 0.0
    assert frictionless_psi_k(params, cf, 1.0, 10.0, 2.5) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(ValueError):
        frictionless_psi_k(params, cf, 2.0, 10.0, 2.5)
    with pytest.raises(OutsideSolvencyRegion):
        frictionless_psi_k(params, cf, 1.0, -3.0, 2.0)


def test_lower_bound_examples(params):
    cf = compute_constants(params)
    assert lower_bound_psi(params, cf, 0.0, 0.0) == 1.0
    assert lower_bound_psi(params, cf, 25.0, 0.0) == 0.0
    # every point with L = 12.5, long and short
    for y in (-3.0, 0.0, 4.0, 10.0):
        x = 12.5 - (0.9 * y if y > 0 else y / 0.9)
        assert lower_bound_psi(params, cf, x, y) == pytest.approx(0.25, abs=1e-14)
        assert lower_bound_by_branches(params, cf, x, y) == pytest.approx(0.25, abs=1e-14)


def test_lyapunov_default_exponent_below_oracle(params):
    k = 1.0
    theta = 0.04 / 0.9 + 0.08
    a = 0.5 * theta**2 / (0.2**2 * k**2)
    p_max = brentq(lambda q: params.beta - a * q / (1 - q), 1e-12, 1 - 1e-12)
    assert lyapunov_p_max(params, k) == pytest.approx(p_max, rel=1e-10)
    spec = build_lyapunov(params, k)
    assert spec.theta == pytest.approx(theta, rel=1e-14)
    assert 0 < spec.p < p_max
    assert spec.p == pytest.approx(0.5 * p_max, rel=1e-12)


def test_lyapunov_rejects_bad_inputs(params):
    with pytest.raises(ValueError):
        build_lyapunov(params, 0.5)
    with pytest.raises(ValueError):
        build_lyapunov(params, 1.0, p_exp=0.99)
    # tiny exponents always satisfy the inequality
    assert build_lyapunov(params, 1.0, p_exp=1e-9).p == 1e-9


def test_lyapunov_negative_and_coercive(params):
    spec = build_lyapunov(params)
    assert spec(12.5, 0.0) < 0
    near, far = spec(12.5, 0.0), spec(-1e6, 1e6 * 1.05)
    assert far < near
    assert spec(-1e12, 1e12 * 1.05) < spec(-1e8, 1e8 * 1.05) < near


def test_operator_eval_constant(params):
    kappa = 0.37
    cand = Candidate(
        lambda x, y: np.full_like(np.asarray(x, float), kappa),
        lambda x, y: (np.zeros_like(np.asarray(x, float)), np.zeros_like(np.asarray(x, float))),
        lambda x, y: np.zeros_like(np.asarray(x, float)),
    )
    ops = vi_operator_eval(params, cand, np.array([1.0, 5.0]), np.array([0.0, 3.0]))
    np.testing.assert_allclose(ops.diffusion, params.beta * kappa)
    np.testing.assert_array_equal(ops.buy, 0.0)
    np.testing.assert_array_equal(ops.sell, 0.0)


def test_psi_k_gradient_terms_negative(params, rng):
    cf = compute_constants(params)
    k = midpoint_k(params)
    z = rng.uniform(0.5, 24.5, 500)
    y = rng.uniform(-5, 30, 500)
    ops = vi_operator_eval(params, psi_k_candidate(params, cf, k), z - k * y, y)
    assert np.all(ops.buy < 0) and np.all(ops.sell < 0)


@pytest.mark.parametrize("kw", [{}, {"beta": 0.1}, {"beta": 0.02, "r": 0.05}])
def test_upper_bound_kills_drift_on_axis(kw):
    p = MarketParams(**kw)
    x = np.linspace(0.1, 0.95 * p.safe_level, 50)
    ops = vi_operator_eval(p, upper_bound_candidate(p), x, np.zeros_like(x))
    np.testing.assert_allclose(ops.diffusion, 0.0, atol=1e-15)


def test_lyapunov_strict_subsolution_on_sample(params):
    x, y = lyapunov_sample(params, -6.25, 37.5, 100)
    assert x.size == 10_000
    assert lyapunov_scan(params, build_lyapunov(params), x, y) < 0
