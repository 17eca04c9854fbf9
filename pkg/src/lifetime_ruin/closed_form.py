"""Closed-form bounds on the ruin probability and smooth test functions.

All formulas are functions of a single "effective wealth" ``z``: the
liquidation value ``L(x, y)`` for the two bounds and ``x + k y`` for the
frictionless value ``psi_k`` at a fixed price multiplier ``k``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .market import MarketParams, liquidation_value

# Counts evaluations where a base slightly above 1 (wealth below b from
# round-off) was clamped instead of producing a value above one.
CLAMP_COUNTER = {"count": 0}


class OutsideSolvencyRegion(ValueError):
    pass


@dataclass(frozen=True)
class ClosedFormConstants:
    d: float
    R: float


@dataclass(frozen=True)
class LyapunovSpec:
    """Strict classical subsolution ``l(x, y) = h(x + k y)``, ``h(z) = -(z - b + 1)^p / p``."""

    k: float
    p: float
    theta: float
    b: float

    def h(self, z):
        return -np.power(np.asarray(z, dtype=float) - self.b + 1.0, self.p) / self.p

    def h1(self, z):
        return -np.power(np.asarray(z, dtype=float) - self.b + 1.0, self.p - 1.0)

    def h2(self, z):
        return (1.0 - self.p) * np.power(np.asarray(z, dtype=float) - self.b + 1.0, self.p - 2.0)

    def __call__(self, x, y):
        return self.h(np.asarray(x) + self.k * np.asarray(y))

    def as_candidate(self) -> "Candidate":
        k = self.k

        def f(x, y):
            return self.h(np.asarray(x) + k * np.asarray(y))

        def grad(x, y):
            g = self.h1(np.asarray(x) + k * np.asarray(y))
            return g, k * g

        def fyy(x, y):
            return k * k * self.h2(np.asarray(x) + k * np.asarray(y))

        return Candidate(f, grad, fyy)


class Candidate(NamedTuple):
    """A C2 field with analytic first derivatives and second y-derivative."""

    f: Callable
    grad: Callable
    fyy: Callable


class OperatorValues(NamedTuple):
    diffusion: np.ndarray  # L f
    buy: np.ndarray  # f_x - (1 - lambda) f_y
    sell: np.ndarray  # -(1 - mu) f_x + f_y


def compute_constants(p: MarketParams) -> ClosedFormConstants:
    R = 0.5 * ((p.alpha - p.r) / p.sigma) ** 2
    s = p.r + p.beta + R
    # s^2 - 4 r beta = (r - beta + R)^2 + 4 beta R >= 0
    disc = (p.r - p.beta + R) ** 2 + 4.0 * p.beta * R
    d = (s + math.sqrt(disc)) / (2.0 * p.r)
    return ClosedFormConstants(d=d, R=R)


def midpoint_k(p: MarketParams) -> float:
    return 0.5 * (p.k_sell + p.k_buy)


def _power_of_ratio(p: MarketParams, z, exponent):
    """((c - r z) / (c - r b))^exponent on b <= z <= c/r, 0 above c/r, clamped to 1 below b."""
    z = np.asarray(z, dtype=float)
    base = (p.c - p.r * z) / (p.c - p.r * p.b)
    over = base > 1.0
    if np.any(over):
        CLAMP_COUNTER["count"] += int(np.count_nonzero(over))
    base = np.clip(base, 0.0, 1.0)
    out = np.power(base, exponent)
    return out[()] if out.ndim == 0 else out


def _check_inside(p: MarketParams, z, what: str, tol: float):
    if np.any(np.asarray(z) < p.b - tol):
        raise OutsideSolvencyRegion(f"{what} below the ruin level b={p.b}")


def upper_bound_psi(p: MarketParams, x, y, tol: float = 1e-9):
    """Ruin probability of liquidating immediately and never trading again.

    Raises
    ------
    OutsideSolvencyRegion
        If ``L(x, y) < b - tol``.
    """
    L = liquidation_value(p, x, y)
    _check_inside(p, L, "liquidation value", tol)
    return _power_of_ratio(p, L, p.beta / p.r)


def frictionless_psi_k(p: MarketParams, cf: ClosedFormConstants, k: float, x, y, tol: float = 1e-9):
    """Minimal frictionless ruin probability at wealth ``x + k y``."""
    if not p.k_sell - 1e-15 <= k <= p.k_buy + 1e-15:
        raise ValueError(f"k={k} outside [1-mu, 1/(1-lambda)]")
    z = np.asarray(x, dtype=float) + k * np.asarray(y, dtype=float)
    _check_inside(p, z, "x + k y", tol)
    return _power_of_ratio(p, z, cf.d)


def lower_bound_psi(p: MarketParams, cf: ClosedFormConstants, x, y, tol: float = 1e-9):
    L = liquidation_value(p, x, y)
    _check_inside(p, L, "liquidation value", tol)
    return _power_of_ratio(p, L, cf.d)


def lower_bound_by_branches(p: MarketParams, cf: ClosedFormConstants, x, y):
    """``max(psi_{1-mu}, psi_{1/(1-lambda)})``; equals ``lower_bound_psi``."""
    return np.maximum(
        frictionless_psi_k(p, cf, p.k_sell, x, y), frictionless_psi_k(p, cf, p.k_buy, x, y)
    )


def lyapunov_theta(p: MarketParams, k: float) -> float:
    return p.r / (1.0 - p.lambda_buy) + p.alpha * k


def lyapunov_p_max(p: MarketParams, k: float) -> float:
    """Root of ``beta = 0.5 theta^2 / (sigma^2 k^2) * q / (1 - q)``."""
    a = 0.5 * lyapunov_theta(p, k) ** 2 / (p.sigma**2 * k**2)
    # q / (1 - q) = beta / a
    ratio = p.beta / a
    return ratio / (1.0 + ratio)


def build_lyapunov(p: MarketParams, k: float | None = None, p_exp: float | None = None) -> LyapunovSpec:
    """Strict subsolution used by the comparison argument.

    ``k`` defaults to the midpoint of the bid-ask interval and ``p_exp`` to
    half of the largest admissible exponent.
    """
    if k is None:
        k = midpoint_k(p)
    if not p.k_sell < k < p.k_buy:
        raise ValueError(f"k={k} must lie strictly inside ({p.k_sell}, {p.k_buy})")
    theta = lyapunov_theta(p, k)
    p_max = lyapunov_p_max(p, k)
    if p_exp is None:
        p_exp = 0.5 * p_max
    if not 0.0 < p_exp < 1.0:
        raise ValueError("p_exp must lie in (0, 1)")
    lhs = 0.5 * theta**2 / (p.sigma**2 * k**2) * p_exp / (1.0 - p_exp)
    if not p.beta > lhs:
        raise ValueError(
            f"p_exp={p_exp} violates beta > theta^2 p / (2 sigma^2 k^2 (1 - p)) (p_max={p_max:.6g})"
        )
    return LyapunovSpec(k=k, p=p_exp, theta=theta, b=p.b)


def vi_operator_eval(p: MarketParams, cand: Candidate, x, y) -> OperatorValues:
    """Evaluate the three operators of the variational inequality on a smooth field."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    f = np.asarray(cand.f(x, y), dtype=float)
    fx, fy = (np.asarray(g, dtype=float) for g in cand.grad(x, y))
    fyy = np.asarray(cand.fyy(x, y), dtype=float)
    Lf = p.beta * f - (p.r * x - p.c) * fx - p.alpha * y * fy - 0.5 * p.sigma**2 * y**2 * fyy
    buy = fx - (1.0 - p.lambda_buy) * fy
    sell = -(1.0 - p.mu_sell) * fx + fy
    return OperatorValues(Lf, buy, sell)


def _ratio_candidate(p: MarketParams, exponent: float, zfun, dz_dx, dz_dy):
    """Candidate ``g(z(x, y))`` with ``g(z) = ((c - r z)/(c - r b))^exponent``.

    ``dz_dx``/``dz_dy`` give the (piecewise constant) gradient of ``z``.
    """
    scale = p.c - p.r * p.b

    def base(x, y):
        return np.clip((p.c - p.r * zfun(x, y)) / scale, 0.0, None)

    def f(x, y):
        return np.power(base(x, y), exponent)

    def g1(x, y):
        bb = base(x, y)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = -exponent * p.r / scale * np.power(bb, exponent - 1.0)
        return np.where(bb > 0, out, 0.0)

    def grad(x, y):
        d = g1(x, y)
        return d * dz_dx(x, y), d * dz_dy(x, y)

    def fyy(x, y):
        bb = base(x, y)
        with np.errstate(divide="ignore", invalid="ignore"):
            g2 = exponent * (exponent - 1.0) * (p.r / scale) ** 2 * np.power(bb, exponent - 2.0)
        return np.where(bb > 0, g2 * dz_dy(x, y) ** 2, 0.0)

    return Candidate(f, grad, fyy)


def psi_k_candidate(p: MarketParams, cf: ClosedFormConstants, k: float) -> Candidate:
    return _ratio_candidate(
        p,
        cf.d,
        lambda x, y: np.asarray(x) + k * np.asarray(y),
        lambda x, y: np.ones_like(np.asarray(x, dtype=float)),
        lambda x, y: np.full_like(np.asarray(x, dtype=float), k),
    )


def _liquidation_slope_y(p):
    def dz_dy(x, y):
        y = np.asarray(y, dtype=float)
        # one-sided derivative from above at y = 0
        return np.where(y >= 0, p.k_sell, p.k_buy)

    return dz_dy


def upper_bound_candidate(p: MarketParams) -> Candidate:
    """``psi_upper`` as a candidate; smooth away from ``y = 0``."""
    return _ratio_candidate(
        p,
        p.beta / p.r,
        lambda x, y: liquidation_value(p, x, y),
        lambda x, y: np.ones_like(np.asarray(x, dtype=float)),
        _liquidation_slope_y(p),
    )


def lower_bound_candidate(p: MarketParams, cf: ClosedFormConstants) -> Candidate:
    return _ratio_candidate(
        p,
        cf.d,
        lambda x, y: liquidation_value(p, x, y),
        lambda x, y: np.ones_like(np.asarray(x, dtype=float)),
        _liquidation_slope_y(p),
    )


def warn_if_clamped(before: int) -> None:
    n = CLAMP_COUNTER["count"] - before
    if n:
        warnings.warn(f"{n} closed-form evaluations clamped to the ruin boundary value", stacklevel=2)
