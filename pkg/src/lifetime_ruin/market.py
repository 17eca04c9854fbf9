"""Market parameters, solvency-region geometry and transaction arithmetic."""

from __future__ import annotations

import configparser
import enum
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

DEFAULT_TOL = 1e-9

# config key -> dataclass field
_CONFIG_KEYS = {
    "r": "r",
    "alpha": "alpha",
    "sigma": "sigma",
    "beta": "beta",
    "lambda": "lambda_buy",
    "mu": "mu_sell",
    "c": "c",
    "b": "b",
}


class ConfigError(ValueError):
    """Raised for missing, unknown or malformed configuration keys."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


class PointClass(enum.IntEnum):
    BELOW_RUIN = 0
    RUIN_BOUNDARY = 1
    INTERIOR = 2
    SAFE_BOUNDARY = 3
    SAFE = 4


class Action(enum.IntEnum):
    BUY = 1
    SELL = 2


@dataclass(frozen=True)
class MarketParams:
    """Model constants.

    Parameters
    ----------
    r : float
        Risk-free rate.
    alpha : float
        Stock drift, must exceed ``r``.
    sigma : float
        Stock volatility.
    beta : float
        Hazard rate of the exponential death time.
    lambda_buy, mu_sell : float
        Proportional costs on purchases and sales, both in (0, 1).
    c : float
        Consumption rate.
    b : float
        Ruin level, must lie below the safe level ``c / r``.
    """

    r: float = 0.04
    alpha: float = 0.08
    sigma: float = 0.2
    beta: float = 0.04
    lambda_buy: float = 0.1
    mu_sell: float = 0.1
    c: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float, np.floating)) or not math.isfinite(v):
                raise ValueError(f"{f.name} must be a finite number, got {v!r}")
            object.__setattr__(self, f.name, float(v))
        for name in ("r", "sigma", "beta", "c"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not self.alpha > self.r:
            raise ValueError("alpha must exceed r")
        for name in ("lambda_buy", "mu_sell"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.b < self.c / self.r:
            raise ValueError("b must be below the safe level c / r")

    @property
    def safe_level(self) -> float:
        return self.c / self.r

    @property
    def k_sell(self) -> float:
        """Bid multiplier 1 - mu."""
        return 1.0 - self.mu_sell

    @property
    def k_buy(self) -> float:
        """Ask multiplier 1 / (1 - lambda)."""
        return 1.0 / (1.0 - self.lambda_buy)

    def replace(self, **changes) -> "MarketParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return MarketParams(**d)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, object]) -> "MarketParams":
        """Build from flat config keys ``r, alpha, sigma, beta, lambda, mu, c, b``."""
        unknown = sorted(set(mapping) - set(_CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"unknown market key: {unknown[0]}", unknown[0])
        kwargs = {}
        for key, attr in _CONFIG_KEYS.items():
            if key not in mapping:
                raise ConfigError(f"missing market key: {key}", key)
            try:
                kwargs[attr] = float(mapping[key])
            except (TypeError, ValueError):
                raise ConfigError(f"market key {key} is not a number: {mapping[key]!r}", key) from None
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"invalid market parameters: {exc}") from None

    @classmethod
    def from_file(cls, path: str | Path) -> "MarketParams":
        """Read a flat ``key = value`` file, or the ``[market]`` section of a sectioned one."""
        text = Path(path).read_text()
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.MissingSectionHeaderError:
            cp.read_string("[market]\n" + text)
        if not cp.has_section("market"):
            raise ConfigError("no market parameters found", "market")
        return cls.from_mapping(dict(cp.items("market")))

    def to_mapping(self) -> dict[str, float]:
        return {key: getattr(self, attr) for key, attr in _CONFIG_KEYS.items()}


def liquidation_value(p: MarketParams, x, y):
    """Cash obtained by closing the stock position: x + (1-mu) y+ - y- / (1-lambda)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = x + p.k_sell * np.maximum(y, 0.0) - np.maximum(-y, 0.0) * p.k_buy
    return out[()] if out.ndim == 0 else out


def classify_point(p: MarketParams, x, y, tol: float = DEFAULT_TOL):
    """Locate ``(x, y)`` relative to the ruin level and the safe level.

    Works elementwise on arrays; returns ``PointClass`` for scalars and an
    ``int8`` array of class codes otherwise.
    """
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    L = np.asarray(liquidation_value(p, x, y))
    cls = np.full(L.shape, PointClass.INTERIOR, dtype=np.int8)
    cls[L < p.b - tol] = PointClass.BELOW_RUIN
    cls[np.abs(L - p.b) <= tol] = PointClass.RUIN_BOUNDARY
    cls[np.abs(L - p.safe_level) <= tol] = PointClass.SAFE_BOUNDARY
    cls[L > p.safe_level + tol] = PointClass.SAFE
    if cls.ndim == 0:
        return PointClass(int(cls))
    return cls


def transaction_shift(p: MarketParams, x, y, action: Action, h):
    """Move ``(x, y)`` by a purchase or sale of size ``h`` >= 0.

    A purchase spends ``h`` cash for ``(1 - lambda) h`` of stock; a sale
    turns ``h`` of stock into ``(1 - mu) h`` cash.
    """
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise ValueError("transaction size must be nonnegative")
    action = Action(action)
    if action is Action.BUY:
        nx, ny = x - h, y + (1.0 - p.lambda_buy) * h
    else:
        nx, ny = x + (1.0 - p.mu_sell) * h, y - h
    if np.ndim(nx) == 0:
        return float(nx), float(ny)
    return nx, ny


def full_liquidation_amounts(y, p: MarketParams):
    """Buy and sell sizes that close the stock position ``y`` completely."""
    y = np.asarray(y, dtype=float)
    buy = np.maximum(-y, 0.0) / (1.0 - p.lambda_buy)
    sell = np.maximum(y, 0.0)
    if buy.ndim == 0:
        return float(buy), float(sell)
    return buy, sell


def liquidate(p: MarketParams, x, y):
    """Apply both liquidation transactions; lands at ``(L(x, y), 0)``."""
    buy, sell = full_liquidation_amounts(y, p)
    x1, y1 = transaction_shift(p, x, y, Action.BUY, buy)
    return transaction_shift(p, x1, y1, Action.SELL, sell)


def ray_crossing(p: MarketParams, x, y, ux, uy, t_max, level):
    """Smallest ``t`` in ``[0, t_max]`` with ``L(x + t ux, y + t uy) == level``.

    ``L`` is piecewise linear along the ray with a single break where the
    ray crosses ``y = 0``. Returns NaN where the ray does not reach
    ``level``. Vectorised over ``x, y``; the direction is shared.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    t_max = np.broadcast_to(np.asarray(t_max, dtype=float), x.shape)

    def slope(sign):
        # dL/dt on the side y > 0 (sign=+1) or y < 0 (sign=-1)
        return ux + (p.k_sell if sign > 0 else p.k_buy) * uy

    out = np.full(x.shape, np.nan)
    L0 = np.asarray(liquidation_value(p, x, y))
    if uy != 0.0:
        t_break = np.where(y * uy < 0, -y / uy, np.inf)
    else:
        t_break = np.full(x.shape, np.inf)
    t_break = np.minimum(t_break, t_max)
    side0 = np.where(y > 0, 1, np.where(y < 0, -1, int(np.sign(uy)) if uy != 0 else 1))
    s0 = np.where(side0 > 0, slope(1), slope(-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (level - L0) / s0
    hit1 = (s0 != 0) & (t1 >= 0) & (t1 <= t_break)
    out[hit1] = t1[hit1]
    # second piece beyond the axis
    Lb = L0 + s0 * t_break
    side1 = -side0 if uy != 0 else side0
    s1 = np.where(side1 > 0, slope(1), slope(-1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t2 = t_break + (level - Lb) / s1
    hit2 = ~hit1 & np.isfinite(t_break) & (s1 != 0) & (t2 >= t_break) & (t2 <= t_max)
    out[hit2] = t2[hit2]
    return out[()] if out.ndim == 0 else out
