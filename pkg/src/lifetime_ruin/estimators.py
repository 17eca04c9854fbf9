"""scikit-learn style wrappers.

Inputs ``X`` are arrays of initial positions with columns ``(x, y)``.
Hyperparameters are the flat market, grid and solver settings so the
objects work with ``get_params``/``set_params`` and ``clone``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .closed_form import compute_constants, frictionless_psi_k, lower_bound_psi, midpoint_k, upper_bound_psi
from .grid import GridSpec
from .market import MarketParams
from .simulation import StrategySpec, estimate_ruin_probability
from .solver import SolverConfig, solve


class _MarketMixin:
    def _market(self) -> MarketParams:
        return MarketParams(self.r, self.alpha, self.sigma, self.beta, self.lambda_buy, self.mu_sell, self.c, self.b)

    def _check_X(self, X):
        return check_array(X, ensure_min_features=2, dtype=float)[:, :2]


class LifetimeRuinSolver(_MarketMixin, BaseEstimator):
    """Solve for the minimal ruin probability on a grid, then predict at arbitrary positions.

    ``fit`` ignores its data argument; the model is determined by the
    hyperparameters. After fitting, ``value_field_``, ``region_map_`` and
    ``report_`` hold the solver output.
    """

    def __init__(self, r=0.04, alpha=0.08, sigma=0.2, beta=0.04, lambda_buy=0.1, mu_sell=0.1, c=1.0, b=0.0,
                 nx=201, ny=201, y_min=None, y_max=None, tol_sup=1e-8, tol_bind=1e-6, max_iters=200_000,
                 method="howard", init="upper"):
        self.r = r
        self.alpha = alpha
        self.sigma = sigma
        self.beta = beta
        self.lambda_buy = lambda_buy
        self.mu_sell = mu_sell
        self.c = c
        self.b = b
        self.nx = nx
        self.ny = ny
        self.y_min = y_min
        self.y_max = y_max
        self.tol_sup = tol_sup
        self.tol_bind = tol_bind
        self.max_iters = max_iters
        self.method = method
        self.init = init

    def fit(self, X=None, y=None):
        p = self._market()
        spec = GridSpec(nx=self.nx, ny=self.ny, y_min=self.y_min, y_max=self.y_max)
        cfg = SolverConfig(max_iters=self.max_iters, tol_sup=self.tol_sup, tol_bind=self.tol_bind,
                           method=self.method, init=self.init)
        self.value_field_, self.region_map_, self.report_ = solve(p, spec, cfg)
        self.params_ = p
        return self

    def predict(self, X):
        """Interpolated ruin probability at each row ``(x, y)``."""
        check_is_fitted(self, "value_field_")
        X = self._check_X(X)
        return np.asarray(self.value_field_.interpolate(X[:, 0], X[:, 1]), dtype=float)

    def predict_region(self, X):
        """Region code (0 no-trade, 1 buy, 2 sell, 3 boundary) of the nearest node."""
        check_is_fitted(self, "region_map_")
        X = self._check_X(X)
        return self.region_map_.lookup(X[:, 0], X[:, 1])

    def score(self, X, y):
        """Negative mean absolute error against reference probabilities ``y``."""
        return -float(np.mean(np.abs(self.predict(X) - np.asarray(y, dtype=float))))


class ClosedFormBounds(_MarketMixin, TransformerMixin, BaseEstimator):
    """Map positions to ``[psi_upper, psi_lower, psi_k]`` (``k`` defaults to the bid-ask midpoint)."""

    def __init__(self, r=0.04, alpha=0.08, sigma=0.2, beta=0.04, lambda_buy=0.1, mu_sell=0.1, c=1.0, b=0.0, k=None):
        self.r = r
        self.alpha = alpha
        self.sigma = sigma
        self.beta = beta
        self.lambda_buy = lambda_buy
        self.mu_sell = mu_sell
        self.c = c
        self.b = b
        self.k = k

    def fit(self, X=None, y=None):
        self.params_ = self._market()
        self.constants_ = compute_constants(self.params_)
        self.k_ = midpoint_k(self.params_) if self.k is None else float(self.k)
        return self

    def transform(self, X):
        check_is_fitted(self, "constants_")
        X = self._check_X(X)
        p, cf = self.params_, self.constants_
        x, y = X[:, 0], X[:, 1]
        return np.column_stack([
            upper_bound_psi(p, x, y),
            lower_bound_psi(p, cf, x, y),
            frictionless_psi_k(p, cf, self.k_, x, y),
        ])


class MonteCarloRuinEstimator(_MarketMixin, BaseEstimator):
    """Simulated ruin probability of a fixed strategy from each starting position.

    For ``strategy="feedback"`` pass a fitted ``LifetimeRuinSolver`` as
    ``solver``; its region map drives the trades.
    """

    def __init__(self, r=0.04, alpha=0.08, sigma=0.2, beta=0.04, lambda_buy=0.1, mu_sell=0.1, c=1.0, b=0.0,
                 strategy="liquidate_now", solver=None, dt=1e-3, n_paths=100_000, mode="sample_death", seed=0,
                 workers=1):
        self.r = r
        self.alpha = alpha
        self.sigma = sigma
        self.beta = beta
        self.lambda_buy = lambda_buy
        self.mu_sell = mu_sell
        self.c = c
        self.b = b
        self.strategy = strategy
        self.solver = solver
        self.dt = dt
        self.n_paths = n_paths
        self.mode = mode
        self.seed = seed
        self.workers = workers

    def fit(self, X=None, y=None):
        self.params_ = self._market()
        if self.strategy == "feedback":
            if self.solver is None:
                raise ValueError("feedback strategy needs a fitted solver")
            check_is_fitted(self.solver, "region_map_")
            self.strategy_ = StrategySpec.feedback(self.solver.region_map_)
        else:
            self.strategy_ = StrategySpec(self.strategy)
        return self

    def simulate(self, X):
        """One ``MCResult`` per row; row ``i`` uses seed ``seed + i``."""
        check_is_fitted(self, "strategy_")
        X = self._check_X(X)
        return [
            estimate_ruin_probability(self.params_, self.strategy_, x, y, self.dt, self.n_paths, self.mode,
                                      self.seed + i, workers=self.workers)
            for i, (x, y) in enumerate(X)
        ]

    def predict(self, X):
        return np.array([r.estimate for r in self.simulate(X)])
