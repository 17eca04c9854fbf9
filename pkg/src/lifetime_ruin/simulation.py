"""Monte Carlo simulation of the controlled wealth process.

Paths are run by a compiled kernel; each path draws from its own
counter-based stream keyed by ``(seed, path index)`` so results do not
depend on how paths are split across workers. The exponential death time
is drawn first, then standard normals in chunks of growing size.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .closed_form import compute_constants, frictionless_psi_k, lower_bound_psi, midpoint_k, upper_bound_psi
from .grid import Region, RegionMap
from .market import Action, MarketParams, full_liquidation_amounts, liquidation_value, transaction_shift

# path status codes
RUIN, SAFE, DEATH, CENSORED, HORIZON, NEED_NORMALS = 0, 1, 2, 3, 4, 5
STATUS_NAMES = {RUIN: "ruin", SAFE: "safe", DEATH: "death", CENSORED: "censored", HORIZON: "horizon"}

NO_TRANSACTION, LIQUIDATE_NOW, FEEDBACK = 0, 1, 2
_KINDS = {"no_transaction": NO_TRANSACTION, "liquidate_now": LIQUIDATE_NOW, "feedback": FEEDBACK}

SAMPLE_DEATH, DISCOUNT_DEATH = "sample_death", "discount_death"

_FIRST_CHUNK, _MAX_CHUNK = 1024, 65536


@dataclass(frozen=True)
class StrategySpec:
    """Transaction policy.

    ``kind`` is ``"liquidate_now"``, ``"no_transaction"`` or ``"feedback"``;
    the feedback policy needs a region map from a converged solve and trades
    just far enough to leave a buy or sell node's region (located to within
    ``h_tol``).
    """

    kind: str
    regions: RegionMap | None = None
    h_tol: float = 1e-6

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if self.kind == "feedback" and self.regions is None:
            raise ValueError("feedback strategy needs a region map")
        if not self.h_tol > 0:
            raise ValueError("h_tol must be positive")

    @classmethod
    def liquidate_now(cls):
        return cls("liquidate_now")

    @classmethod
    def no_transaction(cls):
        return cls("no_transaction")

    @classmethod
    def feedback(cls, regions: RegionMap, h_tol: float = 1e-6):
        return cls("feedback", regions, h_tol)

    def kernel_args(self):
        """Arrays describing the policy to the compiled kernel."""
        if self.kind != "feedback":
            return (_KINDS[self.kind], np.zeros((3, 1), np.int8), np.zeros(3, np.int64), np.zeros(5))
        g = self.regions.grid
        geom = np.array([g.x_origin, g.dx, g.ys[0], g.dy, self.h_tol])
        return (FEEDBACK, np.ascontiguousarray(self.regions.labels, dtype=np.int8), g.col_off.astype(np.int64), geom)


@dataclass
class PathState:
    x: float
    y: float
    t: float = 0.0
    alive: bool = True
    cum_buy: float = 0.0
    cum_sell: float = 0.0
    liquidated: bool = False


@dataclass
class MCResult:
    estimate: float
    stderr: float
    n_paths: int
    n_ruin: int
    n_safe: int
    n_death: int
    censored: int
    failed_brackets: int = 0
    outcomes: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "n_paths": self.n_paths,
            "n_ruin": self.n_ruin,
            "n_safe": self.n_safe,
            "n_death": self.n_death,
            "censored": self.censored,
        }


def _param_array(p: MarketParams) -> np.ndarray:
    return np.array([p.r, p.alpha, p.sigma, p.beta, p.lambda_buy, p.mu_sell, p.c, p.b])


@njit(cache=True, error_model="numpy")
def _liq(pa, x, y):
    if y >= 0.0:
        return x + (1.0 - pa[5]) * y
    return x + y / (1.0 - pa[4])


@njit(cache=True, error_model="numpy")
def _label(labels, col_off, geom, x, y):
    ny, nx = labels.shape
    j = int(math.floor((y - geom[2]) / geom[3] + 0.5))
    # first and last rows are truncation rows: use the nearest computed row
    j = min(max(j, 1), ny - 2)
    i = int(math.floor((x - geom[0]) / geom[1] + 0.5)) - col_off[j]
    if i < 0 or i >= nx:
        return 3
    return labels[j, i]


@njit(cache=True, error_model="numpy")
def _shift(pa, x, y, action, h):
    if action == 1:
        return x - h, y + (1.0 - pa[4]) * h
    return x + (1.0 - pa[5]) * h, y - h


@njit(cache=True, error_model="numpy")
def _next_half(s, ds):
    """Distance (in units of ``1 / ds``) to the next half-integer of ``s`` moving at rate ``ds``."""
    if ds > 0.0:
        target = math.floor(s + 0.5) + 0.5
        if target - s <= 0.0:
            target += 1.0
        return (target - s) / ds
    if ds < 0.0:
        target = math.ceil(s - 0.5) - 0.5
        if target - s >= 0.0:
            target -= 1.0
        return (target - s) / ds
    return np.inf


@njit(cache=True, error_model="numpy")
def _feedback_size(pa, labels, col_off, geom, x, y, action):
    """Smallest ``h`` whose shifted point leaves the ``action`` region; -1 if not bracketed.

    Nearest-node labels are constant between the crossings of half-integer
    row and column positions, so the ray is walked segment by segment. The
    returned step lies at most ``h_tol`` past the edge of the region.
    """
    x_org, dx, y_org, dy, h_tol = geom[0], geom[1], geom[2], geom[3], geom[4]
    h_max = 4.0 * (pa[6] / pa[0] - pa[7]) + 4.0 * abs(y) + 4.0 * abs(x)
    if action == 1:
        ax, ay = -1.0, 1.0 - pa[4]
    else:
        ax, ay = 1.0 - pa[5], -1.0
    u0, v0 = (x - x_org) / dx, (y - y_org) / dy
    du, dv = ax / dx, ay / dy
    h = 0.0
    while h <= h_max:
        step = min(_next_half(u0 + du * h, du), _next_half(v0 + dv * h, dv))
        h_next = h + max(step, 1e-12 * (1.0 + h))
        # label of the segment beyond h_next, sampled at its midpoint
        step2 = min(_next_half(u0 + du * h_next, du), _next_half(v0 + dv * h_next, dv))
        mid = h_next + 0.5 * max(step2, 1e-12 * (1.0 + h_next))
        xs, ys = _shift(pa, x, y, action, mid)
        if _label(labels, col_off, geom, xs, ys) != action:
            return h_next + min(0.5 * h_tol, mid - h_next)
        h = h_next
    return -1.0


@njit(cache=True, error_model="numpy")
def _liquidate(pa, st):
    """Close the stock position of ``st = [x, y, t, cum_buy, cum_sell, liquidated, failed]`` in place."""
    y = st[1]
    if y < 0.0:
        h = -y / (1.0 - pa[4])
        st[0] -= h
        st[3] += h
    elif y > 0.0:
        st[0] += (1.0 - pa[5]) * y
        st[4] += y
    st[1] = 0.0
    st[5] = 1.0


@njit(cache=True, error_model="numpy")
def _trade(pa, labels, col_off, geom, st, action):
    """Feedback trade out of the ``action`` region, applied to ``st`` in place."""
    h = _feedback_size(pa, labels, col_off, geom, st[0], st[1], action)
    if h < 0.0:
        st[6] += 1.0
        return
    st[0], st[1] = _shift(pa, st[0], st[1], action, h)
    if action == 1:
        st[3] += h
    else:
        st[4] += h


@njit(cache=True, error_model="numpy")
def _run(pa, kind, labels, col_off, geom, st, nsteps, normals, k, dt, tau_d, n_max, n_stop):
    """Advance one path until it terminates or runs out of normals.

    ``nsteps[0]`` counts Euler steps taken (time is ``nsteps * dt``).
    Returns ``(status, next normal index)``.
    """
    r, alpha, sigma, c, b = pa[0], pa[1], pa[2], pa[6], pa[7]
    safe = c / r
    sq = math.sqrt(dt)
    n = nsteps[0]
    x, y = st[0], st[1]
    status = 5
    while True:
        t = n * dt
        if t >= tau_d:
            status = 2
            break
        L = _liq(pa, x, y)
        if L <= b:
            status = 0
            break
        if L >= safe:
            status = 1
            break
        if n >= n_stop:
            status = 4
            break
        if n >= n_max:
            status = 3
            break
        # the label lookup stays inline; only actual trades call out
        traded = False
        if kind == 2:
            lab = _label(labels, col_off, geom, x, y)
            if lab == 1 or lab == 2:
                st[0], st[1] = x, y
                _trade(pa, labels, col_off, geom, st, lab)
                traded = True
        elif kind == 1 and st[5] == 0.0:
            st[0], st[1] = x, y
            _liquidate(pa, st)
            traded = True
        if traded:
            x, y = st[0], st[1]
            if _liq(pa, x, y) <= b:
                status = 0
                break
        if y != 0.0:
            if k >= normals.shape[0]:
                break
            y = y + alpha * y * dt + sigma * y * sq * normals[k]
            k += 1
        x = x + (r * x - c) * dt
        n += 1
    st[0], st[1], st[2] = x, y, n * dt
    nsteps[0] = n
    return status, k


def _path_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(int(seed) << 64) | int(index)))


def _simulate_one(pa, kargs, x0, y0, dt, mode, rng, n_max, n_stop):
    """Run one path; returns ``(status, x, y, t, cum_buy, cum_sell, failed)``."""
    kind, labels, col_off, geom = kargs
    beta = pa[3]
    tau_d = rng.exponential(1.0 / beta) if mode == SAMPLE_DEATH else np.inf
    st = np.array([x0, y0, 0.0, 0.0, 0.0, 0.0, 0.0])
    nsteps = np.zeros(1, np.int64)
    k = 0
    chunk = _FIRST_CHUNK
    normals = np.empty(0)
    while True:
        status, k = _run(pa, kind, labels, col_off, geom, st, nsteps, normals, k, dt, tau_d, n_max, n_stop)
        if status != NEED_NORMALS:
            return status, st[0], st[1], st[2], st[3], st[4], st[6]
        normals = rng.standard_normal(chunk)
        k = 0
        chunk = min(2 * chunk, _MAX_CHUNK)


def _steps(horizon, dt):
    if not np.isfinite(horizon):
        return np.iinfo(np.int64).max
    return int(math.ceil(horizon / dt - 1e-9))


def _outcome(status, t, mode, beta):
    if status != RUIN:
        return 0.0
    return math.exp(-beta * t) if mode == DISCOUNT_DEATH else 1.0


def step_diffusion(state: PathState, p: MarketParams, dt: float, rng, sigma: float | None = None) -> PathState:
    """One Euler step of the uncontrolled dynamics (``sigma`` overrides ``p.sigma``)."""
    if not state.alive:
        raise ValueError("path is dead")
    if not dt > 0:
        raise ValueError("dt must be positive")
    s = p.sigma if sigma is None else sigma
    y = state.y
    if y != 0.0:
        y = y + p.alpha * y * dt + s * y * math.sqrt(dt) * rng.standard_normal()
    x = state.x + (p.r * state.x - p.c) * dt
    return replace(state, x=x, y=y, t=state.t + dt)


def apply_strategy(state: PathState, strat: StrategySpec, p: MarketParams) -> PathState:
    """Apply at most one transaction (or the one-off liquidation) to ``state``.

    Raises
    ------
    RuntimeError
        If the feedback search cannot find the edge of the trade region.
    """
    if not state.alive:
        raise ValueError("path is dead")
    if strat.kind == "no_transaction":
        return state
    if strat.kind == "liquidate_now":
        if state.liquidated:
            return state
        buy, sell = full_liquidation_amounts(state.y, p)
        x, y = transaction_shift(p, state.x, state.y, Action.BUY, buy)
        x, y = transaction_shift(p, x, y, Action.SELL, sell)
        return replace(state, x=x, y=0.0, cum_buy=state.cum_buy + buy, cum_sell=state.cum_sell + sell,
                       liquidated=True)
    _, labels, col_off, geom = strat.kernel_args()
    pa = _param_array(p)
    lab = int(_label(labels, col_off, geom, state.x, state.y))
    if lab not in (Region.BUY, Region.SELL):
        return state
    h = _feedback_size(pa, labels, col_off, geom, state.x, state.y, lab)
    if h < 0:
        raise RuntimeError("could not bracket the edge of the trade region")
    x, y = transaction_shift(p, state.x, state.y, Action(lab), h)
    if lab == Region.BUY:
        return replace(state, x=x, y=y, cum_buy=state.cum_buy + h)
    return replace(state, x=x, y=y, cum_sell=state.cum_sell + h)


def simulate_path(p: MarketParams, strat: StrategySpec, x0, y0, dt=1e-3, mode=SAMPLE_DEATH, rng=None,
                  t_max=None, horizon=np.inf):
    """Simulate one path from ``(x0, y0)``.

    Returns ``(outcome, status, final PathState)``. The outcome is 1 on ruin
    in ``sample_death`` mode, ``exp(-beta tau_b)`` on ruin in
    ``discount_death`` mode, and 0 otherwise.
    """
    _check_start(p, x0, y0)
    rng = np.random.default_rng() if rng is None else rng
    t_max = 20.0 / p.beta if t_max is None else t_max
    pa = _param_array(p)
    status, x, y, t, cb, cs, _ = _simulate_one(pa, strat.kernel_args(), float(x0), float(y0), dt, mode, rng,
                                               _steps(t_max, dt), _steps(horizon, dt))
    state = PathState(x, y, t, status != DEATH, cb, cs, strat.kind == "liquidate_now")
    return _outcome(status, t, mode, p.beta), STATUS_NAMES[status], state


def _check_start(p, x0, y0):
    if liquidation_value(p, x0, y0) < p.b - 1e-9:
        raise ValueError("start point lies below the ruin level")


def _batch(args):
    pa, kargs, x0, y0, dt, mode, seed, lo, hi, n_max, n_stop = args
    out = np.empty((hi - lo, 7))
    for n in range(lo, hi):
        out[n - lo] = _simulate_one(pa, kargs, x0, y0, dt, mode, _path_rng(seed, n), n_max, n_stop)
    return out


def simulate_paths(p, strat, x0, y0, dt, n_paths, mode, seed, t_max=None, horizon=np.inf, workers=1):
    """Terminal records of ``n_paths`` paths, shape ``(n_paths, 7)``, ordered by path index.

    Columns: status, x, y, t, cum_buy, cum_sell, failed brackets.
    """
    _check_start(p, x0, y0)
    if mode not in (SAMPLE_DEATH, DISCOUNT_DEATH):
        raise ValueError(f"unknown mode {mode!r}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    t_max = 20.0 / p.beta if t_max is None else t_max
    pa = _param_array(p)
    kargs = strat.kernel_args()
    n_max, n_stop = _steps(t_max, dt), _steps(horizon, dt)
    if workers == 0:
        workers = _auto_workers()
    workers = max(1, min(workers, n_paths))
    bounds = np.linspace(0, n_paths, workers + 1).astype(int)
    jobs = [(pa, kargs, float(x0), float(y0), dt, mode, seed, int(a), int(b), n_max, n_stop)
            for a, b in zip(bounds[:-1], bounds[1:])]
    if workers == 1:
        parts = [_batch(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_batch, jobs))
    return np.concatenate(parts, axis=0)


def _auto_workers():
    import os

    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def estimate_ruin_probability(p: MarketParams, strat: StrategySpec, x0, y0, dt=1e-3, n_paths=100_000,
                              mode=SAMPLE_DEATH, seed=0, t_max=None, workers=1) -> MCResult:
    """Probability that the strategy is ruined before death, by simulation.

    Deterministic for a fixed seed whatever ``workers`` is.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be at least 100")
    rec = simulate_paths(p, strat, x0, y0, dt, n_paths, mode, seed, t_max, workers=workers)
    status = rec[:, 0].astype(int)
    outcomes = np.zeros(n_paths)
    ruin = status == RUIN
    outcomes[ruin] = np.exp(-p.beta * rec[ruin, 3]) if mode == DISCOUNT_DEATH else 1.0
    est = float(np.sum(outcomes) / n_paths)
    std = float(np.std(outcomes, ddof=1))
    return MCResult(
        estimate=est,
        stderr=std / math.sqrt(n_paths),
        n_paths=n_paths,
        n_ruin=int(ruin.sum()),
        n_safe=int((status == SAFE).sum()),
        n_death=int((status == DEATH).sum()),
        censored=int((status == CENSORED).sum()),
        failed_brackets=int(rec[:, 6].sum()),
        outcomes=outcomes,
    )


@dataclass
class MartingaleReport:
    candidate: str
    direction: str
    v0: float
    mean: float
    stderr: float
    z: float
    passed: bool
    n_paths: int


def candidate_function(p: MarketParams, name: str, k: float | None = None):
    """Closed-form candidate extended by its boundary values outside the strip."""
    cf = compute_constants(p)
    if name == "upper":
        return lambda x, y: upper_bound_psi(p, x, y, tol=np.inf)
    if name == "lower":
        return lambda x, y: lower_bound_psi(p, cf, x, y, tol=np.inf)
    if name == "psi_k":
        k = midpoint_k(p) if k is None else k
        return lambda x, y: frictionless_psi_k(p, cf, k, x, y, tol=np.inf)
    raise ValueError(f"unknown candidate {name!r}")


def martingale_test(p: MarketParams, candidate: str, strat: StrategySpec, x0, y0, horizon=5.0, n_paths=100_000,
                    direction="super", seed=0, dt=1e-3, k=None, workers=1) -> MartingaleReport:
    """Compare ``E[v(X_rho, Y_rho)]`` with ``v(x0, y0)``.

    ``rho`` is the first of the horizon, ruin, safety and sampled death; dead
    paths contribute 0. ``"super"`` passes if the mean is at most
    ``v0 + 3 stderr``, ``"sub"`` if it is at least ``v0 - 3 stderr``.
    """
    if direction not in ("super", "sub"):
        raise ValueError("direction must be 'super' or 'sub'")
    v = candidate_function(p, candidate, k)
    rec = simulate_paths(p, strat, x0, y0, dt, n_paths, SAMPLE_DEATH, seed, t_max=np.inf, horizon=horizon,
                         workers=workers)
    status = rec[:, 0].astype(int)
    vals = np.where(status == DEATH, 0.0, v(rec[:, 1], rec[:, 2]))
    mean = float(np.sum(vals) / n_paths)
    se = float(np.std(vals, ddof=1) / math.sqrt(n_paths))
    v0 = float(v(x0, y0))
    z = (mean - v0) / se if se > 0 else (0.0 if mean == v0 else math.copysign(np.inf, mean - v0))
    passed = mean <= v0 + 3 * se if direction == "super" else mean >= v0 - 3 * se
    return MartingaleReport(candidate, direction, v0, mean, se, float(z), bool(passed), n_paths)
