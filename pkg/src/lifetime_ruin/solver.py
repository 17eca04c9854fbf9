"""Monotone discretisation of the ruin-probability variational inequality.

Each interior node has three candidate values, all convex (or sub-convex)
combinations of other nodes' values:

* ``diffusion``: the centre value solving the upwind discretisation of
  ``L u = 0`` (Shortley-Weller spacing where a neighbour lies beyond the
  ruin or safe level),
* ``buy`` / ``sell``: the value one cell-step along the transaction ray,
  interpolated linearly on the cell edge where the ray leaves the cell.

The discrete solution is the fixed point ``u = min(diffusion, buy, sell)``.
Every candidate is linear in the field, so the operator is stored as three
small index/weight tables over flat node indices. Weights that reach past
the ruin or safe level point at the outside node, which carries the
boundary value in the field.
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from .closed_form import compute_constants, lower_bound_psi, upper_bound_psi
from .grid import Grid, GridSpec, NodeClass, Region, RegionMap, ValueField, boundary_values, build_grid
from .market import MarketParams, liquidation_value, ray_crossing

DIFFUSION, BUY, SELL = 0, 1, 2

_OUTSIDE = (NodeClass.BELOW_RUIN, NodeClass.SAFE)
_RUIN_SIDE = (NodeClass.BELOW_RUIN, NodeClass.RUIN_BOUNDARY)


class NonConvergence(RuntimeError):
    def __init__(self, message, field=None, report=None):
        super().__init__(message)
        self.field = field
        self.report = report


@dataclass(frozen=True)
class SolverConfig:
    """Iteration controls.

    ``method`` selects how the fixed point is reached: ``"howard"`` (policy
    iteration), ``"value"`` (plain Jacobi sweeps) or ``"splitting"`` (a
    nondecreasing iteration from a subsolution that solves the diffusion
    part exactly and lags the transaction part). All three finish with
    Jacobi sweeps until the sup-norm update is below ``tol_sup``.
    """

    max_iters: int = 200_000
    tol_sup: float = 1e-8
    tol_bind: float = 1e-6
    damping: float = 1.0
    method: str = "howard"
    init: str = "upper"
    max_policy_iters: int = 1000
    workers: int = 1

    def __post_init__(self):
        if not self.tol_sup > 0:
            raise ValueError("tol_sup must be positive")
        if not self.tol_bind >= self.tol_sup:
            raise ValueError("tol_bind must be at least tol_sup")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.method not in ("howard", "value", "splitting"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.init not in ("upper", "lower", "ones", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.max_iters < 1 or self.workers < 0:
            raise ValueError("max_iters must be positive and workers nonnegative")


@dataclass
class SolveReport:
    iterations: int
    sup_update: float
    residual: float
    wall_ms: float
    converged: bool = True
    method: str = "howard"
    outer_iterations: int = 0
    sweeps: int = 0
    # (largest increase, largest decrease) of each outer iterate over interior nodes
    trace: list = dc_field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "sup_update": self.sup_update,
            "residual": self.residual,
            "wall_ms": self.wall_ms,
        }


class Stencil(NamedTuple):
    idx: np.ndarray  # (n, m) flat node indices
    w: np.ndarray  # (n, m) nonnegative weights

    def apply(self, flat: np.ndarray, rows=slice(None)) -> np.ndarray:
        return np.einsum("ij,ij->i", self.w[rows], flat[self.idx[rows]])


@dataclass(eq=False)
class DiscreteOperator:
    grid: Grid
    diffusion: Stencil
    buy: Stencil
    sell: Stencil
    pos: np.ndarray  # flat index -> position among active nodes, -1 elsewhere

    @property
    def stencils(self):
        return (self.diffusion, self.buy, self.sell)

    def candidates(self, flat: np.ndarray, rows=slice(None)) -> np.ndarray:
        """Candidate values, shape ``(n, 3)`` in the order diffusion, buy, sell."""
        return np.stack([s.apply(flat, rows) for s in self.stencils], axis=1)

    def matrix(self, which: int) -> sp.csr_matrix:
        """The candidate map of one stencil as a sparse matrix over all nodes."""
        st = self.stencils[which]
        n = self.grid.active.size
        rows = np.repeat(np.arange(n), st.idx.shape[1])
        return sp.csr_matrix((st.w.ravel(), (rows, st.idx.ravel())), shape=(n, self.grid.node_class.size))


def _edge_weights(p, grid, P_x, P_y, A, B, s, edge_len, tol):
    """Weights for linear interpolation at ``P`` on edge ``A``-``B`` at fraction ``s``.

    An endpoint beyond the ruin or safe level is replaced by the point where
    the edge crosses that level, which carries the same boundary value as
    the outside node.
    """
    cls = grid.node_class.ravel()
    X, Y = grid.mesh()
    Xf, Yf = X.ravel(), Y.ravel()
    dA = s * edge_len
    dB = (1.0 - s) * edge_len
    for V, dist in ((A, dA), (B, dB)):
        out = np.isin(cls[V], _OUTSIDE)
        if not np.any(out):
            continue
        vx, vy = Xf[V[out]] - P_x[out], Yf[V[out]] - P_y[out]
        norm = np.hypot(vx, vy)
        ux, uy = vx / norm, vy / norm
        level = np.where(cls[V[out]] == NodeClass.BELOW_RUIN, p.b, p.safe_level)
        # edges are axis-aligned and share a direction within one call
        t = np.empty(out.sum())
        for lev in np.unique(level):
            m = level == lev
            t[m] = ray_crossing(p, P_x[out][m], P_y[out][m], ux[m][0], uy[m][0], norm[m], lev)
        t = np.where(np.isnan(t), norm, t)
        dist[out] = np.maximum(t, 0.0)
    tot = dA + dB
    wA = np.where(tot > 0, dB / np.where(tot > 0, tot, 1.0), 1.0)
    return wA, 1.0 - wA


def _neighbour(grid: Grid, j, i, dj: int, dc: int):
    """Flat index of the node ``dj`` rows and ``dc`` lattice columns away."""
    jj = j + dj
    return jj * grid.spec.nx + grid.column(jj, grid.lattice_col(j, i) + dc)


def _active_coords(grid: Grid):
    j, i = np.divmod(grid.active, grid.spec.nx)
    X, _ = grid.mesh()
    return j, i, X[j, i], grid.ys[j]


def _transaction_stencil(grid: Grid, action: int) -> Stencil:
    p = grid.params
    tol = grid.spec.tol
    act = grid.active
    j, i, x, y = _active_coords(grid)
    dx, dy = grid.dx, grid.dy
    if action == BUY:
        # direction (-1, 1 - lambda)
        ay = 1.0 - p.lambda_buy
        if dx <= dy / ay:
            h = dx
            s = ay * dx / dy
            A, B = _neighbour(grid, j, i, 0, -1), _neighbour(grid, j, i, 1, -1)
            edge = dy
        else:
            h = dy / ay
            s = 1.0 - (dx - h) / dx
            A, B = _neighbour(grid, j, i, 1, 0), _neighbour(grid, j, i, 1, -1)
            edge = dx
        Px, Py = x - h, y + ay * h
    else:
        # direction (1 - mu, -1)
        ax = 1.0 - p.mu_sell
        if dx / ax <= dy:
            h = dx / ax
            s = h / dy
            A, B = _neighbour(grid, j, i, 0, 1), _neighbour(grid, j, i, -1, 1)
            edge = dy
        else:
            h = dy
            s = ax * dy / dx
            A, B = _neighbour(grid, j, i, -1, 0), _neighbour(grid, j, i, -1, 1)
            edge = dx
        Px, Py = x + ax * h, y - h
    s = np.clip(np.full(act.shape, s), 0.0, 1.0)
    wA, wB = _edge_weights(p, grid, Px, Py, A, B, s, np.full(act.shape, edge), tol)
    # ray leaves the strip through the ruin level: all weight on a ruin-side vertex
    exit_ = liquidation_value(p, Px, Py) <= p.b + tol
    if np.any(exit_):
        cls = grid.node_class.ravel()
        ruinA = np.isin(cls[A], _RUIN_SIDE)
        wA = np.where(exit_, np.where(ruinA, 1.0, 0.0), wA)
        wB = np.where(exit_, np.where(ruinA, 0.0, 1.0), wB)
    return Stencil(np.stack([A, B], axis=1), np.stack([wA, wB], axis=1))


def _diffusion_stencil(grid: Grid) -> Stencil:
    p = grid.params
    act = grid.active
    cls = grid.node_class.ravel()
    j, i, x, y = _active_coords(grid)
    dx, dy = grid.dx, grid.dy
    nbrs = {"E": (act + 1, 1.0, 0.0, dx), "W": (act - 1, -1.0, 0.0, dx),
            "N": (_neighbour(grid, j, i, 1, 0), 0.0, 1.0, dy), "S": (_neighbour(grid, j, i, -1, 0), 0.0, -1.0, dy)}
    h = {}
    for key, (nb, ux, uy, step) in nbrs.items():
        hk = np.full(act.shape, step)
        for c, level in ((NodeClass.BELOW_RUIN, p.b), (NodeClass.SAFE, p.safe_level)):
            out = cls[nb] == c
            if np.any(out):
                t = ray_crossing(p, x[out], y[out], ux, uy, step, level)
                hk[out] = np.where(np.isnan(t), step, t)
        h[key] = hk
    drift_x = p.r * x - p.c
    drift_y = p.alpha * y
    q = 0.5 * p.sigma**2 * y**2
    wE = np.maximum(drift_x, 0.0) / h["E"]
    wW = np.maximum(-drift_x, 0.0) / h["W"]
    span = h["N"] + h["S"]
    wN = np.maximum(drift_y, 0.0) / h["N"] + 2.0 * q / (span * h["N"])
    wS = np.maximum(-drift_y, 0.0) / h["S"] + 2.0 * q / (span * h["S"])
    W = np.stack([wE, wW, wN, wS], axis=1)
    den = p.beta + W.sum(axis=1)
    idx = np.stack([nbrs[k][0] for k in "EWNS"], axis=1)
    return Stencil(idx, W / den[:, None])


def discrete_operator(grid: Grid) -> DiscreteOperator:
    """Build (and cache on the grid) the three candidate stencils."""
    op = grid.cache.get("operator")
    if op is None:
        pos = np.full(grid.node_class.size, -1, dtype=np.int64)
        pos[grid.active] = np.arange(grid.active.size)
        op = DiscreteOperator(
            grid, _diffusion_stencil(grid), _transaction_stencil(grid, BUY), _transaction_stencil(grid, SELL), pos
        )
        grid.cache["operator"] = op
    return op


def _node_position(grid: Grid, node) -> int:
    if isinstance(node, tuple):
        j, i = node
        node = j * grid.spec.nx + i
    k = discrete_operator(grid).pos[int(node)]
    if k < 0:
        raise ValueError("node is not interior")
    return int(k)


def diffusion_fixed_point(field: ValueField, node) -> float:
    """Centre value solving the upwind ``L u = 0`` at one interior node.

    ``node`` is a flat index or a ``(row, column)`` pair.
    """
    k = _node_position(field.grid, node)
    return float(discrete_operator(field.grid).diffusion.apply(field.flat, slice(k, k + 1))[0])


def transaction_candidate(field: ValueField, node, action: int) -> float:
    """Field value one cell-step along the buy or sell ray from ``node``."""
    op = discrete_operator(field.grid)
    k = _node_position(field.grid, node)
    st = op.buy if action == BUY else op.sell
    return float(st.apply(field.flat, slice(k, k + 1))[0])


def _chunks(n: int, workers: int):
    workers = max(1, workers)
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _min_candidates(op: DiscreteOperator, flat: np.ndarray, workers: int = 1) -> np.ndarray:
    n = op.grid.active.size
    if workers == 0:
        workers = os.cpu_count() or 1
    if workers <= 1:
        return op.candidates(flat).min(axis=1)
    out = np.empty(n)

    def run(rows):
        out[rows] = op.candidates(flat, rows).min(axis=1)

    with ThreadPoolExecutor(workers) as ex:
        list(ex.map(run, _chunks(n, workers)))
    return out


def vi_sweep(field: ValueField, cfg: SolverConfig = SolverConfig()):
    """One Jacobi sweep ``u <- (1 - damping) u + damping min(candidates)``.

    Returns the new field and the sup-norm of the update over interior nodes.
    Boundary and truncation nodes are copied unchanged.
    """
    op = discrete_operator(field.grid)
    act = field.grid.active
    old = field.flat
    new = old.copy()
    target = _min_candidates(op, old, cfg.workers)
    if cfg.damping == 1.0:
        new[act] = target
    else:
        new[act] = (1.0 - cfg.damping) * old[act] + cfg.damping * target
    upd = float(np.max(np.abs(new[act] - old[act]))) if act.size else 0.0
    return ValueField(field.grid, new.reshape(field.values.shape)), upd


def _policy_system(op: DiscreteOperator, policy: np.ndarray, flat: np.ndarray):
    """Sparse system ``(I - P) u_int = P_fixed u_fixed`` for a fixed policy."""
    n = op.grid.active.size
    rows_l, cols_l, data_l = [], [], []
    rhs = np.zeros(n)
    for a, st in enumerate(op.stencils):
        r = np.flatnonzero(policy == a)
        if r.size == 0:
            continue
        idx, w = st.idx[r], st.w[r]
        col = op.pos[idx]
        inner = col >= 0
        rr = np.broadcast_to(r[:, None], idx.shape)
        rows_l.append(rr[inner])
        cols_l.append(col[inner])
        data_l.append(-w[inner])
        rhs[r] += np.where(inner, 0.0, w * flat[idx]).sum(axis=1)
    rows = np.concatenate(rows_l + [np.arange(n)])
    cols = np.concatenate(cols_l + [np.arange(n)])
    data = np.concatenate(data_l + [np.ones(n)])
    A = sp.csc_matrix((data, (rows, cols)), shape=(n, n))
    return A, rhs


def _linear_solve(A, rhs):
    with warnings.catch_warnings():
        warnings.simplefilter("error", MatrixRankWarning)
        try:
            u = spsolve(A, rhs)
        except MatrixRankWarning:
            return None
    if not np.all(np.isfinite(u)):
        return None
    return u


def policy_value(field: ValueField, policy: np.ndarray) -> ValueField:
    """Exact value of a fixed node-wise policy (0 diffusion, 1 buy, 2 sell)."""
    op = discrete_operator(field.grid)
    A, rhs = _policy_system(op, np.asarray(policy), field.flat)
    u = _linear_solve(A, rhs)
    if u is None:
        raise NonConvergence("policy has a closed transaction cycle (singular system)")
    out = field.flat.copy()
    out[field.grid.active] = u
    return ValueField(field.grid, out.reshape(field.values.shape))


def _improve(cands: np.ndarray, policy: np.ndarray | None, eps: float) -> np.ndarray:
    best = np.argmin(cands, axis=1)
    if policy is None:
        return best
    n = np.arange(cands.shape[0])
    better = cands[n, best] < cands[n, policy] - eps
    return np.where(better, best, policy)


def _track(trace, old, new):
    d = new - old
    trace.append((float(max(d.max(), 0.0)), float(max(-d.min(), 0.0))))


def _howard(op, flat, cfg, trace):
    act = op.grid.active
    policy = None
    for it in range(1, cfg.max_policy_iters + 1):
        new_policy = _improve(op.candidates(flat), policy, 1e-14)
        if policy is not None and np.array_equal(new_policy, policy):
            return flat, it - 1, True
        policy = new_policy
        A, rhs = _policy_system(op, policy, flat)
        u = _linear_solve(A, rhs)
        if u is None:
            return flat, it, False
        new = flat.copy()
        new[act] = u
        _track(trace, flat[act], u)
        flat = new
    return flat, cfg.max_policy_iters, False


def _obstacle_solve(op, flat, obstacle, max_iters, take=None, diffusion_system=None):
    """Solve ``v = min(diffusion(v), obstacle)`` by policy iteration on two choices.

    ``take`` marks the nodes starting on the obstacle (warm start); any
    start converges because every policy gives a nonsingular system.
    """
    act = op.grid.active
    if diffusion_system is None:
        diffusion_system = _policy_system(op, np.zeros(act.size, dtype=int), flat)
    A_diff, rhs_diff = diffusion_system
    A_diff = A_diff.tocsr()
    v = flat.copy()
    if take is None:
        take = obstacle < op.diffusion.apply(v) - 1e-14
    for _ in range(max_iters):
        keep = sp.diags((~take).astype(float))
        A = (keep @ A_diff + sp.diags(take.astype(float))).tocsc()
        rhs = np.where(take, obstacle, rhs_diff)
        u = _linear_solve(A, rhs)
        if u is None:
            return v, False, take
        v = flat.copy()
        v[act] = u
        d = op.diffusion.apply(v)
        new_take = np.where(take, ~(d < obstacle - 1e-14), obstacle < d - 1e-14)
        if np.array_equal(new_take, take):
            return v, True, take
        take = new_take
    return v, False, take


def _splitting(op, flat, cfg, trace):
    act = op.grid.active
    take = None
    system = _policy_system(op, np.zeros(act.size, dtype=int), flat)
    for it in range(1, cfg.max_policy_iters + 1):
        obstacle = np.minimum(op.buy.apply(flat), op.sell.apply(flat))
        new, ok, take = _obstacle_solve(op, flat, obstacle, 200, take, system)
        if not ok:
            return flat, it, False
        _track(trace, flat[act], new[act])
        change = float(np.max(np.abs(new[act] - flat[act])))
        flat = new
        if change <= 1e-3 * cfg.tol_sup:
            return flat, it, True
    return flat, cfg.max_policy_iters, False


def initial_field(grid: Grid, init: str = "upper") -> ValueField:
    p = grid.params
    if init == "upper":
        return ValueField.from_interior(grid, lambda x, y: upper_bound_psi(p, x, y))
    if init == "lower":
        cf = compute_constants(p)
        return ValueField.from_interior(grid, lambda x, y: lower_bound_psi(p, cf, x, y))
    if init == "ones":
        return ValueField.from_interior(grid, 1.0)
    if init == "zeros":
        return ValueField.from_interior(grid, 0.0)
    raise ValueError(f"unknown init {init!r}")


def solve(p: MarketParams, grid: Grid | GridSpec | None = None, cfg: SolverConfig = SolverConfig(),
          init: ValueField | None = None):
    """Solve the discrete variational inequality.

    Returns
    -------
    field : ValueField
    regions : RegionMap
    report : SolveReport

    Raises
    ------
    NonConvergence
        If the outer iteration or the certifying sweeps hit their limits.
    """
    t0 = time.perf_counter()
    if not isinstance(grid, Grid):
        grid = build_grid(p, grid)
    op = discrete_operator(grid)
    field = init.copy() if init is not None else initial_field(grid, cfg.init)
    flat = field.flat.copy()
    trace: list = []
    outer, ok = 0, True
    if cfg.method == "howard":
        flat, outer, ok = _howard(op, flat, cfg, trace)
    elif cfg.method == "splitting":
        flat, outer, ok = _splitting(op, flat, cfg, trace)
    field = ValueField(grid, flat.reshape(grid.shape))
    sweeps = 0
    upd = np.inf
    if ok:
        while sweeps < cfg.max_iters:
            new, upd = vi_sweep(field, cfg)
            sweeps += 1
            if cfg.method == "value":
                _track(trace, field.flat[grid.active], new.flat[grid.active])
            field = new
            if upd <= cfg.tol_sup:
                break
    res = vi_residual(field)
    report = SolveReport(
        iterations=outer + sweeps,
        sup_update=float(upd),
        residual=res.sup,
        wall_ms=(time.perf_counter() - t0) * 1e3,
        converged=bool(ok and upd <= cfg.tol_sup),
        method=cfg.method,
        outer_iterations=outer,
        sweeps=sweeps,
        trace=trace,
    )
    if not report.converged:
        raise NonConvergence(
            f"no convergence after {report.iterations} iterations (last update {upd:.3g}, residual {res.sup:.3g})",
            field,
            report,
        )
    return field, extract_region_map(field, cfg), report


def extract_region_map(field: ValueField, cfg: SolverConfig = SolverConfig()) -> RegionMap:
    """Label each interior node by the strictly smallest binding candidate.

    Buy (sell) requires the buy (sell) candidate to be within ``tol_bind`` of
    the field value and strictly below both other candidates; every other
    interior node is no-trade. Non-interior nodes are ``BOUNDARY``.
    """
    grid = field.grid
    op = discrete_operator(grid)
    u = field.flat[grid.active]
    c = op.candidates(field.flat)
    labels = np.full(grid.node_class.size, Region.BOUNDARY, dtype=np.int8)
    lab = np.full(u.shape, Region.NO_TRADE, dtype=np.int8)
    buy = (np.abs(u - c[:, BUY]) <= cfg.tol_bind) & (c[:, BUY] < c[:, DIFFUSION]) & (c[:, BUY] < c[:, SELL])
    sell = (np.abs(u - c[:, SELL]) <= cfg.tol_bind) & (c[:, SELL] < c[:, DIFFUSION]) & (c[:, SELL] < c[:, BUY])
    lab[buy] = Region.BUY
    lab[sell] = Region.SELL
    labels[grid.active] = lab
    return RegionMap(grid, labels.reshape(grid.shape))


class Residual(NamedTuple):
    diffusion: np.ndarray
    buy: np.ndarray
    sell: np.ndarray
    sup: float
    positive_sup: float
    complementarity_gap: float
    boundary_error: float


def vi_residual(field: ValueField) -> Residual:
    """Node-wise residuals ``u - candidate`` of the three operators.

    The diffusion residual equals the discrete ``L u`` divided by the
    diagonal weight, so all three are on the scale of the field. ``sup`` is
    the largest ``|max(residuals)|`` (zero exactly at the discrete
    solution), ``positive_sup`` its positive part and
    ``complementarity_gap`` the largest distance of the binding residual from
    zero. ``boundary_error`` is the largest deviation of non-interior nodes
    from their Dirichlet data.
    """
    grid = field.grid
    op = discrete_operator(grid)
    u = field.flat[grid.active]
    res = u[:, None] - op.candidates(field.flat)
    full = []
    for k in range(3):
        a = np.full(grid.node_class.size, np.nan)
        a[grid.active] = res[:, k]
        full.append(a.reshape(grid.shape))
    m = res.max(axis=1) if res.size else np.zeros(0)
    bc = boundary_values(grid)
    mask = grid.node_class != NodeClass.INTERIOR
    berr = float(np.max(np.abs(field.values[mask] - bc[mask]))) if mask.any() else 0.0
    return Residual(
        full[0], full[1], full[2],
        sup=float(np.max(np.abs(m))) if m.size else 0.0,
        positive_sup=float(max(m.max(), 0.0)) if m.size else 0.0,
        complementarity_gap=float(np.min(np.abs(res), axis=1).max()) if m.size else 0.0,
        boundary_error=berr,
    )
