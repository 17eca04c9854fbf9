"""Masked rectangular grid over a truncation of the solvency strip."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .closed_form import upper_bound_psi
from .market import DEFAULT_TOL, MarketParams, PointClass, liquidation_value


class NodeClass(enum.IntEnum):
    BELOW_RUIN = PointClass.BELOW_RUIN
    RUIN_BOUNDARY = PointClass.RUIN_BOUNDARY
    INTERIOR = PointClass.INTERIOR
    SAFE_BOUNDARY = PointClass.SAFE_BOUNDARY
    SAFE = PointClass.SAFE
    TRUNCATION = 5


class Region(enum.IntEnum):
    NO_TRADE = 0
    BUY = 1
    SELL = 2
    BOUNDARY = 3


CLASS_NAMES = {c.value: c.name.lower() for c in NodeClass}
REGION_NAMES = {r.value: r.name.lower() for r in Region}


@dataclass(frozen=True)
class GridSpec:
    """Grid layout.

    ``y_min``/``y_max`` default to ``-0.25 c/r`` and ``1.5 c/r``. The row
    spacing is adjusted so that ``y = 0`` is a grid row (``y_max`` and ``ny``
    are kept, ``y_min`` moves by less than one spacing).

    By default each row holds ``nx`` nodes on a window covering that row's
    slice of the strip ``b <= L <= c/r``, widened on both sides by ``pad``
    times the strip width. All windows share one x-lattice with origin 0, so
    vertical neighbours line up. If ``x_min`` and ``x_max`` are both given,
    every row uses that box instead.

    ``subdiv`` records how often the spec was refined; windows are placed on
    the lattice of the unrefined grid so that refinements are nested.
    """

    nx: int = 201
    ny: int = 201
    y_min: float | None = None
    y_max: float | None = None
    x_min: float | None = None
    x_max: float | None = None
    pad: float = 0.05
    tol: float = DEFAULT_TOL
    subdiv: int = 1

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("nx and ny must be at least 3")
        if self.y_min is not None and self.y_max is not None:
            if not self.y_min < 0.0 < self.y_max:
                raise ValueError("need y_min < 0 < y_max")
        if (self.x_min is None) != (self.x_max is None):
            raise ValueError("give both x_min and x_max or neither")
        if self.x_min is not None and not self.x_min < self.x_max:
            raise ValueError("x_min must be below x_max")
        if self.pad < 0:
            raise ValueError("pad must be nonnegative")
        if self.subdiv < 1 or (self.nx - 1) % self.subdiv or (self.ny - 1) % self.subdiv:
            raise ValueError("subdiv must divide nx - 1 and ny - 1")

    @property
    def boxed(self) -> bool:
        return self.x_min is not None

    def resolve(self, p: MarketParams) -> "GridSpec":
        """Fill the y defaults and snap the rows so that ``y = 0`` is a node."""
        y_min = -0.25 * p.safe_level if self.y_min is None else float(self.y_min)
        y_max = 1.5 * p.safe_level if self.y_max is None else float(self.y_max)
        if not y_min < 0.0 < y_max:
            raise ValueError("need y_min < 0 < y_max")
        j0 = int(round(-y_min * (self.ny - 1) / (y_max - y_min)))
        j0 = min(max(j0, 1), self.ny - 2)
        dy = y_max / (self.ny - 1 - j0)
        return replace(self, y_min=-j0 * dy, y_max=y_max)

    def refined(self, factor: int = 2) -> "GridSpec":
        """Nested refinement: every node of ``self`` is a node of the result."""
        if self.y_min is None:
            raise ValueError("resolve the spec before refining")
        return replace(
            self,
            nx=(self.nx - 1) * factor + 1,
            ny=(self.ny - 1) * factor + 1,
            subdiv=self.subdiv * factor,
        )

    def extended(self, p: MarketParams, rows: int) -> "GridSpec":
        """Same spacing and columns with ``rows`` extra rows above ``y_max``."""
        s = self.resolve(p)
        j0 = int(round(-s.y_min * (s.ny - 1) / (s.y_max - s.y_min)))
        dy = s.y_max / (s.ny - 1 - j0)
        return replace(s, ny=s.ny + rows, y_max=s.y_max + rows * dy)


@dataclass(eq=False)
class Grid:
    """A resolved grid with node classification.

    Arrays are stored row-major with shape ``(ny, nx)``: row ``j`` holds the
    nodes at height ``ys[j]`` and node ``(j, i)`` sits at
    ``x = x_origin + (col_off[j] + i) dx``.
    """

    params: MarketParams
    spec: GridSpec
    x_origin: float
    dx: float
    col_off: np.ndarray  # (ny,) integer lattice offset of each row's window
    ys: np.ndarray
    node_class: np.ndarray
    active: np.ndarray  # flat indices of interior nodes
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self):
        return (self.spec.ny, self.spec.nx)

    @property
    def dy(self) -> float:
        return float(self.ys[1] - self.ys[0])

    @property
    def zero_row(self) -> int:
        return int(np.argmin(np.abs(self.ys)))

    def mesh(self):
        """Node coordinates ``(X, Y)``, each of shape ``(ny, nx)``."""
        cols = self.col_off[:, None] + np.arange(self.spec.nx)[None, :]
        X = self.x_origin + cols * self.dx
        Y = np.broadcast_to(self.ys[:, None], self.shape).copy()
        return X, Y

    def column(self, j, lattice_col):
        """Window index of a lattice column in row ``j`` (may fall outside ``[0, nx)``)."""
        return np.asarray(lattice_col) - self.col_off[np.asarray(j)]

    def lattice_col(self, j, i):
        return np.asarray(i) + self.col_off[np.asarray(j)]

    @property
    def in_domain(self) -> np.ndarray:
        """Nodes in the closed strip b <= L <= c/r (everything written to CSV)."""
        return (self.node_class != NodeClass.BELOW_RUIN) & (self.node_class != NodeClass.SAFE)

    def counts(self) -> dict[str, int]:
        return {CLASS_NAMES[c]: int(np.count_nonzero(self.node_class == c)) for c in CLASS_NAMES}


def build_grid(p: MarketParams, spec: GridSpec | None = None) -> Grid:
    """Lay out and classify the nodes.

    Nodes strictly inside the strip on the first and last row, or whose
    stencil (one lattice column either side on the row above, the row
    itself and the row below) is not fully stored, are marked
    ``TRUNCATION``. Every interior node therefore has all its neighbours.

    Raises
    ------
    ValueError
        If no node is interior.
    """
    spec = (spec or GridSpec()).resolve(p)
    ny, nx = spec.ny, spec.nx
    j0 = int(round(-spec.y_min * (ny - 1) / (spec.y_max - spec.y_min)))
    dy = spec.y_max / (ny - 1 - j0)
    ys = (np.arange(ny) - j0) * dy
    if spec.boxed:
        x_origin = float(spec.x_min)
        dx = (spec.x_max - spec.x_min) / (nx - 1)
        col_off = np.zeros(ny, dtype=np.int64)
    else:
        width = p.safe_level - p.b
        x_origin = 0.0
        dx = width * (1.0 + 2.0 * spec.pad) / (nx - 1)
        dx_base = dx * spec.subdiv
        left = liquidation_offset(p, ys) - spec.pad * width
        col_off = (np.floor(left / dx_base).astype(np.int64)) * spec.subdiv
    grid = Grid(p, spec, x_origin, dx, col_off, ys, np.empty((ny, nx), np.int8), np.empty(0, np.int64))
    X, Y = grid.mesh()
    L = liquidation_value(p, X, Y)
    tol = spec.tol
    cls = np.full(X.shape, NodeClass.INTERIOR, dtype=np.int8)
    cls[L < p.b - tol] = NodeClass.BELOW_RUIN
    cls[np.abs(L - p.b) <= tol] = NodeClass.RUIN_BOUNDARY
    cls[np.abs(L - p.safe_level) <= tol] = NodeClass.SAFE_BOUNDARY
    cls[L > p.safe_level + tol] = NodeClass.SAFE
    short = np.zeros(X.shape, dtype=bool)
    short[0, :] = short[-1, :] = True
    lat = col_off[:, None] + np.arange(nx)[None, :]
    for dj in (-1, 0, 1):
        jj = np.clip(np.arange(ny) + dj, 0, ny - 1)
        for dc in (-1, 1):
            k = lat + dc - col_off[jj][:, None]
            short |= (k < 0) | (k >= nx)
    cls[short & (cls == NodeClass.INTERIOR)] = NodeClass.TRUNCATION
    active = np.flatnonzero(cls.ravel() == NodeClass.INTERIOR)
    if active.size == 0:
        raise ValueError("grid has no interior node inside the solvency strip")
    grid.node_class = cls
    grid.active = active
    return grid


def liquidation_offset(p: MarketParams, y):
    """``x`` at which ``L(x, y) = b``, per row height ``y``."""
    y = np.asarray(y, dtype=float)
    return p.b - liquidation_value(p, 0.0, y)


def boundary_values(grid: Grid) -> np.ndarray:
    """Dirichlet data on every non-interior node; interior entries are NaN.

    Ruin-side nodes carry 1, safe-side nodes 0 and truncation nodes the
    liquidation bound ``psi_upper``.
    """
    p = grid.params
    vals = np.full(grid.shape, np.nan)
    cls = grid.node_class
    vals[(cls == NodeClass.BELOW_RUIN) | (cls == NodeClass.RUIN_BOUNDARY)] = 1.0
    vals[(cls == NodeClass.SAFE) | (cls == NodeClass.SAFE_BOUNDARY)] = 0.0
    tr = cls == NodeClass.TRUNCATION
    if np.any(tr):
        X, Y = grid.mesh()
        vals[tr] = upper_bound_psi(p, X[tr], Y[tr])
    return vals


@dataclass(eq=False)
class ValueField:
    grid: Grid
    values: np.ndarray  # shape (ny, nx)

    @classmethod
    def from_interior(cls, grid: Grid, interior) -> "ValueField":
        """Boundary data everywhere, ``interior`` (scalar, array over active nodes, or callable) inside."""
        vals = boundary_values(grid)
        flat = vals.ravel()
        if callable(interior):
            X, Y = grid.mesh()
            flat[grid.active] = interior(X.ravel()[grid.active], Y.ravel()[grid.active])
        else:
            flat[grid.active] = interior
        return cls(grid, vals)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    @property
    def node_class(self) -> np.ndarray:
        return self.grid.node_class

    def copy(self) -> "ValueField":
        return ValueField(self.grid, self.values.copy())

    def interpolate(self, x, y) -> np.ndarray:
        """Bilinear interpolation on the lattice cell containing ``(x, y)``.

        Returns 1 at or below the ruin level and 0 at or above the safe
        level. Lattice nodes outside a row's stored window lie beyond the
        strip and contribute their boundary value.
        """
        g = self.grid
        p = g.params
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        L = liquidation_value(p, x, y)
        fj = np.clip((y - g.ys[0]) / g.dy, 0, g.spec.ny - 1 - 1e-12)
        j = np.floor(fj).astype(int)
        t = fj - j
        fc = (x - g.x_origin) / g.dx
        c = np.floor(fc).astype(int)
        s = fc - c
        out = 0.0
        for dj, wj in ((0, 1 - t), (1, t)):
            for dc, wc in ((0, 1 - s), (1, s)):
                out = out + wj * wc * self._lattice_value(j + dj, c + dc)
        out = np.where(L <= p.b, 1.0, np.where(L >= p.safe_level, 0.0, out))
        return out[()] if out.ndim == 0 else out

    def _lattice_value(self, j, c):
        g = self.grid
        i = g.column(j, c)
        inside = (i >= 0) & (i < g.spec.nx)
        v = self.values[j, np.clip(i, 0, g.spec.nx - 1)]
        if np.all(inside):
            return v
        xl = g.x_origin + c * g.dx
        L = liquidation_value(g.params, xl, g.ys[j])
        outside = np.where(L <= g.params.b, 1.0, 0.0)
        return np.where(inside, v, outside)


@dataclass(eq=False)
class RegionMap:
    grid: Grid
    labels: np.ndarray  # shape (ny, nx), Region codes

    def counts(self) -> dict[str, int]:
        return {REGION_NAMES[r]: int(np.count_nonzero(self.labels == r)) for r in REGION_NAMES}

    def no_trade_area(self) -> float:
        return float(np.count_nonzero(self.labels == Region.NO_TRADE)) * self.grid.dx * self.grid.dy

    def lookup(self, x, y) -> np.ndarray:
        """Label of the nearest node (ties round up); outside the stored windows ``BOUNDARY``.

        Heights beyond the first or last interior-capable row use the
        nearest such row, since the outermost rows only hold truncation data.
        """
        g = self.grid
        j = np.floor((np.asarray(y) - g.ys[0]) / g.dy + 0.5).astype(int)
        j = np.clip(j, 1, g.spec.ny - 2)
        i = g.column(j, np.floor((np.asarray(x) - g.x_origin) / g.dx + 0.5).astype(int))
        inside = (i >= 0) & (i < g.spec.nx)
        lab = self.labels[j, np.clip(i, 0, g.spec.nx - 1)]
        return np.where(inside, lab, np.int8(Region.BOUNDARY)).astype(np.int8)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_value_csv(field: ValueField, path: str | Path) -> None:
    g = field.grid
    X, Y = g.mesh()
    mask = g.in_domain
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "value", "class"])
        for x, y, v, c in zip(X[mask], Y[mask], field.values[mask], g.node_class[mask]):
            w.writerow([_fmt(x), _fmt(y), _fmt(v), CLASS_NAMES[int(c)]])


def write_region_csv(rmap: RegionMap, path: str | Path) -> None:
    g = rmap.grid
    X, Y = g.mesh()
    mask = g.in_domain
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "region"])
        for x, y, r in zip(X[mask], Y[mask], rmap.labels[mask]):
            w.writerow([_fmt(x), _fmt(y), REGION_NAMES[int(r)]])


def _read_rows(path, header):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != header:
        raise ValueError(f"{path}: expected header {','.join(header)}")
    return rows[1:]


def _check_coords(grid: Grid, rows, path):
    X, Y = grid.mesh()
    mask = grid.in_domain
    if len(rows) != int(mask.sum()):
        raise ValueError(f"{path}: {len(rows)} rows, grid has {int(mask.sum())} in-domain nodes")
    xs = np.array([float(r[0]) for r in rows])
    ys = np.array([float(r[1]) for r in rows])
    scale = max(1.0, float(np.abs(X).max()), float(np.abs(grid.ys).max()))
    if not (np.allclose(xs, X[mask], rtol=0, atol=1e-12 * scale) and np.allclose(ys, Y[mask], rtol=0, atol=1e-12 * scale)):
        raise ValueError(f"{path}: coordinates do not match the configured grid")
    return mask


def read_value_csv(grid: Grid, path: str | Path) -> ValueField:
    rows = _read_rows(path, ["x", "y", "value", "class"])
    mask = _check_coords(grid, rows, path)
    vals = boundary_values(grid)
    vals[mask] = [float(r[2]) for r in rows]
    return ValueField(grid, vals)


def read_region_csv(grid: Grid, path: str | Path) -> RegionMap:
    rows = _read_rows(path, ["x", "y", "region"])
    mask = _check_coords(grid, rows, path)
    inv = {v: k for k, v in REGION_NAMES.items()}
    labels = np.full(grid.shape, Region.BOUNDARY, dtype=np.int8)
    labels[mask] = [inv[r[2]] for r in rows]
    return RegionMap(grid, labels)


def shared_nodes(coarse: Grid, fine: Grid):
    """Index arrays ``(coarse_idx, fine_idx)`` of coinciding in-domain nodes.

    ``fine`` may be a nested refinement of ``coarse`` or share its spacing
    with extra rows; nodes are matched on the common x-lattice and by
    height, and only nodes stored in both windows are returned.
    """
    fx = coarse.dx / fine.dx
    fy = coarse.dy / fine.dy
    if abs(fx - round(fx)) > 1e-9 or abs(fy - round(fy)) > 1e-9:
        raise ValueError("grids are not nested")
    fx, fy = int(round(fx)), int(round(fy))
    shift = (coarse.x_origin - fine.x_origin) / fine.dx
    jshift = (coarse.ys[0] - fine.ys[0]) / fine.dy
    if abs(shift - round(shift)) > 1e-6 or abs(jshift - round(jshift)) > 1e-6:
        raise ValueError("grids do not share a lattice")
    shift, jshift = int(round(shift)), int(round(jshift))
    nyc, nxc = coarse.shape
    jc, ic = np.meshgrid(np.arange(nyc), np.arange(nxc), indexing="ij")
    jf = jc * fy + jshift
    cf = coarse.lattice_col(jc, ic) * fx + shift
    ok = (jf >= 0) & (jf < fine.spec.ny)
    jf_c = np.clip(jf, 0, fine.spec.ny - 1)
    i_f = fine.column(jf_c, cf)
    ok &= (i_f >= 0) & (i_f < fine.spec.nx)
    ok &= coarse.in_domain
    ok[ok] &= fine.in_domain[jf_c[ok], i_f[ok]]
    cidx = np.flatnonzero(ok.ravel())
    fidx = (jf_c * fine.spec.nx + i_f).ravel()[cidx]
    return cidx, fidx
