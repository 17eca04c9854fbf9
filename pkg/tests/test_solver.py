import numpy as np
import pytest

from lifetime_ruin.closed_form import upper_bound_psi
from lifetime_ruin.grid import GridSpec, NodeClass, Region, ValueField, build_grid
from lifetime_ruin.solver import (
    BUY,
    DIFFUSION,
    SELL,
    NonConvergence,
    SolverConfig,
    diffusion_fixed_point,
    discrete_operator,
    extract_region_map,
    initial_field,
    solve,
    transaction_candidate,
    vi_residual,
    vi_sweep,
)


@pytest.fixture(scope="module")
def grid51(params):
    return build_grid(params, GridSpec(nx=51, ny=51))


def random_field(grid, rng, lo=0.0, hi=1.0):
    return ValueField.from_interior(grid, rng.uniform(lo, hi, grid.active.size))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(tol_sup=0.0)
    with pytest.raises(ValueError):
        SolverConfig(tol_sup=1e-6, tol_bind=1e-8)
    with pytest.raises(ValueError):
        SolverConfig(damping=1.5)
    with pytest.raises(ValueError):
        SolverConfig(method="newton")


def test_zero_row_uses_left_neighbour_only(params, grid51, rng):
    g = grid51
    field = random_field(g, rng)
    j = g.zero_row
    X, _ = g.mesh()
    for i in np.flatnonzero(g.node_class[j] == NodeClass.INTERIOR)[5:-5:7]:
        x = X[j, i]
        w = (params.c - params.r * x) / g.dx
        expect = w * field.values[j, i - 1] / (params.beta + w)
        assert diffusion_fixed_point(field, (j, i)) == pytest.approx(expect, rel=1e-13)


def test_constant_field_candidates(grid51):
    kappa = 0.6
    field = ValueField(grid51, np.full(grid51.shape, kappa))
    op = discrete_operator(grid51)
    c = op.candidates(field.flat)
    assert np.all(c[:, DIFFUSION] < kappa)
    np.testing.assert_allclose(c[:, BUY], kappa, rtol=1e-14)
    np.testing.assert_allclose(c[:, SELL], kappa, rtol=1e-14)
    labels = extract_region_map(field).labels
    assert np.all(labels[grid51.node_class == NodeClass.INTERIOR] == Region.NO_TRADE)


def test_stencil_weights_are_convex_or_sub(grid51):
    op = discrete_operator(grid51)
    for k, st in enumerate(op.stencils):
        assert np.all(st.w >= 0)
        total = st.w.sum(axis=1)
        if k == DIFFUSION:
            assert np.all(total < 1)
        else:
            np.testing.assert_allclose(total, 1.0, rtol=1e-13)


@pytest.mark.parametrize("action,ratio,step", [(BUY, 1 / 0.9, (1, -1)), (SELL, 0.9, (-1, 1))])
def test_transaction_landing_on_node(params, rng, action, ratio, step):
    # choose dx so one cell step along the transaction ray ends on a node
    dy = 0.1
    dx = ratio * dy
    spec = GridSpec(nx=41, ny=21, y_min=-1.0, y_max=1.0, x_min=5.0, x_max=5.0 + 40 * dx)
    g = build_grid(params, spec)
    field = random_field(g, rng)
    for j in range(g.zero_row + 2, 19, 3):
        for i in range(3, 38, 6):
            if g.node_class[j, i] != NodeClass.INTERIOR:
                continue
            got = transaction_candidate(field, (j, i), action)
            assert got == pytest.approx(field.values[j + step[0], i + step[1]], abs=1e-12)


def test_buy_across_ruin_level_returns_one(params, grid51):
    # buying stock at y > 0 lowers the liquidation value; next to the ruin side it lands below b
    g = grid51
    field = ValueField.from_interior(g, 0.0)
    X, Y = g.mesh()
    j = g.zero_row + 5
    i = np.flatnonzero(g.node_class[j] == NodeClass.INTERIOR)[0]
    assert transaction_candidate(field, (j, i), BUY) > 0.0
    # from a short position selling more stock also lowers the liquidation value
    j = g.zero_row - 3
    i = np.flatnonzero(g.node_class[j] == NodeClass.INTERIOR)[0]
    assert transaction_candidate(field, (j, i), SELL) > 0.0


def test_zero_row_matches_one_dimensional_closed_form(params, grid51):
    # diffusion-only fixed point restricted to y = 0 (a closed system of the row)
    g = grid51
    op = discrete_operator(g)
    j = g.zero_row
    row = np.flatnonzero(g.node_class[j] == NodeClass.INTERIOR)
    rows = op.pos[j * g.spec.nx + row]
    field = ValueField.from_interior(g, 0.5)
    flat = field.flat
    for _ in range(20 * row.size):
        new = op.diffusion.apply(flat, rows)
        done = np.max(np.abs(new - flat[j * g.spec.nx + row])) < 1e-15
        flat[j * g.spec.nx + row] = new
        if done:
            break
    X, _ = g.mesh()
    exact = upper_bound_psi(params, X[j, row], 0.0)
    err = np.max(np.abs(flat[j * g.spec.nx + row] - exact))
    assert err <= 2 * g.dx / params.safe_level


def test_sweep_at_fixed_point(small_solution):
    field, _, report = small_solution
    _, upd = vi_sweep(field)
    assert upd <= report.sup_update + 1e-15
    assert upd <= 1e-8


def test_sweep_from_upper_bound_never_increases(grid51):
    field = initial_field(grid51, "upper")
    new, upd = vi_sweep(field)
    act = grid51.active
    assert np.all(new.flat[act] <= field.flat[act] + 1e-12)
    assert upd == pytest.approx(np.max(field.flat[act] - new.flat[act]), abs=1e-12)


def test_sweep_keeps_boundary_and_range(grid51, rng):
    field = random_field(grid51, rng)
    new, _ = vi_sweep(field)
    fixed = grid51.node_class != NodeClass.INTERIOR
    np.testing.assert_array_equal(new.values[fixed], field.values[fixed])
    act = grid51.active
    assert np.all((new.flat[act] >= 0) & (new.flat[act] <= 1))


def test_sweep_comparison(grid51, rng):
    for _ in range(5):
        u = random_field(grid51, rng, 0.0, 0.5)
        v = ValueField(grid51, u.values.copy())
        v.flat[grid51.active] += rng.uniform(0, 0.5, grid51.active.size)
        nu, _ = vi_sweep(u)
        nv, _ = vi_sweep(v)
        assert np.all(nu.flat[grid51.active] <= nv.flat[grid51.active])


def test_damping(grid51, rng):
    field = random_field(grid51, rng)
    full, _ = vi_sweep(field)
    half, _ = vi_sweep(field, SolverConfig(damping=0.5))
    act = grid51.active
    np.testing.assert_allclose(half.flat[act], 0.5 * (field.flat[act] + full.flat[act]), rtol=1e-14)


def test_sweep_independent_of_workers(grid51, rng):
    field = random_field(grid51, rng)
    a, ua = vi_sweep(field, SolverConfig(workers=1))
    b, ub = vi_sweep(field, SolverConfig(workers=3))
    np.testing.assert_array_equal(a.values, b.values)
    assert ua == ub


def test_solve_independent_of_workers(params):
    spec = GridSpec(nx=41, ny=41)
    a = solve(params, spec, SolverConfig(workers=1))[0]
    b = solve(params, spec, SolverConfig(workers=2))[0]
    np.testing.assert_array_equal(a.values, b.values)


def test_converged_solution_properties(small_solution):
    field, rmap, report = small_solution
    g = field.grid
    assert report.converged and report.sup_update <= 1e-8
    res = vi_residual(field)
    assert res.positive_sup <= 1e-6
    assert res.complementarity_gap <= 1e-6
    assert res.boundary_error == 0.0
    assert np.all(field.values[g.node_class == NodeClass.RUIN_BOUNDARY] == 1.0)
    assert np.all(field.values[g.node_class == NodeClass.SAFE_BOUNDARY] == 0.0)
    assert np.all((field.values[g.in_domain] >= 0) & (field.values[g.in_domain] <= 1))
    keys = set(report.to_json())
    assert keys == {"iterations", "sup_update", "residual", "wall_ms"}


@pytest.mark.parametrize("method,init", [("splitting", "lower"), ("howard", "ones"), ("howard", "zeros")])
def test_methods_agree(params, small_solution, method, init):
    ref = small_solution[0]
    field, _, _ = solve(params, GridSpec(nx=51, ny=51), SolverConfig(method=method, init=init))
    assert np.max(np.abs(field.values[ref.grid.in_domain] - ref.values[ref.grid.in_domain])) <= 2e-8


def test_value_iteration_from_above(params, small_solution):
    # plain sweeps decrease monotonically onto the fixed point; stopping on a small
    # update leaves them slightly above it
    ref = small_solution[0]
    field, _, report = solve(params, GridSpec(nx=51, ny=51), SolverConfig(method="value", init="upper"))
    m = ref.grid.in_domain
    gap = field.values[m] - ref.values[m]
    assert gap.min() >= -1e-12
    assert gap.max() <= 1e-5
    assert max(inc for inc, _ in report.trace) <= 1e-12


def test_region_labels_bind(default_solution):
    field, rmap, _ = default_solution
    g = field.grid
    op = discrete_operator(g)
    u = field.flat[g.active]
    c = op.candidates(field.flat)
    lab = rmap.labels.ravel()[g.active]
    assert np.all(np.abs(u[lab == Region.BUY] - c[lab == Region.BUY, BUY]) <= 1e-6)
    assert np.all(np.abs(u[lab == Region.SELL] - c[lab == Region.SELL, SELL]) <= 1e-6)
    counts = rmap.counts()
    assert counts["no_trade"] > 0 and counts["buy"] > 0 and counts["sell"] > 0
    assert np.all(rmap.labels[g.node_class != NodeClass.INTERIOR] == Region.BOUNDARY)


def test_zero_field_residual_flags_boundary(grid51):
    field = ValueField(grid51, np.zeros(grid51.shape))
    res = vi_residual(field)
    np.testing.assert_array_equal(res.diffusion[grid51.node_class == NodeClass.INTERIOR], 0.0)
    np.testing.assert_array_equal(res.buy[grid51.node_class == NodeClass.INTERIOR], 0.0)
    np.testing.assert_array_equal(res.sell[grid51.node_class == NodeClass.INTERIOR], 0.0)
    assert res.boundary_error == 1.0


def test_no_trade_area_shrinks_with_costs(params):
    areas = []
    for cost in (0.1, 0.01, 0.001):
        q = params.replace(lambda_buy=cost, mu_sell=cost)
        _, rmap, _ = solve(q, GridSpec(nx=101, ny=101))
        areas.append(rmap.no_trade_area())
    assert areas[0] > areas[1] > areas[2] > 0


def test_nonconvergence_reports(params):
    with pytest.raises(NonConvergence) as exc:
        solve(params, GridSpec(nx=41, ny=41), SolverConfig(method="value", max_iters=3))
    assert exc.value.report is not None and not exc.value.report.converged
    assert exc.value.field is not None
