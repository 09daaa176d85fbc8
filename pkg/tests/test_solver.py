import math

import numpy as np
import pytest
from scipy import integrate

from parabolic_greens.errors import NumericalError, ResourceError, UsageError
from parabolic_greens.solver import (CoefficientField, DiscreteKernelTable, Grid,
                                     HeatSeriesOracle, ParabolicSolver, ScalarField,
                                     coefficient_from_dict, dirichlet_heat_1d, free_space_heat,
                                     greens_discrete_ground_truth, greens_exact_heat,
                                     heat_coefficient, load_kernel_table, positive_substeps,
                                     save_kernel_table, solve_adjoint, solve_forward)
from parabolic_greens.theory import fit_gaussian_envelope


def series_oracle(x, t, y, s, terms=4000):
    """Independent eigenfunction sum for the 1-D Dirichlet heat kernel."""
    if t <= s:
        return 0.0
    k = np.arange(1, terms + 1)
    return float(np.sum(2 * np.sin(k * np.pi * x) * np.sin(k * np.pi * y)
                        * np.exp(-(k * np.pi) ** 2 * (t - s))))


# -- grid and fields --------------------------------------------------------

@pytest.mark.parametrize("n,T", [(1, 1.0), (2, 0.5)])
def test_grid_weights_sum_to_domain_volume(n, T):
    g = Grid(n, 8, 16, T)
    assert g.weights.sum() == pytest.approx(T, abs=1e-12)
    assert np.allclose(np.diff(g.x), g.h) and np.allclose(np.diff(g.t), g.dt)
    assert g.shape == (17,) + (9,) * n


def test_field_rejects_nonfinite():
    g = Grid(1, 4, 4)
    v = np.zeros(g.shape)
    v[1, 1] = np.nan
    with pytest.raises(NumericalError):
        ScalarField(g, v)


def test_coefficient_bounds_and_kinds():
    g = Grid(1, 8, 8)
    heat_coefficient(1).check_bounds(g)
    bad = CoefficientField(lambda p, t: np.full(p.shape[0], 2.0), 1, 0.5, 1.0)
    with pytest.raises(UsageError):
        bad.check_bounds(g)
    asym = CoefficientField(lambda p, t: np.tile([[1.0, 0.3], [0.0, 1.0]], (p.shape[0], 1, 1)),
                            2, 0.5, 2.0)
    with pytest.raises(UsageError):
        asym.check_bounds(Grid(2, 4, 4))
    c = coefficient_from_dict({"kind": "constant", "value": 2.0}, 1)
    assert c.lam == c.Lam == 2.0
    tab = coefficient_from_dict({"kind": "table", "x": [0, 1], "t": [0, 1],
                                 "values": [[1, 2], [1, 2]]}, 1)
    assert tab.evaluate(np.array([[0.5]]), 0.3)[0, 0, 0] == pytest.approx(1.5)
    with pytest.raises(UsageError):
        coefficient_from_dict({"kind": "nope"}, 1)


# -- forward solver ---------------------------------------------------------

def test_zero_forcing_gives_zero():
    g = Grid(1, 16, 16)
    c = heat_coefficient(1)
    assert np.all(solve_forward(c, np.zeros(g.shape), g).values == 0)
    assert np.all(solve_adjoint(c, np.zeros(g.shape), g).values == 0)


def manufactured_error(n, nx, nt):
    g = Grid(n, nx, nt, 1.0)
    t = g.t.reshape((-1,) + (1,) * n)
    shape_fn = np.ones(())
    for _ in range(n):
        shape_fn = np.multiply.outer(shape_fn, np.sin(np.pi * g.x))
    exact = t * shape_fn
    f = (1.0 + n * np.pi ** 2 * t) * shape_fn
    u = solve_forward(heat_coefficient(n), f, g).values
    return float(np.max(np.abs(u - exact)))


def test_manufactured_solution_second_order_1d():
    errs = [manufactured_error(1, m, m) for m in (16, 32, 64, 128)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.9), orders


def test_manufactured_solution_second_order_2d():
    errs = [manufactured_error(2, m, m) for m in (8, 16, 32)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.9), orders


@pytest.mark.parametrize("n,substeps", [(1, 1), (1, 3), (2, 1)])
def test_linearity(n, substeps):
    g = Grid(n, 8, 12)
    s = ParabolicSolver(heat_coefficient(n), g, substeps=substeps)
    rng = np.random.default_rng(0)
    f1, f2 = rng.standard_normal(g.shape), rng.standard_normal(g.shape)
    a, b = 0.7, -1.3
    lhs = s.forward(a * f1 + b * f2)
    rhs = a * s.forward(f1) + b * s.forward(f2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))


def variable_coeff(n):
    if n == 1:
        return CoefficientField(lambda p, t: 1.0 + 0.5 * np.sin(3 * p[:, 0]) * np.cos(t),
                                1, 0.5, 1.5, name="var")

    def func(p, t):
        a = np.zeros((p.shape[0], 2, 2))
        a[:, 0, 0] = 1.5 + 0.3 * np.sin(p[:, 0])
        a[:, 1, 1] = 1.2
        a[:, 0, 1] = a[:, 1, 0] = 0.2 * np.cos(t)
        return a
    return CoefficientField(func, 2, 0.8, 2.0, name="var2")


@pytest.mark.parametrize("n,substeps", [(1, 1), (1, 4), (2, 1), (2, 2)])
def test_adjoint_duality(n, substeps):
    g = Grid(n, 10 if n == 1 else 6, 12, 0.7)
    s = ParabolicSolver(variable_coeff(n), g, substeps=substeps)
    rng = np.random.default_rng(1)
    w = g.weights
    for _ in range(20):
        f, h = rng.standard_normal(g.shape), rng.standard_normal(g.shape)
        lhs = np.sum(w * s.forward(f) * h)
        rhs = np.sum(w * f * s.adjoint(h))
        scale = math.sqrt(np.sum(w * f * f) * np.sum(w * h * h))
        assert abs(lhs - rhs) <= 1e-10 * scale


def test_adjoint_is_time_reversed_forward_for_heat():
    # both discretise the same backward problem; the exact transpose keeps a
    # half-step forcing term at the terminal level, so they agree to O(dt)
    gaps = []
    for nt in (64, 128, 256):
        g = Grid(1, 32, nt)
        s = ParabolicSolver(heat_coefficient(1), g)
        h = np.sin(np.pi * g.x)[None, :] * (1 + g.t[:, None])
        rev = s.forward(h[::-1])[::-1]
        gaps.append(np.max(np.abs(s.adjoint(h) - rev)) / np.max(np.abs(rev)))
    assert gaps[-1] < 0.03
    assert gaps[0] / gaps[1] > 1.8 and gaps[1] / gaps[2] > 1.8


def test_positivity_proxy():
    g = Grid(1, 32, 64)
    bump = np.exp(-((g.x - 0.4) / 0.1) ** 2)[None, :] * np.ones((g.nt + 1, 1))
    u = solve_forward(heat_coefficient(1), bump, g).values
    assert u.min() >= -1e-10
    rng = np.random.default_rng(2)
    f = rng.uniform(size=g.shape)
    c = heat_coefficient(1)
    s = ParabolicSolver(c, g, substeps=positive_substeps(c, g))
    assert s.forward(f).min() >= -1e-10


def test_windowed_application_equals_restricted_full_solve():
    g = Grid(1, 16, 32)
    s = ParabolicSolver(heat_coefficient(1), g)
    rng = np.random.default_rng(4)
    src = (slice(5, 12), slice(2, 9))
    dst = (slice(10, 30), slice(8, 17))
    f = rng.standard_normal((7, 7, 3))
    full = np.zeros(g.shape + (3,))
    full[src] = f
    ref = s.apply_forward(full, s.full_window(), s.full_window())[dst]
    assert np.allclose(s.apply_forward(f, src, dst), ref, atol=1e-13)
    h = rng.standard_normal((20, 9, 2))
    fullh = np.zeros(g.shape + (2,))
    fullh[dst] = h
    refa = s.apply_adjoint(fullh, s.full_window(), s.full_window())[src]
    assert np.allclose(s.apply_adjoint(h, dst, src), refa, atol=1e-13)


def test_solver_counts_columns():
    g = Grid(1, 8, 8)
    s = ParabolicSolver(heat_coefficient(1), g)
    s.forward(np.zeros(g.shape + (3,)))
    s.adjoint(np.zeros(g.shape + (2,)))
    assert s.counts == {"forward": 3, "adjoint": 2}


# -- analytic kernels -------------------------------------------------------

def test_greens_exact_heat_examples():
    assert greens_exact_heat(0.3, 0.2, 0.4, 0.2) == 0.0
    assert greens_exact_heat(0.3, 0.1, 0.4, 0.2) == 0.0
    # the six-digit reference value is rounded; the converged series gives 0.7456932
    assert greens_exact_heat(0.5, 0.1, 0.5, 0.0) == pytest.approx(0.745694, abs=1e-6)
    k = np.arange(1, 60, 2)
    assert greens_exact_heat(0.5, 0.1, 0.5, 0.0) == pytest.approx(
        2 * np.sum(np.exp(-k ** 2 * np.pi ** 2 / 10)), rel=1e-12)
    assert 2 * math.exp(-math.pi ** 2 / 10) == pytest.approx(0.745416, abs=5e-7)
    v = greens_exact_heat(0.5, 0.01, 0.5, 0.0, n_terms=400)
    assert v == pytest.approx(1 / math.sqrt(4 * math.pi * 0.01), rel=1e-3)


def test_dirichlet_kernel_matches_series_across_switch():
    rng = np.random.default_rng(5)
    for tau in (0.001, 0.0199, 0.02, 0.0201, 0.3):
        x, y = rng.uniform(size=2)
        assert dirichlet_heat_1d(x, y, tau) == pytest.approx(series_oracle(x, tau, y, 0.0, 20000),
                                                             rel=1e-9, abs=1e-12)


def test_free_space_kernel():
    assert free_space_heat(0.5, 0.01, 0.5, 0.0) == pytest.approx(2.82095, abs=5e-6)
    assert free_space_heat(0.5, 0.0, 0.5, 0.1) == 0.0


def test_series_oracle_box_integral_matches_quadrature():
    o = HeatSeriesOracle(1, 1.0)
    box = (0.1, 0.3, 0.5, 0.7, 0.6, 0.8, 0.1, 0.2)  # xlo xhi t0 t1 ylo yhi s0 s1
    val = o.box_integral([[box[0]]], [[box[1]]], [box[2]], [box[3]],
                         [[box[4]]], [[box[5]]], [box[6]], [box[7]])[0]
    ref, _ = integrate.nquad(lambda x, t, y, s: series_oracle(x, t, y, s, 200),
                             [[box[0], box[1]], [box[2], box[3]], [box[4], box[5]], [box[6], box[7]]],
                             opts={"epsabs": 1e-10, "epsrel": 1e-8})
    assert val == pytest.approx(ref, rel=1e-6)


def test_series_oracle_block_shape_and_causality():
    o = HeatSeriesOracle(1, 1.0)
    blk = o.block([np.linspace(0.1, 0.9, 5)], np.array([0.2, 0.5]),
                  [np.linspace(0.2, 0.8, 3)], np.array([0.1, 0.3, 0.6]))
    assert blk.shape == (2, 5, 3, 3)
    assert np.all(blk[0, :, 1:, :] == 0) and np.all(blk[1, :, 2, :] == 0)
    assert blk[1, 2, 0, 1] == pytest.approx(series_oracle(0.5, 0.5, 0.5, 0.1))


# -- ground-truth table -----------------------------------------------------

@pytest.fixture(scope="module")
def table_64():
    return greens_discrete_ground_truth(heat_coefficient(1), Grid(1, 64, 128))


def test_table_matches_series_on_64x128(table_64):
    g = table_64.grid
    rng = np.random.default_rng(6)
    worst, checked = 0.0, 0
    for _ in range(400):
        l, j = sorted(rng.integers(0, g.nt + 1, 2))
        if g.t[j] - g.t[l] < 0.05:
            continue
        i, k = rng.integers(1, g.nx, 2)
        v = table_64.entries(j, i, l, k)
        ref = series_oracle(g.x[i], g.t[j], g.x[k], g.t[l])
        if ref > 1e-3:
            worst = max(worst, abs(v - ref) / ref)
            checked += 1
    assert checked >= 100
    assert worst <= 0.02


def test_table_causality_and_nonnegativity(table_64):
    g = table_64.grid
    full = (slice(0, g.nt + 1), slice(0, g.nx + 1))
    blk = table_64.block((slice(0, 40), full[1]), (slice(0, 40), full[1]))
    j = np.arange(40)
    mask = j[:, None, None, None] <= j[None, None, :, None]
    assert np.all(blk[np.broadcast_to(mask, blk.shape)] == 0)
    lag = table_64.block(full, (slice(0, 1), full[1]))
    assert lag.min() >= -1e-8


def test_table_gaussian_envelope(table_64):
    g = table_64.grid
    full = (slice(0, g.nt + 1), slice(0, g.nx + 1))
    lag = table_64.block(full, (slice(3, 4), full[1]))[:, :, 0, :]  # source time t_3
    tau = (g.t - g.t[3])[:, None, None] * np.ones(lag.shape)
    r2 = (g.x[None, :, None] - g.x[None, None, :]) ** 2 * np.ones(lag.shape)
    rng = np.random.default_rng(7)
    pick = rng.choice(lag.size, lag.size // 4, replace=False)
    env = fit_gaussian_envelope(r2.ravel()[pick], tau.ravel()[pick], lag.ravel()[pick], 1)
    bound = env(g.x[None, :, None] * np.ones(lag.shape), tau + g.t[3],
                g.x[None, None, :] * np.ones(lag.shape), g.t[3])
    assert np.all(lag <= bound * 1.05 + 1e-12)
    assert 0 < env.kappa < 1


def test_table_heat_scaling():
    # A = c I on [0, T/c] steps exactly like A = I on [0, T]; with tau = c t the
    # Jacobian of the source time cancels, so G_c(x, t, y, s) = G_1(x, ct, y, cs)
    c = 2.5
    base = DiscreteKernelTable(heat_coefficient(1), Grid(1, 16, 32, 1.0))
    scaled = DiscreteKernelTable(heat_coefficient(1, c), Grid(1, 16, 32, 1.0 / c))
    full = (slice(0, 33), slice(0, 17))
    a = base.block(full, (slice(4, 5), full[1]))
    b = scaled.block(full, (slice(4, 5), full[1]))
    assert np.allclose(b, a, rtol=1e-10, atol=1e-12)
    assert a.max() > 1


def test_table_memory_cap():
    with pytest.raises(ResourceError):
        DiscreteKernelTable(heat_coefficient(1), Grid(1, 64, 128), max_bytes=1000)


def test_exact_table_equals_solver_columns():
    g = Grid(1, 12, 16)
    s = ParabolicSolver(heat_coefficient(1), g)
    tab = DiscreteKernelTable(heat_coefficient(1), g, solver=s, exact=True)
    rng = np.random.default_rng(8)
    f = rng.standard_normal(g.shape)
    dense = tab.dense().reshape(g.size, g.size)
    u = dense @ (g.weights.ravel() * f.ravel())
    ref = s.forward(f).ravel()
    # the table zeroes the same-level term, which the raw solve keeps
    j = np.repeat(np.arange(g.nt + 1), g.nx + 1)
    same = np.zeros(g.shape)
    w = g.weights
    for m in range(g.nt + 1):
        spike = np.zeros(g.shape)
        spike[m] = f[m]
        same[m] = s.forward(spike)[m]
    assert np.allclose(u, ref - same.ravel(), atol=1e-12)
    assert j.size == u.size


def test_time_dependent_table_matches_time_invariant_path():
    g = Grid(1, 8, 8)
    c_inv = heat_coefficient(1)
    c_td = CoefficientField(lambda p, t: np.ones(p.shape[0]), 1, 1.0, 1.0,
                            time_independent=False)
    a = DiscreteKernelTable(c_inv, g, substeps=1, exact=True).dense()
    b = DiscreteKernelTable(c_td, g, substeps=1).dense()
    assert np.allclose(a, b, atol=1e-12)


def test_table_file_round_trip(tmp_path, table_64):
    path = tmp_path / "gt.bin"
    save_kernel_table(table_64, path)
    back = load_kernel_table(path)
    full = (slice(0, 129), slice(0, 65))
    q = (slice(10, 20), slice(5, 9))
    assert np.array_equal(back.block(full, q), table_64.block(full, q))
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(Exception):
        load_kernel_table(path)
