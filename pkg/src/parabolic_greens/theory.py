"""Closed-form constants and numerical checks of the low-rank theory.

Constants follow the approximation-theoretic chain: the cone-condition
approximation constant ``c_appr``, the energy constant ``kappa_c``, the
separation constant ``c_rho``, the rank estimate ``k_eps``, the number of
hierarchical levels ``n_eps`` and the training-pair budget ``N_eps``.
Natural logarithms are used throughout.

The inequality checkers evaluate both sides by quadrature on grid data and
report the ratio ``lhs / rhs``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import ndtr

from .errors import UsageError


# ---------------------------------------------------------------------------
# parameters and constants
# ---------------------------------------------------------------------------

def unit_ball_volume(n: int) -> float:
    return math.pi ** (n / 2.0) / gamma_fn(n / 2.0 + 1.0)


@dataclass(frozen=True)
class TheoryParams:
    """Inputs of the closed-form constants.

    ``theta`` and ``delta0`` describe the cone condition of the domain
    (user inputs); ``kappa`` and ``C_diag`` are the Gaussian decay rate and
    diagonal-estimate constant, normally fitted from a kernel table.
    """

    n: int = 1
    lam: float = 1.0
    Lam: float = 1.0
    beta: float = 1.0
    rho: float = 1.0
    theta: float = 0.5
    delta0: float = 0.5
    kappa: float = 0.25
    C_diag: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise UsageError("n must be >= 1")
        if not (0 < self.lam <= self.Lam):
            raise UsageError("need 0 < lambda <= Lambda")
        for name in ("beta", "rho", "delta0", "kappa", "C_diag"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be positive")
        if not (0 < self.theta < 1):
            raise UsageError("theta must lie in (0, 1)")

    @property
    def omega_n(self) -> float:
        return unit_ball_volume(self.n)


def c_appr(params: TheoryParams) -> float:
    """Approximation constant of the cone condition."""
    n, w, th = params.n, params.omega_n, params.theta
    inner = (w ** (2 - 2 / n) * th ** -2
             + 2 * params.Lam ** 2 * w ** (2 / n) * params.beta ** 2 * th ** (-2 - 2 / n))
    return 2 ** (n + 2) * math.sqrt(inner)


def kappa_c(params: TheoryParams) -> float:
    return math.sqrt(4 * params.Lam ** 2 / params.lam ** 2 + 1 / (2 * params.lam * params.beta))


def c_rho(params: TheoryParams, rho: float | None = None) -> float:
    """``e (2 + 1/rho) kappa_c c_appr``; ``rho`` defaults to ``params.rho``."""
    rho = params.rho if rho is None else rho
    if not rho > 0:
        raise UsageError("rho must be positive")
    return math.e * (2 + 1 / rho) * kappa_c(params) * c_appr(params)


def _clog(eps: float) -> int:
    return max(1, math.ceil(math.log(1.0 / eps)))


def k_eps(epsilon: float, params: TheoryParams) -> float:
    """Rank estimate ``c_{rho/2}^{n+2} ceil(log 1/eps)^{n+3} + ceil(log 1/eps)``."""
    if not (0 < epsilon < 1):
        raise UsageError("epsilon must lie in (0, 1)")
    L = _clog(epsilon)
    n = params.n
    return c_rho(params, params.rho / 2) ** (n + 2) * L ** (n + 3) + L


@dataclass(frozen=True)
class LevelChoice:
    value: int
    too_large: bool = False

    def __int__(self):
        return self.value


def n_eps(epsilon: float, C_diag: float) -> LevelChoice:
    """Smallest level count with ``sqrt(2) C_diag 4^{-n} <= epsilon``.

    Returns level 1 with ``too_large=True`` when ``epsilon >= sqrt(2) C_diag``.
    """
    if not (epsilon > 0 and C_diag > 0):
        raise UsageError("epsilon and C_diag must be positive")
    top = math.sqrt(2) * C_diag
    if epsilon >= top:
        return LevelChoice(1, True)
    n = max(1, math.ceil(math.log(top / epsilon, 4) - 1e-12))
    while top * 4.0 ** (-n) > epsilon:
        n += 1
    while n > 1 and top * 4.0 ** (-(n - 1)) <= epsilon:
        n -= 1
    return LevelChoice(n)


@dataclass(frozen=True)
class PairBudget:
    value: float
    exponent: float
    levels: int


def N_eps(epsilon: float, n: int, params: TheoryParams, k: int = 10, p: int = 10,
          levels: int | None = None) -> PairBudget:
    """Training-pair budget ``24 6^n 2^{(n+2) n_eps} 2 (k + p)``.

    ``levels`` overrides ``n_eps(epsilon, C_diag)``. The asymptotic exponent
    ``(n + 2) / 2`` of ``1 / epsilon`` is returned alongside.
    """
    if not (0 < epsilon < 1):
        raise UsageError("epsilon must lie in (0, 1)")
    L = int(n_eps(epsilon, params.C_diag)) if levels is None else int(levels)
    value = 24.0 * 6 ** n * 2.0 ** ((n + 2) * L) * 2 * (k + p)
    return PairBudget(value, (n + 2) / 2.0, L)


def report(params: TheoryParams, epsilon: float = 1e-3) -> dict:
    """All constants for ``params`` as an ordered mapping."""
    out = {
        "n": params.n, "lambda": params.lam, "Lambda": params.Lam, "beta": params.beta,
        "rho": params.rho, "theta (input)": params.theta, "delta0 (input)": params.delta0,
        "omega_n": params.omega_n,
        "kappa_c": kappa_c(params), "c_appr": c_appr(params), "c_rho": c_rho(params),
        "c_rho/2": c_rho(params, params.rho / 2),
        "epsilon": epsilon, "k_eps": k_eps(epsilon, params),
    }
    lv = n_eps(epsilon, params.C_diag)
    out["C_diag"] = params.C_diag
    out["n_eps"] = lv.value
    out["n_eps_flag"] = "epsilon too large" if lv.too_large else "ok"
    bud = N_eps(epsilon, params.n, params)
    out["N_eps (k=p=10)"] = bud.value
    out["pair exponent"] = bud.exponent
    return out


# ---------------------------------------------------------------------------
# inequality checks
# ---------------------------------------------------------------------------

CHECK_SLACK = 5e-2


@dataclass
class RatioReport:
    lhs: float
    rhs: float
    constant: float
    details: dict = field(default_factory=dict)
    slack: float = CHECK_SLACK

    @property
    def ratio(self) -> float:
        if self.rhs == 0:
            return 0.0 if self.lhs == 0 else math.inf
        return self.lhs / self.rhs

    @property
    def ok(self) -> bool:
        return self.ratio <= 1.0 + self.slack


def _trap_weights(shape, spacings) -> np.ndarray:
    w = np.ones(())
    for npts, h in zip(shape, spacings):
        a = np.full(npts, float(h))
        if npts > 1:
            a[0] = a[-1] = h / 2.0
        else:
            a[:] = 0.0
        w = np.multiply.outer(w, a)
    return w


def _grad_sq(u: np.ndarray, spacings, axes) -> np.ndarray:
    g2 = np.zeros(u.shape)
    for ax in axes:
        g = np.gradient(u, spacings[ax], axis=ax, edge_order=2)
        g2 += g * g
    return g2


def check_poincare(u: np.ndarray, eta: np.ndarray | None = None, lengths=None,
                   slack: float = CHECK_SLACK) -> RatioReport:
    """Weighted Poincare inequality on a box ``D = prod [0, L_a]``.

    ``||u - u_eta|| <= omega_n^{1-1/n} |D|^{1/n} d^n / int(eta) * ||grad u||``
    with ``u_eta`` the ``eta``-weighted mean and ``d`` the diameter of ``D``.
    ``u`` holds nodal values on a uniform grid including the box faces.
    """
    u = np.asarray(u, dtype=float)
    n = u.ndim
    lengths = (1.0,) * n if lengths is None else tuple(float(x) for x in lengths)
    if len(lengths) != n:
        raise UsageError("one length per axis is required")
    spac = [L / (m - 1) for L, m in zip(lengths, u.shape)]
    w = _trap_weights(u.shape, spac)
    eta = np.ones_like(u) if eta is None else np.asarray(eta, dtype=float)
    if eta.shape != u.shape:
        raise UsageError("eta must match u")
    if eta.min() < -1e-14 or eta.max() > 1 + 1e-14:
        raise UsageError("eta must satisfy 0 <= eta <= 1")
    mass = float(np.sum(w * eta))
    if mass <= 0:
        raise UsageError("the weight eta has zero integral")
    ubar = float(np.sum(w * eta * u)) / mass
    grad = math.sqrt(float(np.sum(w * _grad_sq(u, spac, range(n)))))
    # a vanishing discrete gradient means u is constant; skip the round-off
    lhs = math.sqrt(float(np.sum(w * (u - ubar) ** 2))) if grad > 0 else 0.0
    vol = float(np.prod(lengths))
    d = math.sqrt(sum(L * L for L in lengths))
    const = unit_ball_volume(n) ** (1 - 1 / n) * vol ** (1 / n) * d ** n / mass
    return RatioReport(lhs, const * grad, const, {"mean": ubar}, slack)


def poincare_parabolic_constant(n: int, theta: float, Lam: float, vol_D: float,
                                diam: float, dur: float) -> float:
    """Constant (not squared) of the parabolic Poincare inequality."""
    w = unit_ball_volume(n)
    a = 2 ** (2 * n) / theta ** 2 * (w / vol_D) ** (2 - 2 / n) * diam ** (2 * n)
    b = 2 ** (2 * n + 3) * Lam ** 2 * w ** (2 / n) * dur ** 2 / (theta ** (2 + 2 / n) * vol_D ** (2 / n))
    return math.sqrt(a + b)


def check_poincare_parabolic(u: np.ndarray, dt: float, h: float, theta: float, Lam: float,
                             branch: str = "ball", inside: np.ndarray | None = None,
                             slack: float = CHECK_SLACK) -> RatioReport:
    """Parabolic Poincare inequality on ``Q = (Omega cap D) x I``.

    ``u`` holds nodal values on ``I x D`` (time first) of a solution of the
    homogeneous equation. ``branch="exterior"`` is the case where at least a
    ``theta`` fraction of ``D`` lies outside ``Omega`` (``inside`` marks the
    nodes of ``Omega cap D``; ``u`` vanishes elsewhere) and uses ``c = 0``.
    ``branch="ball"`` is the interior-ball case and uses the minimising
    constant ``c = mean(u)``; the inequality claims existence of some ``c``,
    so the minimiser is the sharpest admissible choice.
    """
    u = np.asarray(u, dtype=float)
    n = u.ndim - 1
    spac = [dt] + [h] * n
    w = _trap_weights(u.shape, spac)
    dims = [(m - 1) * s for m, s in zip(u.shape, spac)]
    dur, sides = dims[0], dims[1:]
    vol = float(np.prod(sides))
    diam = math.sqrt(sum(s * s for s in sides))
    if branch == "exterior":
        if inside is None:
            raise UsageError("the exterior branch needs the inside mask")
        ws = _trap_weights(u.shape[1:], spac[1:])
        frac_out = float(np.sum(ws * ~inside)) / float(np.sum(ws))
        if frac_out < theta - 1e-12:
            raise UsageError("|D \\ Omega| < theta |D|: exterior branch does not apply")
        c = 0.0
    elif branch == "ball":
        c = float(np.sum(w * u)) / float(np.sum(w))
    else:
        raise UsageError("branch must be 'ball' or 'exterior'")
    lhs = math.sqrt(float(np.sum(w * (u - c) ** 2)))
    grad = math.sqrt(float(np.sum(w * _grad_sq(u, spac, range(1, n + 1)))))
    const = poincare_parabolic_constant(n, theta, Lam, vol, diam, dur)
    return RatioReport(lhs, const * grad, const, {"c": c, "branch": branch}, slack)


def caccioppoli_constant(lam: float, Lam: float, delta0: float, delta1: float) -> float:
    """``4 Lam^2 / (lam^2 delta0^2) + 2 / (lam delta1)``."""
    return 4 * Lam ** 2 / (lam ** 2 * delta0 ** 2) + 2 / (lam * delta1)


def _face_distance(K, D) -> float:
    """Distance from box ``K`` to the faces of ``D`` lying in the closed unit cube."""
    best = math.inf
    for (klo, khi), (dlo, dhi) in zip(K, D):
        if not (dlo <= klo and khi <= dhi):
            raise UsageError("K must lie inside D")
        if 0.0 <= dlo <= 1.0:
            best = min(best, klo - dlo)
        if 0.0 <= dhi <= 1.0:
            best = min(best, dhi - khi)
    return best


def check_caccioppoli(coeff, u: np.ndarray, grid, K, D, interval, delta0: float,
                      delta1: float, slack: float = CHECK_SLACK) -> RatioReport:
    """Caccioppoli inequality for a solution of the homogeneous equation.

    Parameters
    ----------
    coeff : CoefficientField
        Supplies ``lam`` and ``Lam``.
    u : ndarray
        Solution on the full grid (time first).
    K, D : sequence of (lo, hi)
        Spatial boxes, ``K`` inside ``D``; ``D`` may extend past the unit cube.
        The distance from ``K`` to the faces of ``D`` inside the closed cube
        must be at least ``delta0``.
    interval : (t0, t1)
        ``I``; the gradient side integrates over ``(t0 + delta1, t1)``.
    """
    t0, t1 = interval
    if not (0 < delta1 < t1 - t0):
        raise UsageError("need 0 < delta1 < t1 - t0")
    if not delta0 > 0:
        raise UsageError("delta0 must be positive")
    if _face_distance(K, D) < delta0 - 1e-12:
        raise UsageError("K is not separated from the boundary of D by delta0")
    n = grid.n
    spac = [grid.dt] + [grid.h] * n
    g2 = _grad_sq(np.asarray(u, dtype=float), spac, range(1, n + 1))

    def region(box, ta, tb):
        sl = [slice(*_closed(grid, ta / grid.T, tb / grid.T, "t"))]
        for lo, hi in box:
            sl.append(slice(*_closed(grid, max(lo, 0.0), min(hi, 1.0), "x")))
        sl = tuple(sl)
        return sl, _trap_weights([s.stop - s.start for s in sl], spac)

    sk, wk = region(K, t0 + delta1, t1)
    sq, wq = region(D, t0, t1)
    lhs = float(np.sum(wk * g2[sk]))
    unorm2 = float(np.sum(wq * np.asarray(u)[sq] ** 2))
    const = caccioppoli_constant(coeff.lam, coeff.Lam, delta0, delta1)
    return RatioReport(lhs, const * unorm2, const, {"grad_energy": lhs, "u_norm_sq": unorm2}, slack)


def _closed(grid, lo, hi, axis):
    a, b = grid.index_range(lo, hi, axis)
    return a, b + 1


# ---------------------------------------------------------------------------
# diagonal mass
# ---------------------------------------------------------------------------

def _axis_l1_heat(tau: np.ndarray) -> np.ndarray:
    """``int_0^1 int_0^1 g(x, y, tau) dx dy`` of the 1-D Dirichlet heat kernel."""
    tau = np.asarray(tau, dtype=float)
    out = np.empty(tau.shape)
    big = tau >= 0.02
    k = np.arange(1, 80, 2, dtype=float)
    out[big] = np.sum(8.0 / (k * np.pi) ** 2 * np.exp(-(k * np.pi) ** 2 * tau[big][..., None]), axis=-1)
    small = ~big
    if np.any(small):
        sig = np.sqrt(2.0 * tau[small])

        def seg(a, b, c, alpha, beta):
            # int_a^b (alpha + beta z) phi(z + c) dz for a centred normal phi
            lo, hi = (a + c) / sig, (b + c) / sig
            dens = lambda z: np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
            return ((alpha - beta * c) * (ndtr(hi) - ndtr(lo))
                    - beta * sig * (dens(hi) - dens(lo)))

        acc = np.zeros(sig.shape)
        for m in range(-2, 3):
            c = 2.0 * m
            acc += seg(-1.0, 0.0, c, 1.0, 1.0) + seg(0.0, 1.0, c, 1.0, -1.0)
            acc -= seg(0.0, 1.0, c, 0.0, 1.0) + seg(1.0, 2.0, c, 2.0, -1.0)
        out[small] = acc
    return out


def _axis_l2sq_heat(tau: np.ndarray) -> np.ndarray:
    """``int int g(x, y, tau)^2 dx dy = sum_k exp(-2 k^2 pi^2 tau)``.

    Small ``tau`` uses the Poisson-summed form
    ``(sqrt(pi / a) (1 + 2 sum_m exp(-m^2 / (2 tau))) - 1) / 2`` with
    ``a = 2 pi^2 tau``.
    """
    tau = np.asarray(tau, dtype=float)
    out = np.empty(tau.shape)
    big = tau >= 0.02
    k = np.arange(1, 16, dtype=float)
    out[big] = np.sum(np.exp(-2.0 * (k * np.pi) ** 2 * tau[big][..., None]), axis=-1)
    ts = tau[~big]
    m = np.arange(1, 4, dtype=float)
    theta = 1.0 + 2.0 * np.sum(np.exp(-m ** 2 / (2.0 * ts[..., None])), axis=-1)
    out[~big] = 0.5 * (np.sqrt(np.pi / (2 * np.pi ** 2 * ts)) * theta - 1.0)
    return out


@dataclass(frozen=True)
class DiagonalMass:
    mass: float
    predicted_exponent: float
    total: float

    @property
    def ratio(self) -> float:
        return self.mass / self.total


def _spatial_pmass(source, tau: np.ndarray, p: int) -> np.ndarray:
    """``int int |G(x, t, y, t - tau)|^p dx dy`` for a time-invariant kernel."""
    from .solver import DiscreteKernelTable, HeatSeriesOracle

    if isinstance(source, HeatSeriesOracle):
        f = _axis_l1_heat(tau) if p == 1 else _axis_l2sq_heat(tau)
        return f ** source.n
    if isinstance(source, DiscreteKernelTable):
        if not source.time_invariant:
            raise UsageError("the table route needs a time-invariant coefficient")
        g = source.grid
        wsp = (g.weights[0] / g.time_weights[0]).ravel()
        d = np.rint(np.asarray(tau) / g.dt).astype(int)
        out = np.zeros(d.shape)
        for i, di in np.ndenumerate(d):
            if 1 <= di <= g.nt:
                blk = np.abs(source.r1[1 + di]) ** p
                out[i] = wsp @ blk @ wsp
        return out
    raise UsageError("diagonal_mass needs a heat-series oracle or a kernel table")


def diagonal_mass(source, r_t: float, p: int = 1, T: float = 1.0,
                  n_quad: int = 400) -> DiagonalMass:
    """``||G||_{L^p}`` over the band ``|t - s| < r_t`` and over the whole domain.

    For a time-invariant kernel ``G = g(x, y, t - s)`` the band integral is
    ``int_0^{r_t} (T - tau) S_p(tau) dtau`` with ``S_p`` the spatial integral
    of ``|g|^p``. With the heat-series oracle ``S_p`` is evaluated in closed
    form and the ``tau`` integral by Gauss-Legendre after ``tau = r u^2``,
    which removes the ``tau^{-n(p-1)/2}`` singularity. With a kernel table
    the ``tau`` integral is a trapezoid sum over time levels, which only
    resolves bands of several time steps.
    """
    from .solver import DiscreteKernelTable

    if p not in (1, 2):
        raise UsageError("p must be 1 or 2")
    n = source.n if hasattr(source, "n") else source.grid.n
    if n * (p - 1) >= 2:
        raise UsageError("the diagonal estimate needs n (p - 1) < 2")
    if not (0 < r_t <= T):
        raise UsageError("need 0 < r_t <= T")
    expo = (1 - n * (p - 1) / 2) / p

    if isinstance(source, DiscreteKernelTable):
        g = source.grid
        T = g.T

        def band(r):
            m = int(np.floor(r / g.dt + 1e-9))
            if m < 1:
                return 0.0
            d = np.arange(0, m + 1)
            tau = d * g.dt
            S = _spatial_pmass(source, tau, p)
            if p == 1:
                S[0] = 1.0  # int int delta(x - y) over the cube interior
            else:
                S[0] = S[1]
            wts = np.full(m + 1, g.dt)
            wts[0] = wts[-1] = g.dt / 2
            return float(np.sum(wts * (T - tau) * S))
    else:
        xg, wg = np.polynomial.legendre.leggauss(n_quad)
        u = (xg + 1) / 2
        wu = wg / 2

        def band(r):
            tau = r * u * u
            S = _spatial_pmass(source, tau, p)
            return float(np.sum(wu * 2 * r * u * (T - tau) * S))

    mass = band(r_t) ** (1.0 / p)
    total = band(T) ** (1.0 / p)
    return DiagonalMass(mass, expo, total)


def loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


def fit_c_diag(source, r_values, p: int = 1, T: float = 1.0) -> float:
    """Fitted diagonal constant: ``max_r mass(r) / (r^expo ||G||)``."""
    best = 0.0
    for r in r_values:
        dm = diagonal_mass(source, float(r), p, T)
        best = max(best, dm.mass / (r ** dm.predicted_exponent * dm.total))
    return best


def nonadmissible_mass(tree, oracle, T: float = 1.0) -> tuple[float, float]:
    """Exact L1 mass of the kernel on non-admissible leaves and on the whole domain."""
    from .geometry import NON_ADMISSIBLE

    idx = np.nonzero(tree.status == NON_ADMISSIBLE)[0]
    mass = 0.0
    if idx.size:
        mass = float(np.sum(_leaf_integrals(tree, idx, oracle, T)))
    total = diagonal_mass(oracle, T, 1, T).total
    return mass, total


def _leaf_integrals(tree, idx, oracle, T):
    lev = tree.level[idx]
    side = 2.0 ** (-lev)
    dur = 4.0 ** (-lev) * T
    ix = tree.ix[idx]
    iy = tree.iy[idx]
    n = tree.n
    xlo = ix[:, :n] * side[:, None]
    ylo = iy[:, :n] * side[:, None]
    t0 = ix[:, n] * dur
    s0 = iy[:, n] * dur
    return oracle.box_integral(xlo, xlo + side[:, None], t0, t0 + dur,
                               ylo, ylo + side[:, None], s0, s0 + dur)


# ---------------------------------------------------------------------------
# fitted envelope and rank decay
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianEnvelope:
    """``G <= C tau^{-n/2} exp(-kappa |x - y|^2 / tau)`` (fitted constants)."""

    C: float
    kappa: float
    n: int

    def __call__(self, x, t, y, s):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        tau = np.asarray(t, float) - np.asarray(s, float)
        r2 = (x - y) ** 2 if self.n == 1 or x.ndim == 0 else np.sum((x - y) ** 2, axis=-1)
        safe = np.where(tau > 0, tau, 1.0)
        val = self.C * safe ** (-self.n / 2) * np.exp(-self.kappa * r2 / safe)
        return np.where(tau > 0, val, 0.0)


def fit_gaussian_envelope(r2: np.ndarray, tau: np.ndarray, values: np.ndarray, n: int,
                          floor: float = 1e-8) -> GaussianEnvelope:
    """Fit ``kappa`` by least squares in log space, then ``C`` as the supremum.

    Only entries with ``tau > 0`` and ``values > floor * max`` enter the fit;
    ``C`` is the smallest constant for which the envelope covers every such
    entry given the fitted ``kappa``.
    """
    r2, tau, values = (np.asarray(a, float).ravel() for a in (r2, tau, values))
    m = (tau > 0) & (values > floor * values.max())
    if m.sum() < 3:
        raise UsageError("not enough positive samples to fit the envelope")
    ylog = np.log(values[m] * tau[m] ** (n / 2))
    A = np.column_stack([np.ones(m.sum()), -r2[m] / tau[m]])
    coef, *_ = np.linalg.lstsq(A, ylog, rcond=None)
    kappa = max(float(coef[1]), 1e-12)
    C = float(np.max(values[m] * tau[m] ** (n / 2) * np.exp(kappa * r2[m] / tau[m])))
    return GaussianEnvelope(C, kappa, n)


def numerical_ranks(singular_values: np.ndarray, tols) -> np.ndarray:
    """Number of singular values above ``tol * sigma_1`` for each tolerance."""
    s = np.asarray(singular_values, float)
    if s.size == 0 or s[0] == 0:
        return np.zeros(len(tols), dtype=int)
    return np.array([int(np.sum(s > t * s[0])) for t in tols])


def fit_rank_polynomial(ranks, tols, degree: int = 4) -> tuple[np.ndarray, float]:
    """Polynomial fit of rank against ``log(1/tol)``; returns ``(coeffs, R^2)``."""
    x = np.log(1.0 / np.asarray(tols, float))
    y = np.asarray(ranks, float)
    deg = min(degree, len(x) - 1)
    coef = np.polyfit(x, y, deg)
    fit = np.polyval(coef, x)
    ss_res = float(np.sum((y - fit) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return coef, r2
