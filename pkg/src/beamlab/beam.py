"""Gaussian beam quasimodes concentrating on a geodesic of ``g0``.

The quasimode is ``v_s = exp(i s Theta) h^(-1/4) b0(tau) chi(y / delta)`` in
Fermi coordinates, with ``Theta = a (tau + H y^2 / 2)``, ``a = sqrt(1 - beta^2)``,
``H`` solving the Riccati equation ``H' + H^2 = F`` and ``b0`` the transport
amplitude ``b0 = N exp(-1/2 int tr H)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicHermiteSpline, CubicSpline

from .errors import ArgumentError, ResolutionError, RiccatiBlowupError
from .fermi import FermiChart, riccati_driver

BETA_MIN = 1.0 / math.sqrt(3.0)
MIN_POINTS_PER_WIDTH = 8


@dataclass(frozen=True)
class BeamParams:
    h: float
    lam: float = 0.0
    beta: float = 0.8
    delta: float = 0.3
    H0: complex = 1j
    tau0: float = 0.0
    construction_only: bool = False

    def __post_init__(self):
        if not 0.0 < self.h < 1.0:
            raise ArgumentError(f"h must lie in (0, 1), got {self.h}")
        lo = 0.0 if self.construction_only else BETA_MIN
        if not lo < self.beta < 1.0:
            raise ArgumentError(f"beta must lie in ({lo:.6g}, 1), got {self.beta}")
        if not self.delta > 0:
            raise ArgumentError("cutoff scale delta must be positive")
        if not np.imag(self.H0) > 0:
            raise ArgumentError("Im H0 must be positive")

    @property
    def s(self) -> complex:
        return 1.0 / self.h + 1j * self.lam

    @property
    def a(self) -> float:
        return math.sqrt(1.0 - self.beta**2)


def cutoff(u):
    """Smooth bump: 1 on ``|u| <= 1/4``, 0 on ``|u| >= 1/2``."""
    t = np.clip(4.0 * np.abs(np.asarray(u, dtype=float)) - 1.0, 0.0, 1.0)

    def psi(z):
        out = np.zeros_like(z)
        pos = z > 0
        out[pos] = np.exp(-1.0 / z[pos])
        return out

    p, q = psi(1.0 - t), psi(t)
    return p / (p + q)


# ---------------------------------------------------------------------------
# Riccati equation and transport
# ---------------------------------------------------------------------------


def _as_matrix(H0):
    H0 = np.asarray(H0, dtype=complex)
    if H0.ndim == 0:
        H0 = H0.reshape(1, 1)
    if H0.shape != (1, 1):
        raise ArgumentError("H0 must be a scalar or a 1x1 matrix for two dimensional M0")
    return H0


def _min_eig_imag(H):
    im = H.imag
    return float(np.linalg.eigvalsh(0.5 * (im + np.swapaxes(im, -1, -2))).min())


@dataclass
class RiccatiSolution:
    grid: np.ndarray
    H: np.ndarray               # (n, 1, 1) complex
    trace_integral: np.ndarray  # int_{tau0}^{tau} tr H
    F: np.ndarray               # driver at the grid nodes
    tau0: float = 0.0

    def __post_init__(self):
        dH = self.F - self.H @ self.H
        self._sH = CubicHermiteSpline(self.grid, self.H, dH, axis=0)
        trH = np.trace(self.H, axis1=-2, axis2=-1)
        self._sI = CubicHermiteSpline(self.grid, self.trace_integral, trH)

    @property
    def min_imag_eig(self) -> float:
        return _min_eig_imag(self.H)

    def _check(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < self.grid[0] - 1e-12) or np.any(tau > self.grid[-1] + 1e-12):
            raise ArgumentError("tau outside the Riccati grid")
        return tau

    def H_at(self, tau):
        return self._sH(self._check(tau))

    def scalar(self, tau=None):
        """``H`` as a complex scalar (two dimensional M0)."""
        if tau is None:
            return self.H[:, 0, 0]
        return self.H_at(tau)[..., 0, 0]

    def integral_at(self, tau):
        return self._sI(self._check(tau))


def solve_riccati(chart: FermiChart | None, H0, grid, tau0: float = 0.0, driver=None) -> RiccatiSolution:
    """Classical RK4 for ``H' = F - H^2`` on a uniform ``grid`` containing ``tau0``.

    ``F`` comes from the chart curvature unless ``driver`` (a vectorised
    callable returning ``(..., 1, 1)`` arrays) is supplied.  The trace
    integral is carried as an extra RK4 component.
    """
    H0 = _as_matrix(H0)
    if _min_eig_imag(H0) <= 0:
        raise ArgumentError("Im H0 must be positive definite")
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 2:
        raise ArgumentError("Riccati grid needs at least two points")
    ds = np.diff(grid)
    step = float(ds.mean())
    if np.max(np.abs(ds - step)) > 1e-9 * max(1.0, abs(step)):
        raise ArgumentError("Riccati grid must be uniform")
    i0 = int(round((tau0 - grid[0]) / step))
    if not 0 <= i0 < len(grid) or abs(grid[i0] - tau0) > 1e-9:
        raise ArgumentError("tau0 must be a node of the Riccati grid")
    if driver is None:
        if chart is None:
            raise ArgumentError("either a chart or a driver is required")
        driver = lambda t: riccati_driver(chart, t)  # noqa: E731
    n = len(grid)
    half = np.concatenate([grid, 0.5 * (grid[1:] + grid[:-1])])
    Fall = np.asarray(driver(half), dtype=complex).reshape(len(half), 1, 1)
    Fn, Fm = Fall[:n], Fall[n:]

    H = np.empty((n, 1, 1), dtype=complex)
    I = np.empty(n, dtype=complex)
    H[i0] = H0
    I[i0] = 0.0

    def rhs(Hc, Fc):
        return Fc - Hc @ Hc, np.trace(Hc)

    def advance(k, kn, sign):
        h = sign * step
        mid = min(k, kn)
        F0, F1, Fh = Fn[k], Fn[kn], Fm[mid]
        Hc = H[k]
        k1, j1 = rhs(Hc, F0)
        k2, j2 = rhs(Hc + 0.5 * h * k1, Fh)
        k3, j3 = rhs(Hc + 0.5 * h * k2, Fh)
        k4, j4 = rhs(Hc + h * k3, F1)
        H[kn] = Hc + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        H[kn] = 0.5 * (H[kn] + H[kn].T)
        I[kn] = I[k] + h / 6.0 * (j1 + 2 * j2 + 2 * j3 + j4)
        lam_min = _min_eig_imag(H[kn])
        if not np.isfinite(lam_min) or lam_min <= 0:
            raise RiccatiBlowupError(float(grid[kn]), lam_min)

    for k in range(i0, n - 1):
        advance(k, k + 1, 1.0)
    for k in range(i0, 0, -1):
        advance(k, k - 1, -1.0)
    return RiccatiSolution(grid, H, I, Fn, float(tau0))


def phase_theta(H: RiccatiSolution, params: BeamParams, tau, y):
    """``Theta = sqrt(1 - beta^2) (tau + H(tau) y^2 / 2)``."""
    tau = np.asarray(tau, dtype=float)
    return params.a * (tau + 0.5 * H.scalar(tau) * np.asarray(y, dtype=float) ** 2)


def solve_transport(H: RiccatiSolution, normalization: float = 1.0):
    """``b0 = normalization * exp(-1/2 int tr H)`` on the Riccati grid."""
    return normalization * np.exp(-0.5 * H.trace_integral)


def fiber_normalization(H: RiccatiSolution, params: BeamParams, tau: float = 0.0) -> float:
    """Real constant making ``int h^(-1/2) |b0(tau)|^2 exp(-2 Im Theta / h) dy = 1``."""
    Hm = H.H_at(tau)
    im = 0.5 * (Hm.imag + Hm.imag.T)
    scale = abs(np.exp(0.5 * H.integral_at(tau)))
    return float((np.linalg.det(params.a * im / math.pi)) ** 0.25 * scale)


# ---------------------------------------------------------------------------
# Quasimode
# ---------------------------------------------------------------------------


@dataclass
class Quasimode:
    chart: FermiChart
    params: BeamParams
    riccati: RiccatiSolution
    b0: np.ndarray
    normalization: float

    def __post_init__(self):
        self.d = 0.5 * self.params.a * self.riccati.min_imag_eig

    def theta(self, tau, y):
        return phase_theta(self.riccati, self.params, tau, y)

    def b0_at(self, tau):
        return self.normalization * np.exp(-0.5 * self.riccati.integral_at(tau))

    def amplitude(self, tau, y):
        p = self.params
        return p.h ** -0.25 * self.b0_at(tau) * cutoff(np.asarray(y) / p.delta)

    def values_fermi(self, tau, y):
        s = self.params.s
        return np.exp(1j * s * self.theta(tau, y)) * self.amplitude(tau, y)

    def modulus_sq_fermi(self, tau, y):
        """``|v_s|^2`` evaluated without forming the oscillatory factor."""
        p = self.params
        th = self.theta(tau, y)
        dec = -2.0 * (th.imag / p.h + p.lam * th.real)
        amp = self.amplitude(tau, y)
        return np.exp(dec) * np.abs(amp) ** 2

    def values(self, x):
        """``v_s`` at chart points; 0 outside the tube and the chart's tau range."""
        x = np.asarray(x, dtype=float)
        tau, y = self.chart.to_fermi(x)
        ok = np.isfinite(tau) & (np.abs(y) < 0.5 * self.params.delta)
        out = np.zeros(tau.shape, dtype=complex)
        out[ok] = self.values_fermi(tau[ok], y[ok])
        return out

    def to_csv(self, path, n_y: int = 41):
        ys = np.linspace(-0.5 * self.params.delta, 0.5 * self.params.delta, n_y)
        T, Y = np.meshgrid(self.riccati.grid, ys, indexing="ij")
        v = self.values_fermi(T, Y)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "y", "re", "im"])
            for row in zip(T.ravel(), Y.ravel(), v.real.ravel(), v.imag.ravel()):
                w.writerow([f"{val:.17g}" for val in row])


def assemble_quasimode(chart: FermiChart, params: BeamParams) -> Quasimode:
    grid = chart.tau
    ric = solve_riccati(chart, params.H0, grid, tau0=params.tau0)
    N = fiber_normalization(ric, params, tau=0.0)
    b0 = solve_transport(ric, N)
    return Quasimode(chart, params, ric, b0, N)


# ---------------------------------------------------------------------------
# Tube quadrature grid
# ---------------------------------------------------------------------------


def _d1(u, step, axis):
    """Fourth-order central first difference; two edge nodes become nan."""
    u = np.moveaxis(u, axis, 0)
    out = np.full(u.shape, np.nan, dtype=np.result_type(u, float))
    out[2:-2] = (-u[4:] + 8.0 * u[3:-1] - 8.0 * u[1:-3] + u[:-4]) / (12.0 * step)
    return np.moveaxis(out, 0, axis)


@dataclass
class TubeGrid:
    """Uniform ``(tau, y)`` grid over the part of M0 covered by a Fermi chart.

    ``intervals`` lists, per row, the tau intervals where ``rho > 0``; they
    drive the quadrature over M0 so that the boundary is resolved below the
    grid spacing.
    """

    chart: FermiChart
    tau: np.ndarray
    y: np.ndarray
    X: np.ndarray
    G: np.ndarray
    intervals: list = field(default_factory=list)

    @property
    def shape(self):
        return len(self.tau), len(self.y)

    @property
    def sqrt_det(self):
        return np.sqrt(np.linalg.det(self.G))

    @property
    def dtau(self):
        return float(self.tau[1] - self.tau[0])

    @property
    def dy(self):
        return float(self.y[1] - self.y[0])

    def integrate(self, values, margin: int = 4):
        """``int_{M0} values dV_g0`` for node ``values`` of shape ``(n_tau, n_y)``.

        Rows are integrated exactly over their M0 intervals with a cubic
        spline in tau, then combined with the trapezoid rule in y.
        """
        vals = np.asarray(values) * self.sqrt_det
        t = self.tau[margin: len(self.tau) - margin]
        sub = vals[margin: len(self.tau) - margin]
        rows = [j for j, iv in enumerate(self.intervals) if iv]
        out = np.zeros(len(self.y), dtype=vals.dtype)
        if not rows:
            return 0.0
        sub = sub[:, rows]
        if not np.all(np.isfinite(sub)):
            raise ResolutionError("integrand undefined inside M0; enlarge the chart tau range or tube")
        anti = CubicSpline(t, sub, axis=0).antiderivative()
        for col, j in enumerate(rows):
            for lo, hi in self.intervals[j]:
                if lo < t[0] or hi > t[-1]:
                    raise ResolutionError("M0 extends beyond the chart tau range")
                out[j] += anti(hi)[col] - anti(lo)[col]
        return np.trapezoid(out, self.y)


def _refine_roots(tau, rho, k, j, iters=60):
    """Roots of ``rho(., y_j)`` in ``[tau_k, tau_k+1]`` from the local cubic
    through the four surrounding nodes."""
    n = len(tau)
    k0 = np.clip(k - 1, 0, n - 4)
    nodes = tau[k0[:, None] + np.arange(4)]
    vals = rho[k0[:, None] + np.arange(4), j[:, None]]

    def poly(t):
        out = np.zeros_like(t)
        for a in range(4):
            w = np.ones_like(t)
            for b in range(4):
                if b != a:
                    w = w * (t - nodes[:, b]) / (nodes[:, a] - nodes[:, b])
            out = out + w * vals[:, a]
        return out

    lo, hi = tau[k].copy(), tau[k + 1].copy()
    flo = poly(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = poly(mid)
        left = np.sign(fm) == np.sign(flo)
        lo = np.where(left, mid, lo)
        flo = np.where(left, fm, flo)
        hi = np.where(left, hi, mid)
    return 0.5 * (lo + hi)


def tube_grid(chart: FermiChart, dy: float, y_limit: float, pad: int = 4) -> TubeGrid:
    """Tube grid with spacing ``dy`` over ``|y| <= y_limit`` (trimmed to M0)."""
    m = chart.manifold
    # coarse scan to bound the y extent of M0 inside the tube
    step_c = 0.02
    nc = int(math.ceil(y_limit / step_c))
    Xc, _ = chart.sweep(chart.tau[::4], step_c, -nc, nc)
    ys_c = step_c * np.arange(-nc, nc + 1)
    inside = np.any(m.rho(Xc) > 0, axis=0) & (np.abs(ys_c) <= y_limit + step_c)
    if not inside.any():
        raise ArgumentError("tube does not meet M0")
    idx = np.nonzero(inside)[0]
    y_lo = max(-y_limit, ys_c[idx[0]] - step_c)
    y_hi = min(y_limit, ys_c[idx[-1]] + step_c)
    j_lo = min(0, int(math.floor(y_lo / dy)) - pad)
    j_hi = max(0, int(math.ceil(y_hi / dy)) + pad)
    y = dy * np.arange(j_lo, j_hi + 1)
    X, J = chart.sweep(chart.tau, dy, j_lo, j_hi)
    G = np.einsum("...ai,...ab,...bj->...ij", J, m.metric(X), J)
    rho = m.rho(X)
    # M0 intervals per row
    intervals = [[] for _ in y]
    valid_rows = (np.abs(y) <= y_limit) & (y >= y_lo) & (y <= y_hi)
    k, j = np.nonzero((np.sign(rho[:-1]) != np.sign(rho[1:])) & valid_rows[None, :])
    if len(k):
        roots = _refine_roots(chart.tau, rho, k, j)
        entering = rho[k + 1, j] > rho[k, j]
        order = np.lexsort((roots, j))
        for jj in np.unique(j):
            sel = order[j[order] == jj]
            start = None
            for r, ent in zip(roots[sel], entering[sel]):
                if ent:
                    start = r
                elif start is not None:
                    intervals[jj].append((float(start), float(r)))
                    start = None
                else:
                    raise ResolutionError("M0 reaches the chart tau range; extend the chart")
            if start is not None:
                raise ResolutionError("M0 reaches the chart tau range; extend the chart")
    full = np.all(rho > 0, axis=0) & valid_rows
    if full.any():
        raise ResolutionError("M0 reaches the chart tau range; extend the chart")
    return TubeGrid(chart, chart.tau.copy(), y, X, G, intervals)


# ---------------------------------------------------------------------------
# Residual of the conjugated operator
# ---------------------------------------------------------------------------


def _laplacian(u, tg: TubeGrid, Ginv, sqrtG):
    du_t = _d1(u, tg.dtau, 0)
    du_y = _d1(u, tg.dy, 1)
    flux_t = sqrtG * (Ginv[..., 0, 0] * du_t + Ginv[..., 0, 1] * du_y)
    flux_y = sqrtG * (Ginv[..., 1, 0] * du_t + Ginv[..., 1, 1] * du_y)
    return (_d1(flux_t, tg.dtau, 0) + _d1(flux_y, tg.dy, 1)) / sqrtG


def _gram(Ginv, tg, u, v):
    ut, uy = _d1(u, tg.dtau, 0), _d1(u, tg.dy, 1)
    vt, vy = _d1(v, tg.dtau, 0), _d1(v, tg.dy, 1)
    return Ginv[..., 0, 0] * ut * vt + Ginv[..., 0, 1] * (ut * vy + uy * vt) + Ginv[..., 1, 1] * uy * vy


def residual_terms(q, mode: Quasimode, adjoint: bool = True, dy: float | None = None,
                   tg: TubeGrid | None = None):
    """Node values of the bracket terms of the conjugated operator.

    Returns ``(tg, eikonal, transport, zeroth, weight)`` where the bracket is
    ``s^2 eikonal + s transport + zeroth`` and ``weight = |h^2 exp(i s Theta)|^2``.
    """
    p = mode.params
    if dy is None:
        dy = math.sqrt(p.h) / 12.0
    if dy > math.sqrt(p.h) / MIN_POINTS_PER_WIDTH:
        raise ResolutionError(
            f"dy={dy:.3g} gives fewer than {MIN_POINTS_PER_WIDTH} points across the beam width sqrt(h)")
    if tg is None:
        tg = tube_grid(mode.chart, dy, min(0.5 * p.delta, mode.chart.half_width))
    T, Y = np.meshgrid(tg.tau, tg.y, indexing="ij")
    Ginv = np.linalg.inv(tg.G)
    sqrtG = tg.sqrt_det
    H = mode.riccati.scalar()[:, None]
    theta = p.a * (T + 0.5 * H * Y**2)
    b = p.h ** -0.25 * mode.b0[:, None] * cutoff(Y / p.delta)
    eik = (_gram(Ginv, tg, theta, theta) - p.a**2) * b
    transport = -2j * _gram(Ginv, tg, theta, b) - 1j * _laplacian(theta, tg, Ginv, sqrtG) * b
    qv = np.zeros(T.shape) if q is None else np.asarray(q(tg.X), dtype=complex)
    if adjoint:
        qv = np.conj(qv)
    zeroth = -_laplacian(b, tg, Ginv, sqrtG) + qv * b
    s = p.s
    weight = p.h**4 * np.exp(-2.0 * (s * theta).imag)
    return tg, eik, transport, zeroth, weight


def residual_norm(q, mode: Quasimode, adjoint: bool = True, dy: float | None = None,
                  euclidean_measure: float = 1.0, tg: TubeGrid | None = None) -> float:
    """L2 norm over M0 (times the (t, x1) measure) of the conjugated residual."""
    tg, eik, tr, zo, w = residual_terms(q, mode, adjoint=adjoint, dy=dy, tg=tg)
    s = mode.params.s
    bracket = s**2 * eik + s * tr + zo
    val = tg.integrate(np.abs(bracket) ** 2 * w)
    return math.sqrt(euclidean_measure * max(float(np.real(val)), 0.0))


def quasimode_norm(mode: Quasimode, dy: float | None = None, tg: TubeGrid | None = None) -> float:
    """``||v_s||_{L2(M0)}`` by tube quadrature."""
    p = mode.params
    if tg is None:
        tg = tube_grid(mode.chart, math.sqrt(p.h) / 12.0 if dy is None else dy,
                       min(0.5 * p.delta, mode.chart.half_width))
    T, Y = np.meshgrid(tg.tau, tg.y, indexing="ij")
    return math.sqrt(float(np.real(tg.integrate(mode.modulus_sq_fermi(T, Y)))))
