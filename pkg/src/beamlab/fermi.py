"""Fermi coordinates ``(tau, y)`` in a tube around a geodesic of ``g0``.

The chart is ``(tau, y) -> exp_{gamma(tau)}(y e(tau))`` with ``e`` the
parallel unit normal.  Its Jacobian is obtained from the variational
(Jacobi) equations integrated together with the normal geodesic, so the
pulled-back metric is available without numerical differentiation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.spatial import cKDTree

from .errors import ArgumentError, GeometryError, TubeTooWideError, UnsupportedGeometryError
from .geometry import GeodesicPath, TransversalManifold, geodesic_acceleration

NEWTON_TOL = 1e-10
NEWTON_MAXITER = 50
CURVATURE_DY = 1e-3


def _frame_rhs(metric, x, v, e):
    G = metric.christoffel(x)
    return v, -_quad(G, v, v), -_quad(G, v, e)


def _rk4_frame(metric, x, v, e, ds):
    k1 = _frame_rhs(metric, x, v, e)
    k2 = _frame_rhs(metric, *(a + 0.5 * ds * k for a, k in zip((x, v, e), k1)))
    k3 = _frame_rhs(metric, *(a + 0.5 * ds * k for a, k in zip((x, v, e), k2)))
    k4 = _frame_rhs(metric, *(a + ds * k for a, k in zip((x, v, e), k3)))
    return tuple(a + ds / 6.0 * (p + 2 * q + 2 * r + s) for a, p, q, r, s in zip((x, v, e), k1, k2, k3, k4))


def _quad(G, u, v):
    """``G^k_ij u^i v^j`` for arrays of Christoffel symbols."""
    u0, u1 = u[..., 0:1], u[..., 1:2]
    v0, v1 = v[..., 0:1], v[..., 1:2]
    return (G[..., 0, 0] * (u0 * v0) + G[..., 0, 1] * (u0 * v1)
            + G[..., 1, 0] * (u1 * v0) + G[..., 1, 1] * (u1 * v1))


def _geo_rhs(metric, x, v):
    return v, -_quad(metric.christoffel(x), v, v)


def _jacobi_rhs(metric, x, v, jx, jv):
    G = metric.christoffel(x)
    dG = metric.christoffel_grad(x)
    dGj = dG[..., 0] * jx[..., 0, None, None, None] + dG[..., 1] * jx[..., 1, None, None, None]
    return v, -_quad(G, v, v), jv, -_quad(dGj, v, v) - 2.0 * _quad(G, v, jv)


def normal_frame(m: TransversalManifold, x, v):
    """g0-unit vector g0-orthogonal to ``v`` with ``(v, e)`` positively oriented."""
    e = np.stack([-v[..., 1], v[..., 0]], axis=-1)
    e = e - (m.inner(x, e, v) / m.inner(x, v, v))[..., None] * v
    return e / m.norm(x, e)[..., None]


@dataclass
class FermiChart:
    manifold: TransversalManifold
    path: GeodesicPath
    half_width: float
    tau: np.ndarray        # uniform grid over [tau_min, tau_max], contains 0
    gx: np.ndarray
    gv: np.ndarray
    ge: np.ndarray
    n_sub_per_unit: float = 25.0

    def __post_init__(self):
        met = self.manifold.metric
        self.step = float(self.tau[1] - self.tau[0])
        self.i0 = int(round(-self.tau[0] / self.step))
        self.length = float(self.path.exit_time)
        gacc = geodesic_acceleration(met, self.gx, self.gv)
        edot = -_quad(met.christoffel(self.gx), self.gv, self.ge)
        self._sx = CubicHermiteSpline(self.tau, self.gx, self.gv, axis=0)
        self._sv = CubicHermiteSpline(self.tau, self.gv, gacc, axis=0)
        self._se = CubicHermiteSpline(self.tau, self.ge, edot, axis=0)
        self._tree = cKDTree(self.gx)

    @property
    def tau_min(self):
        return float(self.tau[0])

    @property
    def tau_max(self):
        return float(self.tau[-1])

    def gamma(self, tau):
        return self._sx(np.asarray(tau, dtype=float))

    def frame(self, tau):
        tau = np.asarray(tau, dtype=float)
        return self._sv(tau), self._se(tau)

    def _check_tau(self, tau):
        tau = np.asarray(tau, dtype=float)
        if np.any(tau < self.tau_min - 1e-12) or np.any(tau > self.tau_max + 1e-12):
            raise ArgumentError("tau outside the chart range")
        return tau

    def _shoot(self, tau, y, jacobian):
        tau = self._check_tau(tau)
        y = np.asarray(y, dtype=float)
        tau, y = np.broadcast_arrays(tau, y)
        met = self.manifold.metric
        x = self._sx(tau)
        gdot = self._sv(tau)
        v = self._se(tau)
        if jacobian:
            state = (x, v, gdot, -_quad(met.christoffel(x), gdot, v))
            rhs = _jacobi_rhs
        else:
            state = (x, v)
            rhs = _geo_rhs
        # substep count fixed per chart so the map does not depend on the batch
        ymax = max(self.half_width, float(np.max(np.abs(y))) if y.size else 0.0)
        n_sub = max(4, int(math.ceil(ymax * self.n_sub_per_unit)))
        ds = (y / n_sub)[..., None]
        for _ in range(n_sub):
            k1 = rhs(met, *state)
            k2 = rhs(met, *(a + 0.5 * ds * k for a, k in zip(state, k1)))
            k3 = rhs(met, *(a + 0.5 * ds * k for a, k in zip(state, k2)))
            k4 = rhs(met, *(a + ds * k for a, k in zip(state, k3)))
            state = tuple(a + ds / 6.0 * (p + 2 * q + 2 * r + s) for a, p, q, r, s in zip(state, k1, k2, k3, k4))
        return state

    def fermi_jacobian(self, tau, y):
        """Chart point and Jacobian ``[d/dtau, d/dy]`` (columns) at ``(tau, y)``."""
        x, v, jx, _ = self._shoot(tau, y, True)
        return x, np.stack([jx, v], axis=-1)

    def sweep(self, tau, dy: float, j_lo: int, j_hi: int):
        """Chart points and Jacobians on the grid ``tau x dy * [j_lo..j_hi]``.

        One RK4 march outward from ``y = 0`` per side with step ``dy``; every
        row is a dense output of the same normal-geodesic integration.
        """
        tau = self._check_tau(tau)
        if j_lo > 0 or j_hi < 0:
            raise ArgumentError("sweep range must contain y = 0")
        met = self.manifold.metric
        x0 = self._sx(tau)
        gdot = self._sv(tau)
        e = self._se(tau)
        start = (x0, e, gdot, -_quad(met.christoffel(x0), gdot, e))
        n = j_hi - j_lo + 1
        X = np.empty(tau.shape + (n, 2))
        J = np.empty(tau.shape + (n, 2, 2))
        for sign, count in ((1.0, j_hi), (-1.0, -j_lo)):
            state = start
            ds = sign * dy
            X[..., -j_lo, :] = state[0]
            J[..., -j_lo, :, :] = np.stack([state[2], state[1]], axis=-1)
            for i in range(1, count + 1):
                k1 = _jacobi_rhs(met, *state)
                k2 = _jacobi_rhs(met, *(a + 0.5 * ds * k for a, k in zip(state, k1)))
                k3 = _jacobi_rhs(met, *(a + 0.5 * ds * k for a, k in zip(state, k2)))
                k4 = _jacobi_rhs(met, *(a + ds * k for a, k in zip(state, k3)))
                state = tuple(a + ds / 6.0 * (p + 2 * q + 2 * r + s) for a, p, q, r, s in zip(state, k1, k2, k3, k4))
                col = -j_lo + int(sign) * i
                X[..., col, :] = state[0]
                J[..., col, :, :] = np.stack([state[2], state[1]], axis=-1)
        return X, J

    def from_fermi(self, tau, y):
        return self._shoot(tau, y, False)[0]

    def metric_fermi(self, tau, y):
        x, J = self.fermi_jacobian(tau, y)
        return np.einsum("...ai,...ab,...bj->...ij", J, self.manifold.metric(x), J)

    def to_fermi(self, x, strict=False):
        """Newton inversion of :meth:`from_fermi`.

        Points that do not converge (outside the tube or the tau range) get
        ``nan`` coordinates unless ``strict`` is set.
        """
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        pts = x.reshape(-1, 2)
        _, k = self._tree.query(pts)
        base = self.gx[k]
        d = pts - base
        tau = self.tau[k] + self.manifold.inner(base, self.gv[k], d)
        y = self.manifold.inner(base, self.ge[k], d)
        tau = np.clip(tau, self.tau_min, self.tau_max)
        done = np.zeros(len(pts), dtype=bool)
        for _ in range(NEWTON_MAXITER):
            act = ~done
            if not act.any():
                break
            p, J = self.fermi_jacobian(tau[act], y[act])
            r = pts[act] - p
            delta = np.linalg.solve(J, r[..., None])[..., 0]
            tau[act] = np.clip(tau[act] + delta[:, 0], self.tau_min, self.tau_max)
            y[act] = y[act] + delta[:, 1]
            done[act] = np.abs(delta).max(axis=1) < NEWTON_TOL
        if strict and not done.all():
            raise ArgumentError("to_fermi did not converge for some points")
        tau[~done] = np.nan
        y[~done] = np.nan
        return tau.reshape(shape), y.reshape(shape)

    def curvature(self, tau):
        """Gaussian curvature along the geodesic from ``-1/2 d_y^2 g_tautau``."""
        tau = self._check_tau(tau)
        dy = CURVATURE_DY
        g = np.stack([self.metric_fermi(tau, s)[..., 0, 0] for s in (-dy, 0.0, dy)])
        return -0.5 * (g[0] - 2 * g[1] + g[2]) / dy**2

    def to_csv(self, path, n=None):
        taus = self.tau if n is None else np.linspace(self.tau_min, self.tau_max, n)
        K = self.curvature(taus)
        _, e = self.frame(taus)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "K", "e1", "e2"])
            for row in zip(taus, K, e[:, 0], e[:, 1]):
                w.writerow([f"{v:.17g}" for v in row])


def riccati_driver(chart: FermiChart, tau):
    """``F(tau) = -K(gamma(tau))`` as an array of 1x1 symmetric matrices."""
    K = chart.curvature(tau)
    return (-K)[..., None, None]


def _check_self_intersection(m, path, half_width):
    x = path.x
    tau = path.tau
    scale = np.sqrt(np.trace(m.metric(x), axis1=-2, axis2=-1) / 2.0)
    d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1) * scale[:, None]
    gap = np.abs(tau[:, None] - tau[None, :])
    if np.any((d < half_width / 2) & (gap > 4 * half_width)):
        raise UnsupportedGeometryError("geodesic self-intersects; quasimode gluing is not supported")


def build_fermi_chart(m: TransversalManifold, path: GeodesicPath, half_width: float,
                      step: float | None = None, extension: float | None = None,
                      check_samples: tuple[int, int] = (33, 9)) -> FermiChart:
    """Fermi chart valid on ``[-ext, L + ext] x (-half_width, half_width)``.

    The geodesic and its parallel normal are re-integrated on a uniform grid
    containing ``tau = 0``; ``ext`` defaults to ``half_width`` so that tube
    points of M0 near the endpoints are covered.
    """
    if path.trapped:
        raise ArgumentError("cannot build a Fermi chart on a trapped geodesic")
    if path.tangency != "non_tangential":
        raise ArgumentError(f"Fermi charts need a non-tangential geodesic (got {path.tangency})")
    if not half_width > 0:
        raise ArgumentError("half_width must be positive")
    _check_self_intersection(m, path, half_width)
    if step is None:
        step = float(path.tau[1] - path.tau[0]) if len(path.tau) > 2 else path.exit_time / 8
    ext = half_width if extension is None else float(extension)
    m0 = int(math.ceil(ext / step))
    n1 = int(math.ceil((path.exit_time + ext) / step))
    x0, v0 = path.x[0], path.v[0]
    e0 = normal_frame(m, x0, v0)

    def integrate(nsteps, ds):
        xs, vs, es = [x0], [v0], [e0]
        x, v, e = x0, v0, e0
        for _ in range(nsteps):
            x, v, e = _rk4_frame(m.metric, x, v, e, ds)
            # project back onto unit speed and an orthonormal frame
            v = v / m.norm(x, v)
            e = e - m.inner(x, e, v) * v
            e = e / m.norm(x, e)
            xs.append(x)
            vs.append(v)
            es.append(e)
        return np.array(xs), np.array(vs), np.array(es)

    with np.errstate(all="ignore"):
        fx, fv, fe = integrate(n1, step)
        bx, bv, be = integrate(m0, -step)
    if not all(np.all(np.isfinite(a)) for a in (fx, fv, fe, bx, bv, be)):
        raise GeometryError("geodesic extension diverges; reduce the chart extension")
    gx = np.vstack([bx[:0:-1], fx])
    gv = np.vstack([bv[:0:-1], fv])
    ge = np.vstack([be[:0:-1], fe])
    m.check_points(gx)
    tau = step * np.arange(-m0, n1 + 1)
    chart = FermiChart(m, path, float(half_width), tau, gx, gv, ge)
    _check_injective(chart, *check_samples)
    return chart


def _check_injective(chart: FermiChart, n_tau: int, n_y: int):
    taus = np.linspace(chart.tau_min, chart.tau_max, n_tau)
    ys = np.linspace(-chart.half_width, chart.half_width, n_y)
    T, Y = np.meshgrid(taus, ys, indexing="ij")
    try:
        with np.errstate(all="ignore"):
            x, J = chart.fermi_jacobian(T, Y)
            det = np.linalg.det(J)
        chart.manifold.check_points(x)
    except Exception as exc:  # metric chart left or integration failure
        raise TubeTooWideError(f"tube of half width {chart.half_width} leaves the metric chart") from exc
    if not np.all(np.isfinite(x)) or np.any(~(det > 0)):
        raise TubeTooWideError("Fermi map degenerates inside the tube (focal point)")
    inner = np.abs(Y) < chart.half_width
    t2, y2 = chart.to_fermi(x[inner])
    err = np.nanmax(np.abs(np.stack([t2 - T[inner], y2 - Y[inner]])), initial=0.0)
    if np.any(np.isnan(t2)) or err > 1e-6:
        raise TubeTooWideError("Fermi map is not injective on the sampled tube")
