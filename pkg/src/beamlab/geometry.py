"""Transversal manifolds (M0, g0): metrics, boundaries and geodesic tracing.

All bundled geometries are two dimensional charts with boundary given
implicitly by a function ``rho`` (interior ``rho > 0``).  Geodesics are
integrated with a fixed-step classical Runge-Kutta scheme, vectorised over
rays, and the boundary exit is localised by bisection on the final step.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline, RectBivariateSpline

from .errors import ArgumentError, ClassificationError, DomainError, GeometryError

METRIC_KINDS = ("euclidean-disk", "hyperbolic-disk", "radial-herglotz", "custom-grid")
TANGENCY_TAGS = ("non_tangential", "tangential_entry", "tangential_exit", "trapped")
DEFAULT_TANGENCY_EPS = 1e-3

_EYE2 = np.eye(2)


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------


class Disk:
    """Closed disk; ``rho`` is normalised so that ``|grad rho| = 1`` on the rim."""

    kind = "disk"

    def __init__(self, center=(0.0, 0.0), radius=1.0):
        if radius <= 0:
            raise ArgumentError("disk radius must be positive")
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)

    def rho(self, x):
        d = np.asarray(x) - self.center
        return (self.radius**2 - np.sum(d * d, axis=-1)) / (2.0 * self.radius)

    def grad_rho(self, x):
        return -(np.asarray(x) - self.center) / self.radius

    def boundary_point(self, s):
        ang = 2.0 * np.pi * np.asarray(s, dtype=float)
        return self.center + self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    @property
    def bbox(self):
        return self.center - self.radius, self.center + self.radius

    def to_spec(self):
        return {"type": "disk", "center": self.center.tolist(), "radius": self.radius}


class Rectangle:
    """Axis-aligned rectangle.  ``rho`` is the distance to the nearest side;
    it is not differentiable at the four corners, which the fan avoids."""

    kind = "rectangle"

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        if np.any(self.hi <= self.lo):
            raise ArgumentError("rectangle needs hi > lo componentwise")

    def _sides(self, x):
        x = np.asarray(x)
        return np.stack(
            [x[..., 0] - self.lo[0], self.hi[0] - x[..., 0], x[..., 1] - self.lo[1], self.hi[1] - x[..., 1]],
            axis=-1,
        )

    def rho(self, x):
        return np.min(self._sides(x), axis=-1)

    def grad_rho(self, x):
        normals = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        return normals[np.argmin(self._sides(x), axis=-1)]

    def boundary_point(self, s):
        # perimeter parametrisation, counter-clockwise from the lower-left corner
        w, h = self.hi - self.lo
        per = 2 * (w + h)
        d = (np.asarray(s, dtype=float) % 1.0) * per
        out = np.empty(d.shape + (2,))
        for i, di in np.ndenumerate(d):
            if di < w:
                p = (self.lo[0] + di, self.lo[1])
            elif di < w + h:
                p = (self.hi[0], self.lo[1] + di - w)
            elif di < 2 * w + h:
                p = (self.hi[0] - (di - w - h), self.hi[1])
            else:
                p = (self.lo[0], self.hi[1] - (di - 2 * w - h))
            out[i] = p
        return out

    @property
    def bbox(self):
        return self.lo.copy(), self.hi.copy()

    def to_spec(self):
        return {"type": "rectangle", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


def domain_from_spec(spec: dict):
    kind = spec.get("type")
    if kind == "disk":
        return Disk(spec.get("center", (0.0, 0.0)), spec.get("radius", 1.0))
    if kind == "rectangle":
        return Rectangle(spec["lo"], spec["hi"])
    raise ArgumentError(f"unknown domain type {kind!r}")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


class Metric:
    """Riemannian metric on a planar chart.

    Subclasses provide ``__call__`` (the 2x2 matrix field), ``christoffel``
    (``G[..., k, i, j]``) and ``christoffel_grad`` (``dG[..., k, i, j, l]``,
    derivative in ``x_l``).  Arrays broadcast over leading axes.
    """

    def in_chart(self, x):
        return np.ones(np.shape(x)[:-1], dtype=bool)

    def curvature(self, x):
        """Gaussian curvature from the Christoffel symbols and their gradient."""
        g = self(x)
        G = self.christoffel(x)
        dG = self.christoffel_grad(x)
        # R^k_{l i j} = d_i G^k_{jl} - d_j G^k_{il} + G^k_{im} G^m_{jl} - G^k_{jm} G^m_{il}
        # with (l, i, j) = (2, 1, 2) in 1-based indices
        r = (
            dG[..., :, 1, 1, 0]
            - dG[..., :, 0, 1, 1]
            + np.einsum("...km,...m->...k", G[..., :, 0, :], G[..., :, 1, 1])
            - np.einsum("...km,...m->...k", G[..., :, 1, :], G[..., :, 0, 1])
        )
        r1212 = np.einsum("...k,...k->...", g[..., 0, :], r)
        return r1212 / np.linalg.det(g)


class ConformalMetric(Metric):
    """``g = exp(2 phi) I`` with analytic derivatives of ``phi``."""

    def __init__(self, phi, grad_phi, hess_phi, chart=None):
        self._phi = phi
        self._grad = grad_phi
        self._hess = hess_phi
        self._chart = chart

    def in_chart(self, x):
        if self._chart is None:
            return super().in_chart(x)
        return self._chart(np.asarray(x))

    def conformal_exponent(self, x):
        return self._phi(np.asarray(x, dtype=float))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.exp(2.0 * self._phi(x))[..., None, None] * _EYE2

    def christoffel(self, x):
        p = self._grad(np.asarray(x, dtype=float))
        # G^k_ij = d_ik p_j + d_jk p_i - d_ij p_k
        return (
            np.einsum("ik,...j->...kij", _EYE2, p)
            + np.einsum("jk,...i->...kij", _EYE2, p)
            - np.einsum("ij,...k->...kij", _EYE2, p)
        )

    def christoffel_grad(self, x):
        H = self._hess(np.asarray(x, dtype=float))
        return (
            np.einsum("ik,...jl->...kijl", _EYE2, H)
            + np.einsum("jk,...il->...kijl", _EYE2, H)
            - np.einsum("ij,...kl->...kijl", _EYE2, H)
        )

    def curvature(self, x):
        x = np.asarray(x, dtype=float)
        H = self._hess(x)
        return -np.exp(-2.0 * self._phi(x)) * (H[..., 0, 0] + H[..., 1, 1])


def euclidean_metric():
    return ConformalMetric(
        lambda x: np.zeros(x.shape[:-1]),
        lambda x: np.zeros(x.shape),
        lambda x: np.zeros(x.shape[:-1] + (2, 2)),
    )


def hyperbolic_metric():
    """Poincare disk, ``g = 4 (1 - |x|^2)^-2 I``, curvature -1 on ``|x| < 1``."""

    def phi(x):
        return math.log(2.0) - np.log1p(-np.sum(x * x, axis=-1))

    def grad(x):
        w = 1.0 - np.sum(x * x, axis=-1)
        return 2.0 * x / w[..., None]

    def hess(x):
        w = 1.0 - np.sum(x * x, axis=-1)
        return 2.0 * _EYE2 / w[..., None, None] + 4.0 * np.einsum("...i,...j->...ij", x, x) / (w * w)[..., None, None]

    return ConformalMetric(phi, grad, hess, chart=lambda x: np.sum(x * x, axis=-1) < 1.0)


def herglotz_metric(strength=0.5):
    """Radial metric ``g = exp(-a |x|^2) I``.

    The wave speed ``exp(a r^2 / 2)`` satisfies the Herglotz condition
    ``d/dr (r / c(r)) > 0`` as long as ``a r^2 < 1``.
    """
    a = float(strength)
    return ConformalMetric(
        lambda x: -0.5 * a * np.sum(x * x, axis=-1),
        lambda x: -a * x,
        lambda x: np.broadcast_to(-a * _EYE2, x.shape[:-1] + (2, 2)).copy(),
    )


class GridMetric(Metric):
    """Metric sampled on a rectangular grid, bicubic spline interpolation.

    First derivatives come from the splines, Christoffel gradients from
    central differences of the Christoffel symbols.
    """

    def __init__(self, lo, hi, g11, g12, g22, fd_step=1e-4):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        g11, g12, g22 = (np.asarray(a, dtype=float) for a in (g11, g12, g22))
        if not (g11.shape == g12.shape == g22.shape) or g11.ndim != 2 or min(g11.shape) < 4:
            raise ArgumentError("grid metric components must be equal-shape 2-D arrays with >= 4 nodes per axis")
        xs = np.linspace(self.lo[0], self.hi[0], g11.shape[0])
        ys = np.linspace(self.lo[1], self.hi[1], g11.shape[1])
        self._s = [RectBivariateSpline(xs, ys, a, kx=3, ky=3) for a in (g11, g12, g22)]
        self._raw = (g11, g12, g22)
        self.fd_step = float(fd_step)

    def in_chart(self, x):
        x = np.asarray(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def _components(self, x, dx=0, dy=0):
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 2)
        vals = [s.ev(flat[:, 0], flat[:, 1], dx=dx, dy=dy) for s in self._s]
        out = np.empty((flat.shape[0], 2, 2))
        out[:, 0, 0] = vals[0]
        out[:, 0, 1] = out[:, 1, 0] = vals[1]
        out[:, 1, 1] = vals[2]
        return out.reshape(x.shape[:-1] + (2, 2))

    def __call__(self, x):
        return self._components(x)

    def christoffel(self, x):
        g = self._components(x)
        dg = np.stack([self._components(x, dx=1), self._components(x, dy=1)], axis=-1)  # [..., i, j, l]
        ginv = np.linalg.inv(g)
        # G^k_ij = 1/2 g^km (d_i g_mj + d_j g_mi - d_m g_ij)
        t = (
            np.einsum("...mji->...mij", dg)
            + dg
            - np.einsum("...ijm->...mij", dg)
        )
        return 0.5 * np.einsum("...km,...mij->...kij", ginv, t)

    def christoffel_grad(self, x):
        x = np.asarray(x, dtype=float)
        e = self.fd_step
        parts = []
        for l in range(2):
            d = np.zeros(2)
            d[l] = e
            parts.append((self.christoffel(x + d) - self.christoffel(x - d)) / (2 * e))
        return np.stack(parts, axis=-1)

    def to_spec_grid(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "g11": self._raw[0].tolist(),
                "g12": self._raw[1].tolist(), "g22": self._raw[2].tolist()}


# ---------------------------------------------------------------------------
# Conformal factor c(x1, x')
# ---------------------------------------------------------------------------


class ConformalFactor:
    """Time independent positive factor ``c(x1, x')`` of ``g = c (e + g0)``."""

    def __init__(self, func, c_min, spec):
        self._f = func
        self.c_min = float(c_min)
        self.spec = spec
        if self.c_min <= 0:
            raise ArgumentError("conformal factor must be bounded below by a positive constant")

    def __call__(self, x1, xp):
        x1 = np.asarray(x1, dtype=float)
        xp = np.asarray(xp, dtype=float)
        return self._f(x1, xp)

    @property
    def is_constant(self):
        return self.spec.get("kind", "constant") == "constant"

    @classmethod
    def from_spec(cls, spec: dict | None):
        spec = dict(spec or {"kind": "constant", "value": 1.0})
        kind = spec.get("kind", "constant")
        if kind == "constant":
            v = float(spec.get("value", 1.0))
            if v <= 0:
                raise ArgumentError("constant conformal factor must be positive")
            return cls(lambda x1, xp: np.full(np.broadcast_shapes(x1.shape, xp.shape[:-1]), v), v, spec)
        if kind == "gaussian":
            # c = base + amplitude * exp(-|(x1, x') - center|^2 / (2 width^2))
            base = float(spec.get("base", 1.0))
            amp = float(spec.get("amplitude", 0.0))
            cen = np.asarray(spec.get("center", [0.0, 0.0, 0.0]), dtype=float)
            w = float(spec.get("width", 1.0))

            def f(x1, xp):
                r2 = (x1 - cen[0]) ** 2 + np.sum((xp - cen[1:]) ** 2, axis=-1)
                return base + amp * np.exp(-r2 / (2 * w * w))

            return cls(f, base + min(amp, 0.0), spec)
        raise ArgumentError(f"unknown conformal factor kind {kind!r}")


# ---------------------------------------------------------------------------
# Manifold
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransversalManifold:
    domain: object
    metric: Metric
    metric_kind: str
    conformal_factor: ConformalFactor = field(default_factory=lambda: ConformalFactor.from_spec(None))
    params: dict = field(default_factory=dict)

    def rho(self, x):
        return self.domain.rho(x)

    def grad_rho(self, x):
        return self.domain.grad_rho(x)

    @property
    def bbox(self):
        return self.domain.bbox

    def check_points(self, x):
        x = np.asarray(x, dtype=float)
        ok = self.metric.in_chart(x)
        if not np.all(ok):
            raise DomainError("point(s) outside the chart of the metric")
        return x

    def g(self, x):
        return self.metric(self.check_points(x))

    def inner(self, x, u, v):
        return np.einsum("...i,...ij,...j->...", u, self.metric(x), v)

    def norm(self, x, u):
        return np.sqrt(self.inner(x, u, u))

    def outward_normal(self, x):
        """Outward g0-unit normal, ``nu^i = -g^ij d_j rho / |d rho|_g``."""
        gi = np.linalg.inv(self.metric(x))
        nu = -np.einsum("...ij,...j->...i", gi, self.grad_rho(x))
        return nu / self.norm(x, nu)[..., None]

    def to_spec(self):
        spec = {"metric_kind": self.metric_kind, "params": self.params,
                "conformal_factor": self.conformal_factor.spec}
        return spec

    def inflow_point(self, x, direction, normalize=True):
        x = np.asarray(x, dtype=float)
        xi = np.asarray(direction, dtype=float)
        if normalize:
            xi = xi / self.norm(x, xi)
        p = InflowPoint(x, xi)
        if not self.inner(x, xi, self.outward_normal(x)) < 0:
            raise ArgumentError("direction is not strictly incoming at the boundary point")
        return p


def make_manifold(metric_kind: str, params: dict | None = None, conformal_factor: dict | None = None):
    params = dict(params or {})
    cf = ConformalFactor.from_spec(conformal_factor)
    if metric_kind == "euclidean-disk":
        dom = Disk(params.get("center", (0.0, 0.0)), params.get("radius", 1.0))
        met = euclidean_metric()
    elif metric_kind == "hyperbolic-disk":
        dom = Disk(params.get("center", (0.0, 0.0)), params.get("radius", 0.5))
        if np.linalg.norm(dom.center) + dom.radius >= 1.0:
            raise ArgumentError("hyperbolic-disk domain must lie inside the unit Poincare disk")
        met = hyperbolic_metric()
    elif metric_kind == "radial-herglotz":
        a = float(params.get("strength", 0.5))
        dom = Disk(params.get("center", (0.0, 0.0)), params.get("radius", 1.0))
        r_max = np.linalg.norm(dom.center) + dom.radius
        if a * r_max**2 >= 1.0:
            raise ArgumentError("radial-herglotz needs strength * radius^2 < 1")
        met = herglotz_metric(a)
    elif metric_kind == "custom-grid":
        grid = params.get("grid")
        if grid is None:
            raise ArgumentError("custom-grid metric needs params.grid")
        met = GridMetric(grid["lo"], grid["hi"], grid["g11"], grid["g12"], grid["g22"])
        dom = domain_from_spec(params.get("domain", {"type": "rectangle", "lo": grid["lo"], "hi": grid["hi"]}))
    else:
        raise ArgumentError(f"unknown metric_kind {metric_kind!r}; expected one of {METRIC_KINDS}")
    m = TransversalManifold(dom, met, metric_kind, cf, params)
    lo, hi = dom.bbox
    probe = np.stack(np.meshgrid(np.linspace(lo[0], hi[0], 9), np.linspace(lo[1], hi[1], 9)), -1).reshape(-1, 2)
    probe = probe[dom.rho(probe) >= 0]
    if not np.all(met.in_chart(probe)):
        raise ArgumentError("domain is not contained in the chart of the metric")
    ev = np.linalg.eigvalsh(met(probe))
    if np.any(ev <= 0):
        raise GeometryError("metric is not positive definite on the domain")
    return m


def load_manifold(spec: dict):
    """Build a manifold from ``{"metric_kind", "params", "conformal_factor"}``."""
    if "metric_kind" not in spec:
        raise ArgumentError("manifold spec is missing 'metric_kind'")
    return make_manifold(spec["metric_kind"], spec.get("params"), spec.get("conformal_factor"))


def load_manifold_json(path):
    return load_manifold(json.loads(Path(path).read_text()))


def christoffel(m: TransversalManifold, x):
    """Christoffel symbols ``G[k, i, j]`` of ``g0`` at chart point(s) ``x``."""
    x = m.check_points(x)
    ev = np.linalg.eigvalsh(m.metric(x))
    if np.any(ev <= 0):
        raise GeometryError("metric is not positive definite at the query point")
    return m.metric.christoffel(x)


# ---------------------------------------------------------------------------
# Geodesics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InflowPoint:
    x: np.ndarray
    xi: np.ndarray


@dataclass
class GeodesicPath:
    tau: np.ndarray
    x: np.ndarray
    v: np.ndarray
    acc: np.ndarray
    exit_time: float
    tangency: str
    entry_cos: float = float("nan")
    exit_cos: float = float("nan")

    @property
    def trapped(self):
        return not np.isfinite(self.exit_time)

    def interpolant(self):
        """Cubic Hermite interpolants ``(x(tau), v(tau))``."""
        return (
            CubicHermiteSpline(self.tau, self.x, self.v, axis=0),
            CubicHermiteSpline(self.tau, self.v, self.acc, axis=0),
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "x1", "x2", "v1", "v2"])
            for t, x, v in zip(self.tau, self.x, self.v):
                w.writerow([f"{t:.17g}", f"{x[0]:.17g}", f"{x[1]:.17g}", f"{v[0]:.17g}", f"{v[1]:.17g}"])


def geodesic_acceleration(metric: Metric, x, v):
    return -np.einsum("...kij,...i,...j->...k", metric.christoffel(x), v, v)


def rk4_step(metric: Metric, x, v, ds):
    ds = np.asarray(ds, dtype=float)
    if ds.ndim:
        ds = ds[..., None]
    k1x, k1v = v, geodesic_acceleration(metric, x, v)
    x2, v2 = x + 0.5 * ds * k1x, v + 0.5 * ds * k1v
    k2x, k2v = v2, geodesic_acceleration(metric, x2, v2)
    x3, v3 = x + 0.5 * ds * k2x, v + 0.5 * ds * k2v
    k3x, k3v = v3, geodesic_acceleration(metric, x3, v3)
    x4, v4 = x + ds * k3x, v + ds * k3v
    k4x, k4v = v4, geodesic_acceleration(metric, x4, v4)
    return (
        x + ds / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x),
        v + ds / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v),
    )


def _tangency_tag(entry_cos, exit_cos, eps):
    if abs(entry_cos) <= eps:
        return "tangential_entry"
    if abs(exit_cos) <= eps:
        return "tangential_exit"
    return "non_tangential"


def trace_many(m: TransversalManifold, points: Sequence[InflowPoint], step: float, max_len: float,
               tangency_eps: float = DEFAULT_TANGENCY_EPS) -> list[GeodesicPath]:
    """Trace many geodesics at once; see :func:`trace_geodesic`."""
    if not step > 0:
        raise ArgumentError("step must be positive")
    if not max_len > 0:
        raise ArgumentError("max_len must be positive")
    n = len(points)
    if n == 0:
        return []
    x = np.array([p.x for p in points], dtype=float)
    v = np.array([p.xi for p in points], dtype=float)
    m.check_points(x)
    lo, hi = m.bbox
    slack = 1e-9 + 1e-6 * float(np.max(hi - lo))
    tol = min(step**3, 1e-12)
    n_bisect = max(1, int(math.ceil(math.log2(step / tol))))

    xs, vs = [x.copy()], [v.copy()]
    exit_step = np.full(n, -1)
    exit_theta = np.zeros(n)
    exit_x = np.zeros((n, 2))
    exit_v = np.zeros((n, 2))
    active = np.arange(n)
    cur_x, cur_v = x.copy(), v.copy()
    n_steps = int(math.ceil(max_len / step))
    for k in range(n_steps):
        if active.size == 0:
            break
        xa, va = cur_x[active], cur_v[active]
        xn, vn = rk4_step(m.metric, xa, va, step)
        if np.any(np.any(xn < lo - slack - step, axis=-1) | np.any(xn > hi + slack + step, axis=-1)):
            raise GeometryError("geodesic integrator left the chart bounding box")
        crossed = m.rho(xn) <= 0.0
        if np.any(crossed):
            idx = active[crossed]
            a_lo = np.zeros(idx.size)
            a_hi = np.full(idx.size, step)
            x0, v0 = xa[crossed], va[crossed]
            for _ in range(n_bisect):
                mid = 0.5 * (a_lo + a_hi)
                xm, _ = rk4_step(m.metric, x0, v0, mid)
                inside = m.rho(xm) > 0.0
                a_lo = np.where(inside, mid, a_lo)
                a_hi = np.where(inside, a_hi, mid)
            theta = 0.5 * (a_lo + a_hi)
            xe, ve = rk4_step(m.metric, x0, v0, theta)
            exit_step[idx] = k
            exit_theta[idx] = theta
            exit_x[idx] = xe
            exit_v[idx] = ve
        # rays that crossed keep stale values in cur_*; they are no longer active
        cur_x[active], cur_v[active] = xn, vn
        xs.append(cur_x.copy())
        vs.append(cur_v.copy())
        active = active[~crossed]

    X = np.stack(xs)  # (steps+1, n, 2)
    V = np.stack(vs)
    paths = []
    nu_in = m.outward_normal(x)
    entry_cos = m.inner(x, v, nu_in)
    for r in range(n):
        k = exit_step[r]
        if k < 0:
            taus = step * np.arange(X.shape[0])
            xr, vr = X[:, r], V[:, r]
            paths.append(GeodesicPath(taus, xr, vr, geodesic_acceleration(m.metric, xr, vr), float("inf"),
                                      "trapped", float(entry_cos[r]), float("nan")))
            continue
        taus = np.append(step * np.arange(k + 1), k * step + exit_theta[r])
        xr = np.vstack([X[: k + 1, r], exit_x[r]])
        vr = np.vstack([V[: k + 1, r], exit_v[r]])
        ec = float(m.inner(exit_x[r], exit_v[r], m.outward_normal(exit_x[r])))
        tag = _tangency_tag(entry_cos[r], ec, tangency_eps)
        paths.append(GeodesicPath(taus, xr, vr, geodesic_acceleration(m.metric, xr, vr), float(taus[-1]),
                                  tag, float(entry_cos[r]), ec))
    return paths


def trace_geodesic(m: TransversalManifold, p: InflowPoint, step: float, max_len: float) -> GeodesicPath:
    """Unit speed geodesic from an inflow point until it meets the boundary.

    Fixed-step RK4 on ``x'' = -G(x', x')``; the step on which ``rho`` turns
    non-positive is bisected until the exit time is known to within
    ``min(step**3, 1e-12)``.  Paths longer than ``max_len`` are flagged
    ``trapped`` with ``exit_time = inf``.
    """
    return trace_many(m, [p], step, max_len)[0]


def classify_tangency(path: GeodesicPath, m: TransversalManifold, eps: float = DEFAULT_TANGENCY_EPS) -> str:
    if path.trapped:
        raise ClassificationError("cannot classify a trapped geodesic")
    x0, v0 = path.x[0], path.v[0]
    x1, v1 = path.x[-1], path.v[-1]
    c0 = float(m.inner(x0, v0, m.outward_normal(x0)))
    c1 = float(m.inner(x1, v1, m.outward_normal(x1)))
    return _tangency_tag(c0, c1, eps)


def boundary_frame(m: TransversalManifold, x):
    """Inward g0-unit normal and the g0-unit tangent completing a positive frame."""
    n_in = -m.outward_normal(x)
    t = np.stack([-n_in[..., 1], n_in[..., 0]], axis=-1)
    t = t - m.inner(x, t, n_in)[..., None] * n_in
    t = t / m.norm(x, t)[..., None]
    return n_in, t


def generate_fan(m: TransversalManifold, n_boundary: int, n_angles: int, delta_a: float = 0.05):
    """Uniform boundary points times uniform angles from the inward normal.

    Angles span ``[-(pi/2 - delta_a), pi/2 - delta_a]`` inclusive.  Returns
    the inflow points together with the (boundary parameter, angle) pairs.
    """
    if n_boundary < 4 or n_angles < 2:
        raise ArgumentError("generate_fan needs n_boundary >= 4 and n_angles >= 2")
    if not 0 < delta_a < np.pi / 2:
        raise ArgumentError("delta_a must lie in (0, pi/2)")
    s = np.arange(n_boundary) / n_boundary
    if isinstance(m.domain, Rectangle):
        s = s + 0.5 / n_boundary  # keep away from corners
    xb = m.domain.boundary_point(s)
    n_in, t = boundary_frame(m, xb)
    amax = np.pi / 2 - delta_a
    angles = np.linspace(-amax, amax, n_angles)
    pts, params = [], []
    for i in range(n_boundary):
        for a in angles:
            xi = np.cos(a) * n_in[i] + np.sin(a) * t[i]
            pts.append(InflowPoint(xb[i].copy(), xi))
            params.append((float(s[i]), float(a)))
    return pts, params


# ---------------------------------------------------------------------------
# Conformal reduction on M = R x M0
# ---------------------------------------------------------------------------


def _product_metric(m: TransversalManifold, X):
    """Full metric ``c (e + g0)`` on points ``X = (x1, x'_1, x'_2)``."""
    X = np.asarray(X, dtype=float)
    c = m.conformal_factor(X[..., 0], X[..., 1:])
    g = np.zeros(X.shape[:-1] + (3, 3))
    g[..., 0, 0] = 1.0
    g[..., 1:, 1:] = m.metric(X[..., 1:])
    return c[..., None, None] * g


def laplace_beltrami(metric_fn: Callable, u: Callable, X, step: float = 1e-3):
    """Finite-difference Laplace-Beltrami operator of a metric field on R^d.

    ``|g|^(-1/2) d_i (|g|^(1/2) g^ij d_j u)`` with nested second-order central
    differences; ``metric_fn`` and ``u`` act on arrays of points ``(..., d)``.
    """
    X = np.asarray(X, dtype=float)
    d = X.shape[-1]
    E = np.eye(d) * step

    def flux(P):
        g = metric_fn(P)
        sq = np.sqrt(np.linalg.det(g))
        gi = np.linalg.inv(g)
        du = np.stack([(u(P + E[j]) - u(P - E[j])) / (2 * step) for j in range(d)], axis=-1)
        return sq[..., None] * np.einsum("...ij,...j->...i", gi, du)

    div = sum((flux(X + E[i])[..., i] - flux(X - E[i])[..., i]) / (2 * step) for i in range(d))
    return div / np.sqrt(np.linalg.det(metric_fn(X)))


def reduced_potential(m: TransversalManifold, q, X, step: float = 1e-3):
    """Potential of the conformally reduced operator (dimension n = 3).

    ``c^{(n+2)/4} L_{c,g,q} c^{-(n-2)/4} = L_{e+g0, q~}`` with
    ``q~ = c (q - c^{(n-2)/4} Delta_g c^{-(n-2)/4})``; ``q`` holds values of
    the potential at the points ``X = (x1, x')``.
    """
    X = np.asarray(X, dtype=float)
    k = 0.25  # (n - 2) / 4 for n = 3

    def cpow(P):
        return m.conformal_factor(P[..., 0], P[..., 1:]) ** (-k)

    c = m.conformal_factor(X[..., 0], X[..., 1:])
    lap = laplace_beltrami(lambda P: _product_metric(m, P), cpow, X, step)
    return c * (np.asarray(q) - c**k * lap)
