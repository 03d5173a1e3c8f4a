"""Attenuated geodesic ray transform with constant attenuation.

``I^a f(x, xi) = int_0^tau_exit exp(a t) f(gamma(t)) dt``.  Rays are traced
once per fan and cached with their Simpson nodes.  The discrete forward
operator is an explicit sparse matrix (Simpson weight x attenuation x
Keys bicubic interpolation), so the adjoint is its exact transpose.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError, ConditioningError, ConfigurationError
from .geometry import TransversalManifold, trace_many

DEFAULT_A_MAX = 1.0


# ---------------------------------------------------------------------------
# Scalar fields on a regular lattice
# ---------------------------------------------------------------------------


def keys_weights(t):
    """Keys cubic convolution weights (a = -1/2) for offsets ``t`` in [0, 1)."""
    t = np.asarray(t, dtype=float)
    a = -0.5

    def near(s):
        return (a + 2) * s**3 - (a + 3) * s**2 + 1

    def far(s):
        return a * s**3 - 5 * a * s**2 + 8 * a * s - 4 * a

    return np.stack([far(1 + t), near(t), near(1 - t), far(2 - t)], axis=-1)


@dataclass
class ScalarField:
    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray  # (nx, ny), node (i, j) at lo + (i, j) * spacing

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or min(self.values.shape) < 4:
            raise ArgumentError("scalar field needs a 2-D lattice of at least 4x4 nodes")
        if not np.all(np.isfinite(self.values)):
            raise ArgumentError("scalar field values must be finite")

    @property
    def shape(self):
        return self.values.shape

    @property
    def spacing(self):
        return (self.hi - self.lo) / (np.array(self.shape) - 1)

    def nodes(self):
        xs = np.linspace(self.lo[0], self.hi[0], self.shape[0])
        ys = np.linspace(self.lo[1], self.hi[1], self.shape[1])
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([X, Y], axis=-1)

    @classmethod
    def from_function(cls, func, lo, hi, shape, dtype=float):
        f = cls(lo, hi, np.zeros(shape, dtype=dtype))
        f.values = np.asarray(func(f.nodes()), dtype=dtype).reshape(shape)
        return f

    @classmethod
    def on_manifold(cls, m: TransversalManifold, shape, func=None, dtype=float):
        lo, hi = m.bbox
        if func is None:
            return cls(lo, hi, np.zeros(shape, dtype=dtype))
        return cls.from_function(func, lo, hi, shape, dtype=dtype)

    def like(self, values):
        return ScalarField(self.lo, self.hi, values)

    def support_mask(self, m: TransversalManifold):
        return m.rho(self.nodes()) >= 0

    def masked(self, m: TransversalManifold):
        """Copy extended by zero outside ``{rho >= 0}``."""
        return self.like(np.where(self.support_mask(m), self.values, 0))

    def interp_matrix(self, points):
        """Sparse ``(npts, nnodes)`` Keys bicubic interpolation matrix.

        Stencil indices beyond the lattice are clamped to the edge nodes,
        which keeps constants and linear functions exact everywhere.
        """
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        u = (p - self.lo) / self.spacing
        base = np.floor(u).astype(int)
        frac = u - base
        wx = keys_weights(frac[:, 0])
        wy = keys_weights(frac[:, 1])
        nx, ny = self.shape
        offs = np.arange(-1, 3)
        ix = np.clip(base[:, 0:1] + offs, 0, nx - 1)
        iy = np.clip(base[:, 1:2] + offs, 0, ny - 1)
        cols = (ix[:, :, None] * ny + iy[:, None, :]).reshape(len(p), 16)
        w = (wx[:, :, None] * wy[:, None, :]).reshape(len(p), 16)
        rows = np.repeat(np.arange(len(p)), 16)
        mat = sp.csr_matrix((w.ravel(), (rows, cols.ravel())), shape=(len(p), nx * ny))
        mat.sum_duplicates()
        return mat

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        out = self.interp_matrix(points) @ self.values.ravel()
        return out.reshape(points.shape[:-1])

    def to_csv(self, path):
        nodes = self.nodes().reshape(-1, 2)
        vals = self.values.ravel()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "re", "im"])
            for (x1, x2), v in zip(nodes, vals):
                w.writerow([f"{x1:.17g}", f"{x2:.17g}", f"{np.real(v):.17g}", f"{np.imag(v):.17g}"])


# ---------------------------------------------------------------------------
# Ray bundles and sinograms
# ---------------------------------------------------------------------------


def simpson_nodes(length: float, step: float):
    """Uniform Simpson nodes on ``[0, length]`` with spacing at most ``step``."""
    n = max(2, 2 * int(math.ceil(length / (2.0 * step))))
    t = np.linspace(0.0, length, n + 1)
    w = np.full(n + 1, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return t, w * (length / n) / 3.0


class RayBundle:
    """Traced fan with cached quadrature nodes.

    ``ok`` marks the rays that enter the transform (not trapped, not
    tangential); the others are flagged and excluded.
    """

    def __init__(self, m: TransversalManifold, fan, step: float = 0.01, max_len: float = 20.0,
                 params=None, quad_step: float | None = None, tangency_eps: float = 1e-3):
        if step <= 0:
            raise ArgumentError("step must be positive")
        self.manifold = m
        self.fan = list(fan)
        if not self.fan:
            raise ArgumentError("empty fan")
        self.params = None if params is None else np.asarray(params, dtype=float)
        self.step = float(step)
        self.quad_step = self.step if quad_step is None else min(float(quad_step), self.step)
        self.paths = trace_many(m, self.fan, step, max_len, tangency_eps=tangency_eps)
        self.flags = [p.tangency for p in self.paths]
        self.ok = np.array([f == "non_tangential" for f in self.flags])
        ts, ws, xs, owners = [], [], [], []
        for r, path in enumerate(self.paths):
            if not self.ok[r]:
                continue
            t, w = simpson_nodes(path.exit_time, self.quad_step)
            sx, _ = path.interpolant()
            ts.append(t)
            ws.append(w)
            xs.append(sx(t))
            owners.append(np.full(len(t), r))
        self.node_tau = np.concatenate(ts) if ts else np.zeros(0)
        self.node_w = np.concatenate(ws) if ws else np.zeros(0)
        self.node_x = np.concatenate(xs) if xs else np.zeros((0, 2))
        self.node_ray = np.concatenate(owners) if owners else np.zeros(0, dtype=int)
        self._interp_cache: dict = {}

    @property
    def n_rays(self):
        return len(self.fan)

    @property
    def exit_times(self):
        return np.array([p.exit_time for p in self.paths])

    def weights(self, a: float):
        """Sparse ``(n_rays, n_nodes)`` Simpson x attenuation weights."""
        w = self.node_w * np.exp(a * self.node_tau)
        return sp.csr_matrix((w, (self.node_ray, np.arange(len(w)))), shape=(self.n_rays, len(w)))

    def interp(self, field_: ScalarField):
        key = (tuple(field_.lo), tuple(field_.hi), field_.shape)
        if key not in self._interp_cache:
            self._interp_cache[key] = field_.interp_matrix(self.node_x)
        return self._interp_cache[key]

    def matrix(self, a: float, field_: ScalarField):
        return (self.weights(a) @ self.interp(field_)).tocsr()


@dataclass
class RaySinogram:
    inflow: list
    values: np.ndarray
    attenuation: float
    flags: list
    params: np.ndarray | None = None
    bundle: RayBundle | None = field(default=None, repr=False)

    @property
    def ok(self):
        return np.array([f == "non_tangential" for f in self.flags])

    def with_values(self, values):
        return RaySinogram(self.inflow, np.asarray(values), self.attenuation, self.flags, self.params, self.bundle)

    def to_csv(self, path):
        params = self.params if self.params is not None else np.full((len(self.values), 2), np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["boundary_param", "angle", "re", "im", "flag"])
            for (s, ang), v, f in zip(params, self.values, self.flags):
                w.writerow([f"{s:.17g}", f"{ang:.17g}", f"{np.real(v):.17g}", f"{np.imag(v):.17g}", f])


def _check_attenuation(a):
    a = np.asarray(a)
    if a.ndim != 0:
        raise ArgumentError("only constant attenuation is supported")
    if np.iscomplexobj(a) and np.imag(a) != 0:
        raise ArgumentError("attenuation must be real")
    return float(np.real(a))


def forward_transform(m: TransversalManifold, f, a: float, fan, step: float = 0.01,
                      bundle: RayBundle | None = None) -> RaySinogram:
    """Composite Simpson quadrature of ``exp(a t) f(gamma(t))`` per ray.

    ``f`` is a :class:`ScalarField` (bicubic interpolation) or a vectorised
    callable evaluated directly at the quadrature nodes.
    """
    a = _check_attenuation(a)
    if bundle is None:
        params = None
        if isinstance(fan, tuple) and len(fan) == 2:
            fan, params = fan
        bundle = RayBundle(m, fan, step=step, params=params)
    W = bundle.weights(a)
    if isinstance(f, ScalarField):
        vals = bundle.interp(f) @ f.values.ravel()
    else:
        vals = np.asarray(f(bundle.node_x))
    out = W @ vals
    out = np.where(bundle.ok, out, 0)
    return RaySinogram(bundle.fan, out, a, list(bundle.flags), bundle.params, bundle)


def adjoint_transform(m: TransversalManifold, sino: RaySinogram, grid: ScalarField,
                      bundle: RayBundle | None = None) -> ScalarField:
    """Exact transpose of the discrete forward operator applied to ``sino``."""
    bundle = bundle or sino.bundle
    if bundle is None:
        raise ArgumentError("sinogram carries no ray bundle; pass one explicitly")
    if len(sino.values) == 0:
        raise ArgumentError("empty sinogram")
    g = np.where(sino.ok, sino.values, 0)
    A = bundle.matrix(sino.attenuation, grid)
    return grid.like((A.T @ g).reshape(grid.shape))


# ---------------------------------------------------------------------------
# Regularised inversion
# ---------------------------------------------------------------------------


def laplacian_matrix(shape, mask):
    """Unscaled 5-point Laplacian restricted to ``mask`` (zero Dirichlet outside)."""
    nx, ny = shape
    idx = -np.ones(shape, dtype=int)
    idx[mask] = np.arange(int(mask.sum()))
    I, J = np.nonzero(mask)
    rows, cols, vals = [np.arange(len(I))], [idx[I, J]], [np.full(len(I), -4.0)]
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        I2, J2 = I + di, J + dj
        inside = (I2 >= 0) & (I2 < nx) & (J2 >= 0) & (J2 < ny)
        sel = np.nonzero(inside)[0]
        k = idx[I2[sel], J2[sel]]
        keep = k >= 0
        rows.append(sel[keep])
        cols.append(k[keep])
        vals.append(np.ones(keep.sum()))
    n = len(I)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


@dataclass
class InversionReport:
    iters: int
    final_residual: float
    converged: bool
    residual_history: list
    rel_error_if_truth_given: float | None = None

    def to_dict(self):
        return {
            "iters": self.iters,
            "final_residual": self.final_residual,
            "converged": self.converged,
            "rel_error_if_truth_given": self.rel_error_if_truth_given,
        }

    def to_json(self, path):
        from .io import dump_json

        dump_json(self.to_dict(), path)


def conjugate_gradient(apply, b, iters: int, tol: float = 1e-8, diverge_window: int = 10, norms=None):
    """Conjugate-residual iteration for a symmetric positive definite ``apply``.

    This member of the conjugate gradient family minimises the residual norm
    over the Krylov space, so the residual history is non-increasing in exact
    arithmetic and growth over ``diverge_window`` consecutive iterations
    signals genuine loss of conditioning (:class:`ConditioningError`).

    ``b`` may be ``(n,)`` or ``(n, k)``; columns are independent systems that
    share the operator.  Returns ``(x, history, converged)`` where
    ``history[i]`` holds the per-column relative residuals after ``i`` steps,
    measured against ``norms`` (default: the column norms of ``b``).
    """
    b = np.asarray(b)
    vec = b.ndim == 1
    B = b[:, None] if vec else b
    x = np.zeros_like(B)
    bnorm = np.linalg.norm(B, axis=0) if norms is None else np.asarray(norms, dtype=float)
    live = np.linalg.norm(B, axis=0) > 0
    scale = np.where(live, bnorm, 1.0)
    if not live.any():
        return (x[:, 0] if vec else x), [np.zeros(B.shape[1])], True
    r = B.copy()
    Ar = apply(r)
    p, Ap = r.copy(), Ar.copy()
    rAr = np.sum(r * Ar, axis=0)
    hist = [np.linalg.norm(B, axis=0) / scale]
    growth = np.zeros(B.shape[1], dtype=int)
    done = ~live
    for _ in range(iters):
        ApAp = np.sum(Ap * Ap, axis=0)
        act = ~done
        if np.any((ApAp[act] <= 0) | (rAr[act] <= 0)):
            raise ConditioningError("normal-equation operator is not positive definite")
        alpha = np.where(act, rAr / np.where(act, ApAp, 1.0), 0.0)
        x = x + alpha * p
        r = r - alpha * Ap
        rel = np.linalg.norm(r, axis=0) / scale
        growth = np.where(rel > hist[-1], growth + 1, 0)
        hist.append(rel)
        if np.any(growth >= diverge_window):
            raise ConditioningError(f"residual increased over {diverge_window} consecutive iterations")
        done = done | (rel <= tol)
        if done.all():
            return (x[:, 0] if vec else x), hist, True
        Ar = apply(r)
        rAr_new = np.sum(r * Ar, axis=0)
        beta = np.where(done, 0.0, rAr_new / np.where(rAr != 0, rAr, 1.0))
        rAr = rAr_new
        p = r + beta * p
        Ap = Ar + beta * Ap
    return (x[:, 0] if vec else x), hist, False


def invert_transform(m: TransversalManifold, sino: RaySinogram, grid: ScalarField, reg: float = 1e-4,
                     iters: int = 500, tol: float = 1e-8, a_max: float = DEFAULT_A_MAX,
                     truth: ScalarField | None = None, bundle: RayBundle | None = None,
                     row_scaling: str = "none"):
    """Tikhonov-regularised least squares ``(A*A + reg D*D) f = A* d``.

    Unknowns are the lattice nodes with ``rho >= 0``; the result is extended
    by zero elsewhere.  ``row_scaling="equilibrate"`` divides every ray
    equation by its attenuation weight ``int_0^L exp(a t) dt``, which keeps
    the misfit balanced when ``|a| L`` is large.  Returns ``(field, report)``.
    """
    truths = None if truth is None else [truth]
    return invert_many(m, [sino], grid, reg, iters, tol, a_max, truths, bundle, row_scaling)[0]


def invert_many(m: TransversalManifold, sinos: list, grid: ScalarField, reg: float = 1e-4,
                iters: int = 500, tol: float = 1e-8, a_max: float = DEFAULT_A_MAX,
                truths: list | None = None, bundle: RayBundle | None = None,
                row_scaling: str = "none"):
    """:func:`invert_transform` for several sinograms sharing one fan and
    attenuation; the normal equations are assembled once and solved for all
    right-hand sides together.  Returns a list of ``(field, report)``."""
    if not sinos:
        raise ArgumentError("no sinograms to invert")
    a = _check_attenuation(sinos[0].attenuation)
    if any(_check_attenuation(s.attenuation) != a for s in sinos):
        raise ArgumentError("batched inversion needs a common attenuation")
    if abs(a) >= a_max:
        raise ConfigurationError(f"|a| = {abs(a):.6g} exceeds the configured bound a_max = {a_max:.6g}")
    if reg < 0:
        raise ArgumentError("reg must be non-negative")
    bundle = bundle or sinos[0].bundle
    if bundle is None:
        raise ArgumentError("sinogram carries no ray bundle; pass one explicitly")
    ok = sinos[0].ok
    if any(not np.array_equal(s.ok, ok) for s in sinos):
        raise ArgumentError("batched sinograms must share their ray flags")
    mask = grid.support_mask(m).ravel()
    rows = np.nonzero(ok)[0]
    A = bundle.matrix(a, grid)[:, mask][rows]
    d = np.stack([np.asarray(s.values)[ok] for s in sinos], axis=1)
    if row_scaling == "equilibrate":
        wsum = np.asarray(bundle.weights(a).sum(axis=1)).ravel()[ok]
        A = (sp.diags(1.0 / wsum) @ A).tocsr()
        d = d / wsum[:, None]
    elif row_scaling != "none":
        raise ArgumentError(f"unknown row_scaling {row_scaling!r}")
    D = laplacian_matrix(grid.shape, mask.reshape(grid.shape))
    N = (A.T @ A + reg * (D.T @ D)).tocsr()
    rhs = A.T @ d
    if N.nnz > 0.1 * N.shape[0] ** 2:
        N = N.toarray()  # dense BLAS is faster once the normal matrix fills in
    cplx = np.iscomplexobj(rhs)
    k = rhs.shape[1]
    R = np.hstack([rhs.real, rhs.imag]) if cplx else rhs
    norms = np.linalg.norm(rhs, axis=0)
    X, hist, conv = conjugate_gradient(lambda v: N @ v, R, iters, tol,
                                       norms=np.concatenate([norms, norms]) if cplx else norms)
    if cplx:
        X = X[:, :k] + 1j * X[:, k:]
    H = np.array(hist)
    if cplx:
        H = np.hypot(H[:, :k], H[:, k:])
    out = []
    for j in range(k):
        full = np.zeros(grid.values.size, dtype=X.dtype)
        full[mask] = X[:, j]
        rel = None
        if truths is not None and truths[j] is not None:
            tv = truths[j].values.ravel()[mask]
            rel = float(np.linalg.norm(X[:, j] - tv) / max(np.linalg.norm(tv), 1e-300))
        hj = H[:, j].tolist()
        out.append((grid.like(full.reshape(grid.shape)),
                    InversionReport(len(hj) - 1, float(hj[-1]), bool(conv), hj, rel)))
    return out


def sinogram_from_csv(path, bundle: RayBundle | None = None, attenuation: float = 0.0):
    params, vals, flags = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            params.append((float(row["boundary_param"]), float(row["angle"])))
            vals.append(complex(float(row["re"]), float(row["im"])))
            flags.append(row["flag"])
    inflow = bundle.fan if bundle is not None else [None] * len(vals)
    return RaySinogram(inflow, np.array(vals), attenuation, flags, np.array(params), bundle)
