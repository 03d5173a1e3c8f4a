"""Recovery of a space-time potential from attenuated ray transforms of its
Fourier slices.

Pipeline: ``cq`` -> slices ``f(x', beta, lam) = int int exp(i lam (beta t + x1)) cq dx1 dt``
-> transform data ``I^{-sqrt(1-beta^2) lam} f`` -> regularised inversion per
``(lam, beta)`` -> support-constrained extrapolation from the sampled cone of
frequencies ``-lam (beta, 1)`` -> division by ``c``.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConditioningError, ConfigurationError, DataError, GeometryError
from .geometry import ConformalFactor, TransversalManifold
from .raytransform import RayBundle, ScalarField, forward_transform, invert_many

BETA_MIN = 1.0 / math.sqrt(3.0)


def _trap_weights(x):
    w = np.empty_like(x)
    d = np.diff(x)
    w[0], w[-1] = d[0] / 2, d[-1] / 2
    w[1:-1] = (d[:-1] + d[1:]) / 2
    return w


@dataclass
class SpaceTimePotential:
    """Potential sampled on ``t x x1 x x'`` with zero boundary faces."""

    t: np.ndarray
    x1: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray  # (nt, n1, nx, ny)
    boundary_tol: float = 1e-12

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.x1 = np.asarray(self.x1, dtype=float)
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        self.values = np.asarray(self.values)
        if self.values.shape[:2] != (len(self.t), len(self.x1)) or self.values.ndim != 4:
            raise DataError("values must have shape (nt, n1, nx, ny)")
        scale = max(float(np.max(np.abs(self.values), initial=0.0)), 1.0)
        v = self.values
        faces = [v[0], v[-1], v[:, 0], v[:, -1], v[:, :, 0], v[:, :, -1], v[:, :, :, 0], v[:, :, :, -1]]
        if max(float(np.max(np.abs(f))) for f in faces) > self.boundary_tol * scale:
            raise DataError("space-time potential must vanish on the boundary faces")

    @property
    def xp_shape(self):
        return self.values.shape[2:]

    def xp_nodes(self):
        return ScalarField(self.lo, self.hi, np.zeros(self.xp_shape)).nodes()

    def cell_weights(self):
        sx = (self.hi - self.lo) / (np.array(self.xp_shape) - 1)
        return _trap_weights(self.t)[:, None] * _trap_weights(self.x1)[None, :], float(sx[0] * sx[1])

    def norm(self, values=None):
        v = self.values if values is None else values
        w2, wx = self.cell_weights()
        return math.sqrt(float(np.sum(w2[:, :, None, None] * np.abs(v) ** 2) * wx))

    def like(self, values):
        return SpaceTimePotential(self.t, self.x1, self.lo, self.hi, values, self.boundary_tol)

    @classmethod
    def from_function(cls, func, T: float, nt: int, x1_range, n1: int, m: TransversalManifold, xp_shape):
        """Sample ``func(t, x1, xp)`` (broadcasting) and zero the boundary faces
        and the nodes outside M0."""
        t = np.linspace(0.0, T, nt)
        x1 = np.linspace(x1_range[0], x1_range[1], n1)
        lo, hi = m.bbox
        xp = ScalarField(lo, hi, np.zeros(xp_shape)).nodes()
        vals = np.asarray(func(t[:, None, None, None], x1[None, :, None, None], xp[None, None]), dtype=float)
        vals = np.broadcast_to(vals, (nt, n1) + tuple(xp_shape)).copy()
        vals[:, :, m.rho(xp) < 0] = 0.0
        vals[0] = vals[-1] = 0.0
        vals[:, 0] = vals[:, -1] = 0.0
        vals[:, :, 0] = vals[:, :, -1] = 0.0
        vals[:, :, :, 0] = vals[:, :, :, -1] = 0.0
        out = cls(t, x1, lo, hi, vals)
        out.func = func
        return out


def _c_values(c, q: SpaceTimePotential):
    if c is None:
        return np.ones((len(q.x1),) + q.xp_shape)
    xp = q.xp_nodes()
    if isinstance(c, ConformalFactor):
        vals = c(q.x1[:, None, None], xp[None])
    else:
        vals = np.asarray(c(q.x1[:, None, None], xp[None]), dtype=float)
    return np.broadcast_to(vals, (len(q.x1),) + q.xp_shape)


def _exp_rows(t, x1, pairs):
    """Trapezoid-weighted ``exp(i lam (beta t + x1))`` factors per pair."""
    lam = np.array([p[0] for p in pairs])[:, None]
    beta = np.array([p[1] for p in pairs])[:, None]
    Et = np.exp(1j * lam * beta * t[None, :]) * _trap_weights(t)[None, :]
    E1 = np.exp(1j * lam * x1[None, :]) * _trap_weights(x1)[None, :]
    return Et, E1


def _slices(q: SpaceTimePotential, c, pairs, chunk: int = 16):
    cq = q.values * _c_values(c, q)[None]
    nt, n1 = cq.shape[:2]
    Et, E1 = _exp_rows(q.t, q.x1, pairs)
    flat = cq.reshape(nt, -1)
    out = []
    for k in range(0, len(pairs), chunk):
        tmp = (Et[k:k + chunk] @ flat).reshape(-1, n1, flat.shape[1] // n1)
        res = np.einsum("pj,pjk->pk", E1[k:k + chunk], tmp)
        out.extend(r.reshape(q.xp_shape) for r in res)
    return out


def fourier_slice(q: SpaceTimePotential, c, lam: float, beta: float) -> ScalarField:
    """``f(x', beta, lam) = int int exp(i lam (beta t + x1)) (c q)(t, x1, x') dx1 dt``."""
    if lam == 0:
        raise ArgumentError("fourier slices need lam != 0")
    return ScalarField(q.lo, q.hi, _slices(q, c, [(lam, beta)])[0])


@dataclass
class SliceSet:
    lambdas: list
    betas: list
    pairs: list
    slices: list
    attenuations: list
    residuals: list = field(default_factory=list)
    reports: list = field(default_factory=list)

    def __post_init__(self):
        freqs = {(round(-lam * b, 12), round(-lam, 12)) for lam, b in self.pairs}
        if len(freqs) != len(self.pairs):
            raise ArgumentError("frequency pairs -lam (beta, 1) must be distinct")

    def index(self, lam, beta):
        for i, (l2, b2) in enumerate(self.pairs):
            if abs(l2 - lam) < 1e-12 and abs(b2 - beta) < 1e-12:
                return i
        raise KeyError((lam, beta))


def make_pairs(lambdas, betas, beta_min: float = BETA_MIN):
    lambdas = [float(v) for v in lambdas]
    betas = [float(v) for v in betas]
    if any(v == 0 for v in lambdas):
        raise ArgumentError("lam = 0 carries no slice information")
    if any(not beta_min < b < 1 for b in betas):
        raise ArgumentError(f"beta must lie in ({beta_min:.6g}, 1)")
    return [(lam, b) for lam in lambdas for b in betas]


def compute_slices(q: SpaceTimePotential, c, lambdas, betas) -> SliceSet:
    pairs = make_pairs(lambdas, betas)
    vals = _slices(q, c, pairs)
    fields = [ScalarField(q.lo, q.hi, v) for v in vals]
    att = [-math.sqrt(1 - b * b) * lam for lam, b in pairs]
    return SliceSet(list(lambdas), list(betas), pairs, fields, att)


def synthesize_data(q: SpaceTimePotential, c, slices: SliceSet, bundle: RayBundle,
                    a_max: float = 1.0) -> list:
    """Attenuated transforms ``I^{-sqrt(1-beta^2) lam} f(., beta, lam)`` per pair."""
    bad = [a for a in slices.attenuations if abs(a) >= a_max]
    if bad:
        raise ConfigurationError(f"attenuation {max(map(abs, bad)):.6g} exceeds a_max = {a_max:.6g}")
    return [forward_transform(bundle.manifold, f, a, None, bundle=bundle)
            for f, a in zip(slices.slices, slices.attenuations)]


def slice_values(func, c, lam: float, beta: float, t, x1, xp, chunk: int = 2048):
    """``int int exp(i lam (beta t + x1)) (c q)(t, x1, x') dx1 dt`` at arbitrary
    points ``xp`` (shape ``(..., 2)``), trapezoid rule on the ``(t, x1)`` nodes."""
    xp = np.asarray(xp, dtype=float)
    pts = xp.reshape(-1, 2)
    ph = np.exp(1j * lam * (beta * t[:, None] + x1[None, :])) * (_trap_weights(t)[:, None] * _trap_weights(x1)[None, :])
    out = np.empty(len(pts), dtype=complex)
    for k in range(0, len(pts), chunk):
        p = pts[k:k + chunk]
        vals = np.asarray(func(t[:, None, None], x1[None, :, None], p[None, None]), dtype=float)
        vals = np.broadcast_to(vals, (len(t), len(x1), len(p)))
        if c is not None:
            vals = vals * np.asarray(c(x1[:, None], p[None]))[None]
        out[k:k + chunk] = np.tensordot(ph, vals, axes=([0, 1], [0, 1]))
    return out.reshape(xp.shape[:-1])


def triple_integral(func, c, lam: float, beta: float, path, t, x1, n_tau: int = 96) -> complex:
    """Direct quadrature of ``int_0^L int int exp(i lam (beta t + x1) - sqrt(1-beta^2) lam tau) cq``.

    Gauss-Legendre in ``tau`` along the traced path and trapezoid in ``(t, x1)``.
    """
    L = path.exit_time
    g, w = np.polynomial.legendre.leggauss(n_tau)
    tau = 0.5 * L * (g + 1)
    w = 0.5 * L * w
    sx, _ = path.interpolant()
    inner = slice_values(func, c, lam, beta, t, x1, sx(tau))
    a = math.sqrt(1 - beta * beta) * lam
    return complex(np.sum(w * np.exp(-a * tau) * inner))


def data_consistency(q: SpaceTimePotential, c, slices: SliceSet, data: list, n_rays: int = 5,
                     n_pairs: int = 4, seed: int = 0) -> float:
    """Largest gap between transform data and :func:`triple_integral` on a
    reproducible subsample of rays and pairs, relative to the largest data
    magnitude of the pair (rays that miss the phantom carry tiny values).

    ``q`` must come from :meth:`SpaceTimePotential.from_function` so that the
    continuous potential is available to the direct quadrature.
    """
    if getattr(q, "func", None) is None:
        raise ArgumentError("data consistency needs a potential built from a function")
    bundle = data[0].bundle
    rng = np.random.default_rng(seed)
    ok = np.nonzero(bundle.ok)[0]
    rays = rng.choice(ok, size=min(n_rays, len(ok)), replace=False)
    picks = rng.choice(len(slices.pairs), size=min(n_pairs, len(slices.pairs)), replace=False)
    worst = 0.0
    for i in sorted(picks):
        lam, beta = slices.pairs[i]
        scale = max(float(np.max(np.abs(data[i].values))), 1e-300)
        for r in sorted(rays):
            ref = triple_integral(q.func, c, lam, beta, bundle.paths[r], q.t, q.x1)
            gap = abs(data[i].values[r] - ref) / scale
            worst = max(worst, gap)
    return float(worst)


def recover_slices(data: list, meta: SliceSet, grid: ScalarField, reg: float = 1e-6, iters: int = 5000,
                   a_max: float = 1.0, row_scaling: str = "equilibrate", threads: int = 1) -> SliceSet:
    """Invert every per-pair sinogram; conditioning errors carry the pair tag."""
    return recover_slices_many([data], meta, grid, reg, iters, a_max, row_scaling, threads)[0]


def recover_slices_many(datasets: list, meta: SliceSet, grid: ScalarField, reg: float = 1e-6,
                        iters: int = 5000, a_max: float = 1.0, row_scaling: str = "equilibrate",
                        threads: int = 1) -> list:
    """:func:`recover_slices` for several data sets over the same pairs; each
    pair's normal equations are assembled once and solved for all sets."""
    m = datasets[0][0].bundle.manifold

    def one(i):
        lam, beta = meta.pairs[i]
        try:
            return invert_many(m, [d[i] for d in datasets], grid, reg=reg, iters=iters, a_max=a_max,
                               row_scaling=row_scaling)
        except ConditioningError as exc:
            raise ConditioningError(str(exc), tag=(lam, beta)) from exc

    n = len(meta.pairs)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            res = list(ex.map(one, range(n)))
    else:
        res = [one(i) for i in range(n)]
    out = []
    for k in range(len(datasets)):
        fields = [res[i][k][0] for i in range(n)]
        reports = [res[i][k][1] for i in range(n)]
        out.append(SliceSet(meta.lambdas, meta.betas, meta.pairs, fields, meta.attenuations,
                            [r.final_residual for r in reports], reports))
    return out


def cone_coverage(pairs, t, x1) -> float:
    """Fraction of the discrete frequency half-plane ``xi_2 > 0`` (within the
    sampled radius) whose direction and radius fall inside the sampled cone."""
    lam = np.abs(np.array([p[0] for p in pairs]))
    beta = np.array([p[1] for p in pairs])
    r_max = float(np.max(lam * np.sqrt(1 + beta**2)))
    r_min = float(np.min(lam * np.sqrt(1 + beta**2)))
    ft = 2 * np.pi * np.fft.fftfreq(len(t), t[1] - t[0])
    f1 = 2 * np.pi * np.fft.fftfreq(len(x1), x1[1] - x1[0])
    XI1, XI2 = np.meshgrid(ft, f1, indexing="ij")
    r = np.hypot(XI1, XI2)
    half = (XI2 > 0) & (r <= r_max)
    if not half.any():
        return 0.0
    ratio = np.divide(np.abs(XI1), XI2, out=np.full_like(XI1, np.inf), where=XI2 > 0)
    same_sign = XI1 * XI2 >= 0  # -lam (beta, 1) has components of equal sign
    inside = half & same_sign & (ratio >= beta.min()) & (ratio <= beta.max()) & (r >= r_min)
    return float(inside.sum() / half.sum())


@dataclass
class ConeReport:
    residual_history: list
    rank: int
    coverage: float
    stagnated: bool
    coverage_ok: bool
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "residual_history": self.residual_history,
            "rank": self.rank,
            "cone_coverage": self.coverage,
            "coverage_ok": self.coverage_ok,
            "stagnated": self.stagnated,
            "warnings": self.warnings,
        }


def cone_reconstruct(slices: SliceSet, template: SpaceTimePotential, support, iters: int = 200,
                     rank_tol: float = 1e-8, coverage_threshold: float = 0.25,
                     stagnation_level: float = 0.5):
    """Alternating projections between the data set ``{E g = D}`` and real
    functions supported in ``support`` (a ``(nt, n1)`` mask), per x' node.

    ``E`` samples the trapezoid Fourier integral at ``-lam (beta, 1)``.  The
    problem is posed over real unknowns (real and imaginary rows of ``E``
    stacked), so realness holds by construction.  Because every stage is
    linear and shared by all x' nodes, the data columns are compressed by a
    truncated SVD and the iteration runs on the reduced columns only.
    Returns ``(cq, report)`` with ``cq`` restricted to the support mask.
    """
    support = np.asarray(support, dtype=bool)
    nt, n1 = len(template.t), len(template.x1)
    if support.shape != (nt, n1):
        raise ArgumentError("support mask must have shape (nt, n1)")
    Et, E1 = _exp_rows(template.t, template.x1, slices.pairs)
    E = (Et[:, :, None] * E1[:, None, :]).reshape(len(slices.pairs), -1)
    Er = np.vstack([E.real, E.imag])
    D = np.stack([f.values.ravel() for f in slices.slices])  # (P, nxy)
    Dr = np.vstack([D.real, D.imag])
    U, S, Vt = np.linalg.svd(Er, full_matrices=False)
    keep = S > 1e-10 * S[0]
    U, S, Vt = U[:, keep], S[keep], Vt[keep]

    def project_data(g, data):
        # orthogonal projection onto {Er g = data}
        return g + Vt.T @ ((U.T @ (data - Er @ g)) / S[:, None])

    def data_distance(g, data):
        return float(np.linalg.norm((U.T @ (Er @ g - data)) / S[:, None]))

    Ud, Sd, Vdt = np.linalg.svd(Dr, full_matrices=False)
    r = int(np.sum(Sd > rank_tol * Sd[0])) if Sd.size and Sd[0] > 0 else 0
    mask = support.ravel()
    warn = []
    if r == 0:
        cq = np.zeros((nt, n1) + template.xp_shape)
        rep = ConeReport([0.0], 0, cone_coverage(slices.pairs, template.t, template.x1), False, False)
        rep.coverage_ok = rep.coverage >= coverage_threshold
        return template.like(cq), rep
    Dred = Ud[:, :r] * Sd[:r]
    ref = max(data_distance(np.zeros((Er.shape[1], r)), Dred), 1e-300)
    g = np.zeros((Er.shape[1], r))
    hist = []
    for _ in range(iters):
        g = project_data(g, Dred)
        g[~mask] = 0.0
        hist.append(data_distance(g, Dred) / ref)
    cq_flat = g @ Vdt[:r]  # (N, nxy)
    cq = cq_flat.reshape((nt, n1) + template.xp_shape).copy()
    cq[0] = cq[-1] = 0.0
    cq[:, 0] = cq[:, -1] = 0.0
    cq[:, :, 0] = cq[:, :, -1] = 0.0
    cq[:, :, :, 0] = cq[:, :, :, -1] = 0.0
    coverage = cone_coverage(slices.pairs, template.t, template.x1)
    stagnated = bool(hist and hist[-1] > stagnation_level)
    if stagnated:
        msg = f"data residual stagnated at {hist[-1]:.3g} > {stagnation_level}; reconstruction is ill-posed"
        warnings.warn(msg)
        warn.append(msg)
    cov_ok = coverage >= coverage_threshold
    if not cov_ok:
        msg = (f"cone samples cover {100 * coverage:.1f}% of the discrete frequency half-plane "
               f"(threshold {100 * coverage_threshold:.0f}%)")
        warn.append(msg)
    return template.like(cq), ConeReport(hist, r, coverage, stagnated, cov_ok, warn)


def conformal_unscale(cq: SpaceTimePotential, c, c_min: float | None = None) -> SpaceTimePotential:
    """Pointwise division by ``c``; exact inverse of multiplication by ``c``."""
    if c is None:
        return cq.like(cq.values.copy())
    if isinstance(c, ConformalFactor):
        cmin = c.c_min if c_min is None else c_min
        cv = _c_values(c, cq)[None]
    elif callable(c):
        cmin = 0.0 if c_min is None else c_min
        cv = _c_values(c, cq)[None]
    else:
        cmin = 0.0 if c_min is None else c_min
        cv = np.asarray(c, dtype=float)
    if np.any(cv <= 0) or np.any(cv < cmin):
        raise GeometryError("conformal factor below c_min")
    return cq.like(cq.values / cv)


def conformal_scale(q: SpaceTimePotential, c) -> SpaceTimePotential:
    if c is None:
        return q.like(q.values.copy())
    cv = _c_values(c, q)[None] if callable(c) else np.asarray(c, dtype=float)
    return q.like(q.values * cv)


# ---------------------------------------------------------------------------
# Designed phantoms
# ---------------------------------------------------------------------------


def modulated_phantom(t0: float, x10: float, beta0: float, lam0: float, sigma_u: float, sigma_w: float,
                      xp_center, xp_width: float, amplitude: float = 1.0, phase: float = 0.0):
    """Anisotropic Gaussian wave packet in ``(t, x1)`` times a bump in ``x'``.

    Its ``(t, x1)`` spectrum sits at ``+-lam0 (beta0, 1)``, narrow across the
    direction of ``(beta0, 1)`` so that it fits inside the sampled cone.
    """
    nrm = math.sqrt(1 + beta0**2)
    k0 = lam0 * nrm
    xc = np.asarray(xp_center, dtype=float)

    def func(t, x1, xp):
        dt, dx = t - t0, x1 - x10
        u = (beta0 * dt + dx) / nrm
        w = (dt - beta0 * dx) / nrm
        env = np.exp(-0.5 * (u / sigma_u) ** 2 - 0.5 * (w / sigma_w) ** 2)
        bump = np.exp(-np.sum((np.asarray(xp) - xc) ** 2, axis=-1) / (2 * xp_width**2))
        return amplitude * env * np.cos(k0 * u + phase) * bump

    func.support = lambda t, x1, nsig=3.5: _ellipse_support(t, x1, t0, x10, beta0, sigma_u, sigma_w, nsig)
    return func


def _ellipse_support(t, x1, t0, x10, beta0, su, sw, nsig):
    nrm = math.sqrt(1 + beta0**2)
    T, X = np.meshgrid(t, x1, indexing="ij")
    u = (beta0 * (T - t0) + (X - x10)) / nrm
    w = ((T - t0) - beta0 * (X - x10)) / nrm
    return (np.abs(u) <= nsig * su) & (np.abs(w) <= nsig * sw)


def relative_error(a: SpaceTimePotential, b: SpaceTimePotential) -> float:
    return a.norm(a.values - b.values) / max(b.norm(), 1e-300)
