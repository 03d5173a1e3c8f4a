"""Convergence harness for the beam construction and its limits.

Every check produces a :class:`SweepReport` holding the raw samples, so any
asserted slope can be recomputed from the stored data.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gamma as gamma_fn

from .beam import BeamParams, assemble_quasimode, quasimode_norm, residual_norm, residual_terms, tube_grid
from .errors import ArgumentError, DataError
from .fermi import FermiChart, build_fermi_chart, riccati_driver
from .geometry import TransversalManifold, trace_geodesic
from .io import dump_json, write_csv

NORM_SLOPE_BOUNDS = (-0.1, 0.1)
RESIDUAL_SLOPE_BOUNDS = (1.4, 2.1)
EIKONAL_MIN_SLOPE = 2.9
FLAT_EIKONAL_TOL = 1e-12
CONCENTRATION_TOL = 0.05
OFF_GEODESIC_TOL = 1e-6
CONSISTENCY_TOL = 0.25


def fit_slope(samples):
    """Least-squares line through ``(log value, log measurement)``."""
    arr = np.asarray(samples, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 2:
        raise DataError("samples must be a list of (value, measurement) pairs")
    if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
        raise DataError("log-log fit needs positive finite values and measurements")
    X = np.column_stack([np.log(arr[:, 0]), np.ones(len(arr))])
    coef, *_ = np.linalg.lstsq(X, np.log(arr[:, 1]), rcond=None)
    return float(coef[0]), float(coef[1])


@dataclass
class SweepReport:
    parameter: str
    samples: list
    fitted_slope: float | None
    fitted_intercept: float | None
    bounds: tuple | None
    passed: bool
    label: str = ""
    extra: dict = field(default_factory=dict)

    def recompute(self):
        """Refit from the stored samples; returns ``(slope, intercept)``."""
        return fit_slope(self.samples)

    def to_dict(self):
        return {
            "label": self.label,
            "parameter": self.parameter,
            "samples": [[float(v), float(m)] for v, m in self.samples],
            "fitted_slope": self.fitted_slope,
            "fitted_intercept": self.fitted_intercept,
            "bounds": None if self.bounds is None else [float(b) for b in self.bounds],
            "pass": bool(self.passed),
            "extra": self.extra,
        }

    def to_json(self, path):
        dump_json(self.to_dict(), path)

    def to_csv(self, path):
        """Columns ``(parameter, measurement, slope_so_far)``."""
        rows = []
        for k, (v, m) in enumerate(self.samples):
            so_far = float("nan")
            if k >= 1 and all(s[1] > 0 for s in self.samples[: k + 1]):
                so_far = fit_slope(self.samples[: k + 1])[0]
            rows.append((v, m, so_far))
        write_csv(path, [self.parameter, "measurement", "slope_so_far"], rows)


def make_report(parameter: str, samples, bounds=None, label: str = "", fit: bool = True,
                passed: bool | None = None, extra: dict | None = None) -> SweepReport:
    """Validate ordering, fit the slope (when ``fit``) and judge against ``bounds``."""
    samples = [(float(v), float(m)) for v, m in samples]
    vals = np.array([v for v, _ in samples])
    if np.any(np.diff(vals) >= 0):
        raise DataError(f"samples must be strictly decreasing in {parameter}")
    slope = intercept = None
    if fit:
        if len(samples) < 4:
            raise DataError("a slope fit needs at least 4 samples")
        slope, intercept = fit_slope(samples)
    if passed is None:
        passed = True
        if bounds is not None and slope is not None:
            passed = bounds[0] <= slope <= bounds[1]
    return SweepReport(parameter, samples, slope, intercept, None if bounds is None else tuple(bounds),
                       bool(passed), label, dict(extra or {}))


def cross_h_consistency(report: SweepReport, tol: float = CONSISTENCY_TOL):
    """Ratios of adjacent measurements against ``(v_k+1 / v_k)^slope``.

    Returns ``(ok, deviations)`` with relative deviations per adjacent pair.
    """
    s = report.fitted_slope if report.fitted_slope is not None else report.recompute()[0]
    devs = []
    for (v0, m0), (v1, m1) in zip(report.samples[:-1], report.samples[1:]):
        predicted = (v1 / v0) ** s
        devs.append(abs((m1 / m0) / predicted - 1.0))
    return all(d <= tol for d in devs), devs


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# Beam sweeps
# ---------------------------------------------------------------------------


def geodesic_chart(m: TransversalManifold, x0, direction, half_width: float, extension: float | None = None,
                   step: float = 0.01, max_len: float = 20.0) -> FermiChart:
    """Trace the geodesic entering at ``x0`` along ``direction`` and build its chart."""
    path = trace_geodesic(m, m.inflow_point(x0, direction), step, max_len)
    return build_fermi_chart(m, path, half_width, extension=extension)


def _tube(chart: FermiChart, p: BeamParams):
    return tube_grid(chart, math.sqrt(p.h) / 12.0, min(0.5 * p.delta, chart.half_width))


def norm_sweep(chart: FermiChart, base: BeamParams, hs, q=None, threads: int = 1):
    """Quasimode norms and conjugated residuals over ``hs``.

    Returns ``(norm_report, residual_report)`` judged against the bounds
    ``[-0.1, 0.1]`` and ``[1.4, 2.1]``.
    """
    hs = [float(h) for h in hs]
    if len(hs) < 4:
        raise ArgumentError("an h-sweep needs at least 4 values")

    def one(h):
        mode = assemble_quasimode(chart, replace(base, h=h))
        tg = _tube(chart, mode.params)
        return quasimode_norm(mode, tg=tg), residual_norm(q, mode, tg=tg), mode.riccati.min_imag_eig

    res = _map(one, hs, threads)
    norms = make_report("h", [(h, r[0]) for h, r in zip(hs, res)], NORM_SLOPE_BOUNDS, "quasimode norm")
    resid = make_report("h", [(h, r[1]) for h, r in zip(hs, res)], RESIDUAL_SLOPE_BOUNDS, "conjugated residual")
    ok, devs = cross_h_consistency(resid)
    resid.extra.update({"consistency_ok": ok, "consistency_deviation": devs,
                        "min_imag_H": [r[2] for r in res]})
    return norms, resid


def zeroth_order_gap(chart: FermiChart, params: BeamParams, q=None):
    """``(|r(q + 1) - r(q)|, h^2 ||v_s||)`` at one ``h``."""
    mode = assemble_quasimode(chart, params)
    tg = _tube(chart, params)
    q0 = q if q is not None else (lambda X: np.zeros(np.shape(X)[:-1]))
    r0 = residual_norm(q0, mode, tg=tg)
    r1 = residual_norm(lambda X: q0(X) + 1.0, mode, tg=tg)
    return abs(r1 - r0), params.h**2 * quasimode_norm(mode, tg=tg)


def eikonal_defect(mode, tau, ys, quartic_free: bool = False):
    """``|<grad Theta, grad Theta>_g0 - (1 - beta^2)|`` at ``(tau, y)``.

    Derivatives are analytic: ``d_tau Theta = a (1 + H' y^2 / 2)`` with
    ``H' = F - H^2`` and ``d_y Theta = a H y``; the metric comes from the
    chart.  With ``quartic_free`` the exact ``y^4`` contribution of the
    ``tau`` derivative, ``g^tautau a^2 H'^2 y^4 / 4``, is removed.
    """
    ys = np.asarray(ys, dtype=float)
    taus = np.full(ys.shape, float(tau))
    a = mode.params.a
    ric = mode.riccati
    H = ric.scalar(taus)
    F = riccati_driver(mode.chart, taus)[..., 0, 0]
    Hdot = F - H**2
    G = mode.chart.metric_fermi(taus, ys)
    Gi = np.linalg.inv(G)
    th_t = a * (1.0 + 0.5 * Hdot * ys**2)
    th_y = a * H * ys
    val = Gi[..., 0, 0] * th_t**2 + 2 * Gi[..., 0, 1] * th_t * th_y + Gi[..., 1, 1] * th_y**2 - a**2
    if quartic_free:
        val = val - Gi[..., 0, 0] * (0.5 * a * Hdot * ys**2) ** 2
    return np.abs(val)


def eikonal_scaling(chart: FermiChart, params: BeamParams, tau: float | None = None, ys=None) -> SweepReport:
    """Fitted slope of the eikonal defect in ``|y|`` (asserted ``>= 2.9``)."""
    mode = assemble_quasimode(chart, params)
    if tau is None:
        tau = 0.5 * chart.length
    # chart nodes carry the integrated frame exactly (no interpolation error)
    tau = float(chart.tau[np.argmin(np.abs(chart.tau - tau))])
    ys = np.geomspace(1e-1, 1e-3, 9) if ys is None else np.asarray(ys, dtype=float)
    d = eikonal_defect(mode, tau, ys)
    flat_like = bool(np.max(d) <= FLAT_EIKONAL_TOL)
    rep = make_report("|y|", list(zip(ys, np.maximum(d, 1e-300))), (EIKONAL_MIN_SLOPE, math.inf),
                      "eikonal defect", extra={"tau": float(tau), "max_defect": float(np.max(d)),
                                               "below_flat_tolerance": flat_like})
    return rep


def phase_lower_bound(chart: FermiChart, params: BeamParams, n_tau: int = 41, ys=None):
    """Fitted ``d`` in ``Im Theta >= d y^2`` against ``0.9 a min Im H / 2``."""
    mode = assemble_quasimode(chart, params)
    ys = np.linspace(-0.5 * params.delta, 0.5 * params.delta, 41) if ys is None else np.asarray(ys)
    ys = ys[ys != 0]
    taus = np.linspace(0.0, chart.length, n_tau)
    T, Y = np.meshgrid(taus, ys, indexing="ij")
    d_fit = float(np.min(mode.theta(T, Y).imag / Y**2))
    bound = 0.9 * params.a * mode.riccati.min_imag_eig / 2.0
    return {"d_fit": d_fit, "bound": bound, "pass": d_fit >= bound}


def transport_on_geodesic(chart: FermiChart, params: BeamParams):
    """Max over interior tau of the transport bracket at ``y = 0``, relative to ``|b0|``."""
    mode = assemble_quasimode(chart, params)
    tg = _tube(chart, params)
    _, _, tr, _, _ = residual_terms(None, mode, tg=tg)
    j0 = int(np.argmin(np.abs(tg.y)))
    amp = params.h ** -0.25 * np.abs(mode.b0)
    row = np.abs(tr[:, j0]) / amp
    inside = (tg.tau >= 0) & (tg.tau <= chart.length) & np.isfinite(row)
    return float(np.max(row[inside]))


def gaussian_moments(d: float, hs, delta: float, ks=(0, 1, 3), n: int = 20001):
    """``||h^(-1/4) |y|^k exp(-(d/h) y^2)||_{L2(|y| <= delta/2)} / h^(k/2)`` over ``hs``.

    Each ratio is compared with its ``h -> 0`` limit
    ``sqrt(Gamma(k + 1/2) / (2d)^(k + 1/2))``; the check passes when every
    ratio stays within a factor 2 of it.
    """
    if d <= 0:
        raise ArgumentError("d must be positive")
    y = np.linspace(-0.5 * delta, 0.5 * delta, n)
    out = {}
    ok = True
    for k in ks:
        limit = math.sqrt(gamma_fn(k + 0.5) / (2 * d) ** (k + 0.5))
        ratios = []
        for h in hs:
            f2 = h**-0.5 * np.abs(y) ** (2 * k) * np.exp(-2 * d * y**2 / h)
            ratios.append(math.sqrt(np.trapezoid(f2, y)) / h ** (k / 2))
        rel = [r / limit for r in ratios]
        ok = ok and all(0.5 <= r <= 2.0 for r in rel)
        out[str(k)] = {"ratios": ratios, "limit": limit}
    out["pass"] = ok
    return out


# ---------------------------------------------------------------------------
# Concentration and product limits
# ---------------------------------------------------------------------------


def line_integral(chart: FermiChart, func, lam: float, beta: float, n: int = 256) -> complex:
    """``int_0^L exp(-2 sqrt(1 - beta^2) lam tau) func(gamma(tau)) dtau`` (Gauss-Legendre)."""
    L = chart.length
    g, w = np.polynomial.legendre.leggauss(n)
    tau = 0.5 * L * (g + 1)
    a = math.sqrt(1 - beta * beta)
    vals = np.asarray(func(chart.gamma(tau)))
    return complex(np.sum(0.5 * L * w * np.exp(-2 * a * lam * tau) * vals))


def concentrated_integral(chart: FermiChart, params: BeamParams, func, cutoff_rel: float = 1e-16):
    """``int_M0 |v_s|^2 func dV_g0`` by tube quadrature.

    ``func`` is evaluated only where ``|v_s|^2`` exceeds ``cutoff_rel`` times
    its maximum; elsewhere the product is negligible.
    """
    mode = assemble_quasimode(chart, params)
    tg = _tube(chart, params)
    T, Y = np.meshgrid(tg.tau, tg.y, indexing="ij")
    w = mode.modulus_sq_fermi(T, Y)
    keep = w > cutoff_rel * np.max(w)
    vals = np.zeros(w.shape, dtype=complex)
    vals[keep] = np.asarray(func(tg.X[keep]))
    res = tg.integrate(w * vals)
    return complex(res)


def concentration_test(chart: FermiChart, base: BeamParams, hs, psi, limit: complex | None = None,
                       threads: int = 1, label: str = "concentration") -> SweepReport:
    """``|int |v_s|^2 psi dV - int_0^L exp(-2 a lam tau) psi(gamma) dtau|`` per ``h``.

    Passes when the error decreases monotonically and the relative error at
    the smallest ``h`` is at most 5%.  A zero limit switches to the absolute
    criterion ``|measured| <= 1e-6`` at the smallest ``h``.
    """
    hs = [float(h) for h in hs]
    if limit is None:
        limit = line_integral(chart, psi, base.lam, base.beta)
    vals = _map(lambda h: concentrated_integral(chart, replace(base, h=h), psi), hs, threads)
    errs = [abs(v - limit) for v in vals]
    monotone = all(e1 < e0 for e0, e1 in zip(errs[:-1], errs[1:]))
    if abs(limit) > 0:
        final = errs[-1] / abs(limit)
        ok = monotone and final <= CONCENTRATION_TOL
    else:
        final = errs[-1]
        ok = final <= OFF_GEODESIC_TOL
    fit = len(hs) >= 4 and all(e > 0 for e in errs)
    return make_report("h", list(zip(hs, errs)), None, label, fit=fit, passed=ok,
                       extra={"limit": limit, "values": vals, "monotone": monotone, "final_error": final})


def product_limit_test(chart: FermiChart, base: BeamParams, hs, func, t, x1, c=None,
                       threads: int = 1) -> SweepReport:
    """Compare ``int_M0 |v_s|^2 f(x', beta, 2 lam) dV_g0`` with
    ``int_0^L exp(-2 a lam tau) f(gamma(tau), beta, 2 lam) dtau``.

    ``f`` is the ``(t, x1)`` Fourier integral of ``c q`` with ``q = func(t, x1, x')``
    (zero extended outside the sampled box), evaluated by the trapezoid rule
    on the nodes ``t`` and ``x1``.
    """
    from .recovery import slice_values

    t = np.asarray(t, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    lam2 = 2.0 * base.lam

    def f(xp):
        return slice_values(func, c, lam2, base.beta, t, x1, xp)

    limit = line_integral(chart, f, base.lam, base.beta)
    return concentration_test(chart, base, hs, f, limit=limit, threads=threads, label="product limit")


# ---------------------------------------------------------------------------
# Plot scripts
# ---------------------------------------------------------------------------


def plot_script(csv_path: str, out_path: str, title: str, xlabel: str = "h", ylabel: str = "measurement",
                logscale: bool = True, columns=(1, 2)) -> str:
    """Write a gnuplot command file plotting ``columns`` of ``csv_path``
    (two columns: a line plot; three: a colour map)."""
    lines = [
        "set datafile separator ','",
        "set key autotitle columnhead",
        f"set title {title!r}",
        f"set xlabel {xlabel!r}",
        f"set ylabel {ylabel!r}",
    ]
    if logscale:
        lines.append("set logscale xy")
    # relative image name so the script does not depend on where it was written
    png = os.path.basename(str(out_path)).rsplit(".", 1)[0] + ".png"
    lines += ["set terminal pngcairo size 800,600", f"set output {png!r}"]
    using = ":".join(str(c) for c in columns)
    if len(columns) == 3:
        lines += ["set view map", f"splot {str(csv_path)!r} using {using} with points palette pointsize 0.5"]
    else:
        lines.append(f"plot {str(csv_path)!r} using {using} with linespoints")
    text = "\n".join(lines) + "\n"
    with open(out_path, "w") as fh:
        fh.write(text)
    return text
