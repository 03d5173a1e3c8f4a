"""Batch front-end: ``beamlab <command> --config CFG.json --output DIR``.

Exit status: 0 success, 2 invalid configuration, 3 numerical failure,
4 a sweep assertion failed.  Artifacts are produced in a scratch directory
and copied to the output directory only when the run finishes, so a run
that fails validation leaves no files behind.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .beam import BeamParams, assemble_quasimode, quasimode_norm, residual_norm
from .errors import BeamlabError, NumericalFailure
from .geometry import generate_fan, load_manifold, trace_many
from .io import dump_json, write_csv
from .raytransform import RayBundle, ScalarField, forward_transform, invert_transform
from .recovery import (SpaceTimePotential, compute_slices, cone_reconstruct, conformal_unscale, data_consistency,
                       make_pairs, modulated_phantom, recover_slices_many, relative_error, synthesize_data)
from .verify import (concentration_test, eikonal_scaling, geodesic_chart, line_integral, norm_sweep, plot_script,
                     product_limit_test)

log = logging.getLogger("beamlab")

COMMANDS = ("trace", "fan", "transform", "invert", "beam", "sweep", "concentrate", "recover")
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ASSERT = 0, 2, 3, 4


class SweepFailure(Exception):
    """A sweep ran to completion but one of its assertions failed."""


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

_vec2 = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_complex = {"type": "object", "properties": {"re": {"type": "number"}, "im": {"type": "number"}},
            "required": ["re", "im"], "additionalProperties": False}
_posint = {"type": "integer", "minimum": 1}

_spatial = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["zero", "constant", "gaussian", "bump"]},
        "value": {"type": "number"},
        "center": _vec2,
        "width": {"type": "number", "exclusiveMinimum": 0},
        "radius": {"type": "number", "exclusiveMinimum": 0},
        "amplitude": {"type": "number"},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_spacetime = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["zero", "separable", "modulated"]},
        "t_center": {"type": "number"}, "t_width": {"type": "number", "exclusiveMinimum": 0},
        "x1_center": {"type": "number"}, "x1_width": {"type": "number", "exclusiveMinimum": 0},
        "xp": _spatial,
        "t0": {"type": "number"}, "x10": {"type": "number"}, "beta0": {"type": "number"},
        "lam0": {"type": "number"}, "sigma_u": {"type": "number", "exclusiveMinimum": 0},
        "sigma_w": {"type": "number", "exclusiveMinimum": 0}, "xp_center": _vec2,
        "xp_width": {"type": "number", "exclusiveMinimum": 0}, "amplitude": {"type": "number"},
        "phase": {"type": "number"},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_manifold = {
    "type": "object",
    "properties": {
        "metric_kind": {"enum": ["euclidean-disk", "hyperbolic-disk", "radial-herglotz", "custom-grid"]},
        "params": {"type": "object"},
        "conformal_factor": {"type": "object"},
    },
    "required": ["metric_kind"],
    "additionalProperties": False,
}

_beam_common = {
    "x0": _vec2, "direction": _vec2,
    "half_width": {"type": "number", "exclusiveMinimum": 0},
    "extension": {"type": "number", "minimum": 0},
    "trace_step": {"type": "number", "exclusiveMinimum": 0},
    "lam": {"type": "number"}, "beta": {"type": "number"},
    "delta": {"type": "number", "exclusiveMinimum": 0},
    "H0": _complex, "construction_only": {"type": "boolean"},
}
_fan_common = {"n_boundary": {"type": "integer", "minimum": 4}, "n_angles": {"type": "integer", "minimum": 2},
               "step": {"type": "number", "exclusiveMinimum": 0}}

PARAM_SCHEMAS = {
    "trace": {
        "rays": {"type": "array", "minItems": 1, "items": {
            "type": "object", "properties": {"x0": _vec2, "direction": _vec2},
            "required": ["x0", "direction"], "additionalProperties": False}},
        "step": {"type": "number", "exclusiveMinimum": 0},
        "max_len": {"type": "number", "exclusiveMinimum": 0},
    },
    "fan": dict(_fan_common),
    "transform": dict(_fan_common, phantom=_spatial, attenuation={"type": "number"},
                      grid={"type": "array", "items": _posint, "minItems": 2, "maxItems": 2}),
    "invert": dict(_fan_common, phantom=_spatial, attenuation={"type": "number"},
                   grid={"type": "array", "items": _posint, "minItems": 2, "maxItems": 2},
                   reg={"type": "number", "minimum": 0}, iters=_posint,
                   tol={"type": "number", "exclusiveMinimum": 0},
                   a_max={"type": "number", "exclusiveMinimum": 0},
                   row_scaling={"enum": ["none", "equilibrate"]}),
    "beam": dict(_beam_common, h={"type": "number"}, q=_spatial),
    "sweep": dict(_beam_common, hs={"type": "array", "items": {"type": "number"}, "minItems": 4}, q=_spatial,
                  eikonal_tau={"type": "number"}),
    "concentrate": dict(_beam_common, hs={"type": "array", "items": {"type": "number"}, "minItems": 4},
                        mode={"enum": ["concentration", "product"]}, psi=_spatial, potential=_spacetime,
                        T={"type": "number", "exclusiveMinimum": 0}, nt=_posint,
                        x1_range=_vec2, n1=_posint),
    "recover": {
        "potential": _spacetime, "potential_b": _spacetime,
        "T": {"type": "number", "exclusiveMinimum": 0}, "nt": _posint, "x1_range": _vec2, "n1": _posint,
        "xp_shape": {"type": "array", "items": _posint, "minItems": 2, "maxItems": 2},
        "lambdas": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "betas": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        **_fan_common,
        "reg": {"type": "number", "minimum": 0}, "iters": _posint,
        "a_max": {"type": "number", "exclusiveMinimum": 0},
        "cone_iters": _posint, "support_nsig": {"type": "number", "exclusiveMinimum": 0},
    },
}

_BEAM_DEFAULTS = {"extension": None, "trace_step": 0.01, "lam": 0.0, "beta": 0.8, "delta": 0.3,
                  "H0": {"re": 0.0, "im": 1.0}, "construction_only": False}

DEFAULTS = {
    "trace": {"step": 1e-3, "max_len": 20.0},
    "fan": {"n_boundary": 64, "n_angles": 32, "step": 0.01},
    "transform": {"n_boundary": 64, "n_angles": 32, "step": 0.01, "attenuation": 0.0, "grid": [64, 64],
                  "phantom": {"kind": "bump", "center": [0.1, -0.1], "radius": 0.6, "amplitude": 1.0}},
    "invert": {"n_boundary": 64, "n_angles": 32, "step": 0.01, "attenuation": 0.0, "grid": [64, 64],
               "phantom": {"kind": "bump", "center": [0.1, -0.1], "radius": 0.6, "amplitude": 1.0},
               "reg": 1e-4, "iters": 500, "tol": 1e-8, "a_max": 1.0, "row_scaling": "none"},
    "beam": dict(_BEAM_DEFAULTS, h=0.01, q={"kind": "zero"}),
    "sweep": dict(_BEAM_DEFAULTS, hs=[0.04, 0.02, 0.01, 0.005], q={"kind": "zero"}, eikonal_tau=None),
    "concentrate": dict(_BEAM_DEFAULTS, hs=[0.04, 0.02, 0.01, 0.005], mode="concentration",
                        psi={"kind": "constant", "value": 1.0}, potential=None,
                        T=8.0, nt=81, x1_range=[-4.0, 4.0], n1=81),
    "recover": {"potential_b": None, "T": 22.0, "nt": 111, "x1_range": [-10.0, 10.0], "n1": 101,
                "xp_shape": [32, 32], "lambdas": None, "betas": None, "n_boundary": 48, "n_angles": 24,
                "step": 0.02, "reg": 1e-6, "iters": 5000, "a_max": 7.0, "cone_iters": 200,
                "support_nsig": 3.5},
}
REQUIRED = {
    "beam": ["x0", "direction", "half_width"],
    "sweep": ["x0", "direction", "half_width"],
    "concentrate": ["x0", "direction", "half_width"],
    "recover": ["potential"],
}


def config_schema(command: str) -> dict:
    return {
        "type": "object",
        "properties": {
            "command": {"enum": list(COMMANDS)},
            "manifold": _manifold,
            "params": {"type": "object", "properties": PARAM_SCHEMAS[command],
                       "required": REQUIRED.get(command, []), "additionalProperties": False},
            "output_dir": {"type": "string"},
            "seed": {"type": "integer"},
        },
        "required": ["command", "manifold"],
        "additionalProperties": False,
    }


class ConfigError(ValueError):
    pass


def resolve_config(cfg: dict, command: str) -> dict:
    """Validate ``cfg`` for ``command`` and fill parameter defaults."""
    if not isinstance(cfg, dict):
        raise ConfigError("configuration must be a JSON object")
    if cfg.get("command") not in COMMANDS:
        raise ConfigError(f"'command' must be one of {', '.join(COMMANDS)}")
    if cfg["command"] != command:
        raise ConfigError(f"config is for command {cfg['command']!r}, not {command!r}")
    try:
        jsonschema.validate(cfg, config_schema(command))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    out = copy.deepcopy(cfg)
    params = copy.deepcopy(DEFAULTS.get(command, {}))
    params.update(out.get("params", {}))
    out["params"] = params
    out.setdefault("seed", 0)
    out["manifold"].setdefault("params", {})
    out["manifold"].setdefault("conformal_factor", {"kind": "constant", "value": 1.0})
    return out


# ---------------------------------------------------------------------------
# Functions from specs
# ---------------------------------------------------------------------------


def spatial_function(spec: dict | None):
    """Vectorised ``f(X)`` on points of shape ``(..., 2)``."""
    spec = spec or {"kind": "zero"}
    kind = spec["kind"]
    amp = float(spec.get("amplitude", 1.0))
    if kind == "zero":
        return lambda X: np.zeros(np.shape(X)[:-1])
    if kind == "constant":
        v = float(spec.get("value", 1.0))
        return lambda X: np.full(np.shape(X)[:-1], v)
    c = np.asarray(spec.get("center", [0.0, 0.0]), dtype=float)
    if kind == "gaussian":
        w = float(spec.get("width", 0.2))
        return lambda X: amp * np.exp(-np.sum((np.asarray(X) - c) ** 2, axis=-1) / (2 * w * w))
    if kind == "bump":
        R = float(spec.get("radius", 0.5))

        def bump(X):
            r2 = np.sum((np.asarray(X) - c) ** 2, axis=-1) / R**2
            out = np.zeros(r2.shape)
            ins = r2 < 1
            out[ins] = np.exp(1.0 - 1.0 / (1.0 - r2[ins]))
            return amp * out

        return bump
    raise ConfigError(f"unknown spatial function kind {kind!r}")


def spacetime_function(spec: dict | None):
    """Vectorised ``q(t, x1, x')`` with broadcasting."""
    spec = spec or {"kind": "zero"}
    kind = spec["kind"]
    if kind == "zero":
        return lambda t, x1, xp: np.zeros(np.broadcast_shapes(np.shape(t), np.shape(x1), np.shape(xp)[:-1]))
    if kind == "separable":
        tc, tw = float(spec.get("t_center", 0.0)), float(spec.get("t_width", 1.0))
        xc, xw = float(spec.get("x1_center", 0.0)), float(spec.get("x1_width", 1.0))
        fx = spatial_function(spec.get("xp", {"kind": "gaussian", "center": [0, 0], "width": 0.3}))
        amp = float(spec.get("amplitude", 1.0))

        def sep(t, x1, xp):
            return (amp * np.exp(-0.5 * ((t - tc) / tw) ** 2) * np.exp(-0.5 * ((x1 - xc) / xw) ** 2)
                    * fx(xp))

        return sep
    if kind == "modulated":
        keys = ("t0", "x10", "beta0", "lam0", "sigma_u", "sigma_w", "xp_center", "xp_width")
        missing = [k for k in keys if k not in spec]
        if missing:
            raise ConfigError(f"modulated potential is missing {', '.join(missing)}")
        return modulated_phantom(*(spec[k] for k in keys), amplitude=spec.get("amplitude", 1.0),
                                 phase=spec.get("phase", 0.0))
    raise ConfigError(f"unknown potential kind {kind!r}")


def _beam_params(p: dict, h: float) -> BeamParams:
    return BeamParams(h=h, lam=p["lam"], beta=p["beta"], delta=p["delta"],
                      H0=complex(p["H0"]["re"], p["H0"]["im"]), construction_only=p["construction_only"])


def _chart(m, p):
    return geodesic_chart(m, p["x0"], p["direction"], p["half_width"], p["extension"], p["trace_step"])


# ---------------------------------------------------------------------------
# Commands.  Each writes into ``out`` (a scratch directory) and returns a
# JSON-able summary.
# ---------------------------------------------------------------------------


def cmd_trace(m, p, out: Path, threads: int):
    pts = [m.inflow_point(r["x0"], r["direction"]) for r in p["rays"]]
    paths = trace_many(m, pts, p["step"], p["max_len"])
    rows = []
    for k, (pt, path) in enumerate(zip(pts, paths)):
        path.to_csv(out / f"geodesic_{k:03d}.csv")
        drift = float(np.max(np.abs(m.norm(path.x, path.v) - 1.0)))
        rows.append((str(k), pt.x[0], pt.x[1], pt.xi[0], pt.xi[1], path.exit_time, drift, path.tangency))
    write_csv(out / "trace.csv", ["ray", "x1", "x2", "xi1", "xi2", "tau_exit", "energy_drift", "tangency"], rows)
    return {"n_rays": len(rows), "tau_exit": [r[5] for r in rows]}


def cmd_fan(m, p, out: Path, threads: int):
    fan, params = generate_fan(m, p["n_boundary"], p["n_angles"])
    bundle = RayBundle(m, fan, p["step"], params=params)
    rows = []
    for (s, ang), pt, path in zip(params, fan, bundle.paths):
        rows.append((s, ang, pt.x[0], pt.x[1], pt.xi[0], pt.xi[1], path.exit_time, path.tangency))
    write_csv(out / "fan.csv", ["boundary_param", "angle", "x1", "x2", "xi1", "xi2", "tau_exit", "flag"], rows)
    return {"n_rays": len(rows), "n_ok": int(bundle.ok.sum())}


def _fan_bundle(m, p):
    fan, params = generate_fan(m, p["n_boundary"], p["n_angles"])
    return RayBundle(m, fan, p["step"], params=params)


def cmd_transform(m, p, out: Path, threads: int):
    bundle = _fan_bundle(m, p)
    f = ScalarField.on_manifold(m, tuple(p["grid"]), spatial_function(p["phantom"]))
    sino = forward_transform(m, f, p["attenuation"], None, bundle=bundle)
    sino.to_csv(out / "sinogram.csv")
    return {"n_rays": len(sino.values), "max_abs": float(np.max(np.abs(sino.values)))}


def cmd_invert(m, p, out: Path, threads: int):
    bundle = _fan_bundle(m, p)
    grid = ScalarField.on_manifold(m, tuple(p["grid"]))
    truth = ScalarField.on_manifold(m, tuple(p["grid"]), spatial_function(p["phantom"])).masked(m)
    sino = forward_transform(m, truth, p["attenuation"], None, bundle=bundle)
    sino.to_csv(out / "sinogram.csv")
    field_, rep = invert_transform(m, sino, grid, reg=p["reg"], iters=p["iters"], tol=p["tol"],
                                   a_max=p["a_max"], truth=truth, row_scaling=p["row_scaling"])
    field_.to_csv(out / "reconstruction.csv")
    rep.to_json(out / "inversion_report.json")
    return rep.to_dict()


def cmd_beam(m, p, out: Path, threads: int):
    chart = _chart(m, p)
    params = _beam_params(p, p["h"])
    mode = assemble_quasimode(chart, params)
    mode.to_csv(out / "quasimode.csv")
    chart.to_csv(out / "chart.csv")
    nv = quasimode_norm(mode)
    res = residual_norm(spatial_function(p["q"]), mode)
    summary = {"h": params.h, "geodesic_length": chart.length, "norm": nv, "residual": res,
               "min_imag_H": mode.riccati.min_imag_eig, "d": mode.d, "normalization": mode.normalization}
    dump_json(summary, out / "beam.json")
    return summary


def cmd_sweep(m, p, out: Path, threads: int):
    chart = _chart(m, p)
    base = _beam_params(p, p["hs"][0])
    norms, resid = norm_sweep(chart, base, p["hs"], q=spatial_function(p["q"]), threads=threads)
    eik = eikonal_scaling(chart, base, tau=p["eikonal_tau"])
    for name, rep in (("norm_sweep", norms), ("residual_sweep", resid), ("eikonal_scaling", eik)):
        rep.to_csv(out / f"{name}.csv")
        plot_script(f"{name}.csv", out / f"{name}.gp", rep.label, xlabel=rep.parameter)
    report = {"norm": norms.to_dict(), "residual": resid.to_dict(), "eikonal": eik.to_dict(),
              "pass": bool(norms.passed and resid.passed and eik.passed)}
    dump_json(report, out / "sweep.json")
    if not report["pass"]:
        raise SweepFailure("sweep assertion failed: " + ", ".join(
            r.label for r in (norms, resid, eik) if not r.passed))
    return {k: report[k]["fitted_slope"] for k in ("norm", "residual", "eikonal")}


def cmd_concentrate(m, p, out: Path, threads: int):
    chart = _chart(m, p)
    base = _beam_params(p, p["hs"][0])
    if p["mode"] == "product":
        if p["potential"] is None:
            raise ConfigError("product mode needs params.potential")
        t = np.linspace(0.0, p["T"], p["nt"])
        x1 = np.linspace(p["x1_range"][0], p["x1_range"][1], p["n1"])
        c = m.conformal_factor if not m.conformal_factor.is_constant or m.conformal_factor.c_min != 1 else None
        rep = product_limit_test(chart, base, p["hs"], spacetime_function(p["potential"]), t, x1, c=c,
                                 threads=threads)
    else:
        psi = spatial_function(p["psi"])
        rep = concentration_test(chart, base, p["hs"], psi, limit=line_integral(chart, psi, base.lam, base.beta),
                                 threads=threads)
    rep.to_csv(out / "concentration.csv")
    rep.to_json(out / "concentration.json")
    plot_script("concentration.csv", out / "concentration.gp", rep.label, xlabel="h")
    if not rep.passed:
        raise SweepFailure(f"{rep.label} assertion failed (final error {rep.extra['final_error']:.3g})")
    return {"final_error": rep.extra["final_error"], "limit": rep.extra["limit"]}


def recovery_pipeline(m, qs, support, p, threads: int = 1):
    """Slices, transform data, per-pair inversion (batched over ``qs``), cone
    extrapolation and unscaling.  Returns ``[(q_rec, cone_report, slices, gap)]``
    where ``gap`` is the data-versus-direct-quadrature consistency gap."""
    cf = m.conformal_factor
    c = None if cf.is_constant and cf.c_min == 1 else cf
    fan, params = generate_fan(m, p["n_boundary"], p["n_angles"])
    bundle = RayBundle(m, fan, p["step"], params=params)
    grid = ScalarField.on_manifold(m, tuple(p["xp_shape"]))
    slice_sets = [compute_slices(q, c, p["lambdas"], p["betas"]) for q in qs]
    data = [synthesize_data(q, c, S, bundle, a_max=p["a_max"]) for q, S in zip(qs, slice_sets)]
    recs = recover_slices_many(data, slice_sets[0], grid, reg=p["reg"], iters=p["iters"], a_max=p["a_max"],
                               threads=threads)
    out = []
    for q, S, d, R in zip(qs, slice_sets, data, recs):
        cq, rep = cone_reconstruct(R, q, support, iters=p["cone_iters"])
        out.append((conformal_unscale(cq, c), rep, R, data_consistency(q, c, S, d)))
    return out


def cmd_recover(m, p, out: Path, threads: int):
    if p["lambdas"] is None:
        p["lambdas"] = [s * v for s in (1, -1) for v in np.arange(0.5, 8.01, 0.5).tolist()]
    if p["betas"] is None:
        p["betas"] = [round(0.60 + 0.05 * k, 2) for k in range(8)]
    make_pairs(p["lambdas"], p["betas"])
    specs = [sp for sp in (p["potential"], p["potential_b"]) if sp is not None]
    funcs = [spacetime_function(sp) for sp in specs]
    qs = [SpaceTimePotential.from_function(f, p["T"], p["nt"], p["x1_range"], p["n1"], m, p["xp_shape"])
          for f in funcs]
    support = np.zeros((p["nt"], p["n1"]), dtype=bool)
    for f in funcs:
        if hasattr(f, "support"):
            support |= f.support(qs[0].t, qs[0].x1, p["support_nsig"])
        else:
            support[:] = True
    results = recovery_pipeline(m, qs, support, p, threads)
    recs = [r[0] for r in results]
    summary = {"reconstruction_error": [relative_error(r, q) for r, q in zip(recs, qs)],
               "cone": results[0][1].to_dict(),
               "slice_residuals": results[0][2].residuals,
               "data_consistency_gap": [r[3] for r in results]}
    if len(qs) == 2:
        diff = qs[0].norm(recs[0].values - recs[1].values)
        ref = qs[0].norm(qs[0].values - qs[1].values)
        summary["gap_ratio"] = diff / ref if ref > 0 else math.nan
    rec, truth = recs[0], qs[0]
    xp = rec.xp_nodes()
    it = len(rec.t) // 2
    rows = [(rec.t[it], x1, xp[ix, iy, 0], xp[ix, iy, 1], rec.values[it, j, ix, iy], truth.values[it, j, ix, iy])
            for j, x1 in enumerate(rec.x1) for ix in range(xp.shape[0]) for iy in range(xp.shape[1])]
    write_csv(out / "reconstruction_tmid.csv", ["t", "x1", "xp1", "xp2", "recovered", "truth"], rows)
    jx, jy = xp.shape[0] // 2, xp.shape[1] // 2
    rows = [(t, x1, rec.values[i, j, jx, jy], truth.values[i, j, jx, jy])
            for i, t in enumerate(rec.t) for j, x1 in enumerate(rec.x1)]
    write_csv(out / "reconstruction_xpmid.csv", ["t", "x1", "recovered", "truth"], rows)
    plot_script("reconstruction_xpmid.csv", out / "reconstruction_xpmid.gp", "recovered q, x' at the centre",
                xlabel="t", ylabel="x1", logscale=False, columns=(1, 2, 3))
    dump_json(summary, out / "recovery_report.json")
    return summary


HANDLERS = {"trace": cmd_trace, "fan": cmd_fan, "transform": cmd_transform, "invert": cmd_invert,
            "beam": cmd_beam, "sweep": cmd_sweep, "concentrate": cmd_concentrate, "recover": cmd_recover}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def bundled_configs():
    root = resources.files("beamlab") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(ref: str) -> dict:
    """Read a config from a path, or by name from the bundled configs."""
    path = Path(ref)
    if not path.exists():
        name = ref[:-5] if ref.endswith(".json") else ref
        cand = resources.files("beamlab") / "configs" / f"{name}.json"
        if not cand.is_file():
            raise ConfigError(f"no config file {ref!r} and no bundled config of that name")
        text = cand.read_text()
    else:
        text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None


def _threads(arg):
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("BEAMLAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"BEAMLAB_THREADS must be an integer, got {env!r}") from None
    return 1


def run(cfg: dict, command: str, output: str | None = None, threads: int = 1) -> dict:
    """Validate, execute and publish one experiment; raises on failure."""
    cfg = resolve_config(cfg, command)
    out_dir = Path(output or cfg.get("output_dir") or f"beamlab-{command}")
    try:
        m = load_manifold(cfg["manifold"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"manifold: {exc}") from None
    with tempfile.TemporaryDirectory() as tmp:
        scratch = Path(tmp)
        dump_json(cfg, scratch / "resolved_config.json")
        failure = None
        try:
            summary = HANDLERS[command](m, cfg["params"], scratch, threads)
        except SweepFailure as exc:
            failure, summary = exc, None
        out_dir.mkdir(parents=True, exist_ok=True)
        for f in sorted(scratch.iterdir()):
            shutil.copyfile(f, out_dir / f.name)
    if failure is not None:
        raise failure
    return summary


def build_parser():
    ap = argparse.ArgumentParser(prog="beamlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", required=True, help="config path or bundled config name")
        sp.add_argument("--output", help="output directory (overrides output_dir)")
        sp.add_argument("--threads", type=int, help="worker threads (default: $BEAMLAB_THREADS or 1)")
        sp.add_argument("--verbose", action="store_true")
    sub.add_parser("configs", help="list bundled configs")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "configs":
        print("\n".join(bundled_configs()))
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        summary = run(cfg, args.command, args.output, _threads(args.threads))
    except (ConfigError, ValueError) as exc:
        print(f"beamlab: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"beamlab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SweepFailure as exc:
        print(f"beamlab: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except BeamlabError as exc:
        print(f"beamlab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("summary: %s", json.dumps(summary, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
