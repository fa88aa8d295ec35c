"""Command-line interface: simulate | transform | symbols | identity-check |
reconstruct | report.

Configuration is a single JSON document; command-line flags override file
values. Exit codes: 0 success, 1 config/input error, 2 partial scientific
failure (halted reconstruction, failed structure checks).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import datafiles, svgplot
from .errors import DomainError, MetricError


DEFAULTS = {
    "seed": 0,
    "output_dir": "out",
    "metric": {"family": "herglotz", "a": 0.2, "dim": 2},
    "sampling": {"n_points": 10, "n_dirs": 10, "aperture": 1.25},
    "family": {"x_levels": [0.06, 0.1, 0.14, 0.18, 0.22], "n_y": 24,
               "n_lambda": 10, "C2": 1.0, "band_depth": 0.25},
    "localizer": {"kind": "bump", "width": 1.0},
    "digamma": 1.0,
    "x_min": 0.02,
    "tolerances": {"ellipticity_floor": 1e-6, "parity_ratio_max": 0.05,
                   "phase_spread_max": 0.05},
    "identity": {"n_samples": 20, "order": 96, "families": ["herglotz-gauss"]},
    "reconstruct": {
        "diffeo": {"centers": [[0.3, 0.1], [-0.15, -0.25]],
                   "radii": [0.42, 0.45],
                   "amplitudes": [[0.025, -0.02], [-0.02, 0.018]]},
        "levels": [0.42, 0.125], "n_levels": 8, "n_y": 256, "t_nodes": 31,
        "half_width": 0.07, "rays_per_layer": 48, "ridge": 1e-4,
        "error_threshold": 0.05, "invert_layers": [],
    },
}


def _deep_update(base, extra):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def load_config(path=None, overrides=None):
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        with open(path) as f:
            _deep_update(cfg, json.load(f))
    if overrides:
        _deep_update(cfg, overrides)
    return cfg


def build_metric(spec):
    from . import geometry as geo

    dim = int(spec.get("dim", 2))
    fam = spec.get("family", "herglotz")
    if "grid_file" in spec and spec["grid_file"]:
        return datafiles.load_grid_metric(spec["grid_file"])
    if fam == "euclidean":
        return geo.EuclideanMetric(dim)
    if fam == "herglotz":
        return geo.ConformalMetric(geo.herglotz_profile(spec.get("a", 0.2)), dim)
    if fam == "gaussian":
        prof = geo.gaussian_speed_profile(spec.get("amp", 0.3),
                                          spec.get("sigma", 0.4))
        return geo.ConformalMetric(prof, dim)
    if fam == "exponential":
        return geo.ConformalMetric(geo.exponential_profile(spec.get("b", 0.4)), dim)
    raise ValueError(f"unknown metric family {fam!r}")


def _ensure_outdir(cfg):
    out = cfg["output_dir"]
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg):
    from .flow import FanSpec, lens_dataset

    out = _ensure_outdir(cfg)
    metric = build_metric(cfg["metric"])
    samp = cfg["sampling"]
    spec = FanSpec(n_points=int(samp["n_points"]), n_dirs=int(samp["n_dirs"]),
                   aperture=float(samp["aperture"]), dim=metric.dim)
    records = lens_dataset(metric, spec)
    prefix = os.path.join(out, "lens_dataset")
    datafiles.save_lens_dataset(prefix, records, metric=metric,
                                sampling=vars(spec),
                                tolerances=cfg["tolerances"])
    n_trapped = sum(1 for r in records if r.status == "trapped")
    n_err = sum(1 for r in records if r.status not in ("ok", "trapped"))
    print(f"simulate: {len(records)} rays -> {prefix}.csv "
          f"({n_trapped} trapped, {n_err} failed)")
    return 0


def cmd_transform(cfg):
    from . import tensorcalc as tc
    from . import xray as xr

    out = _ensure_outdir(cfg)
    metric = build_metric(cfg["metric"])
    fam = cfg["family"]
    geomband = xr.SphereBandGeometry(dim=metric.dim, R_ref=1.0,
                                     c=float(fam["band_depth"]))
    family = xr.RayFamily(metric, geomband, np.asarray(fam["x_levels"], float),
                          n_y=int(fam["n_y"]), n_lambda=int(fam["n_lambda"]),
                          C2=float(fam["C2"]))
    loc = xr.Localizer(cfg["localizer"]["kind"], cfg["localizer"]["width"])
    fspec = cfg.get("field", {"center": [0.85, 0.0], "radius": 0.1, "amp": 1.0})
    f = tc.bump_scalar_field(fspec["center"], fspec["radius"], fspec["amp"],
                             metric.dim)
    res = xr.normal_operator(0, f, metric, family, loc,
                             digamma=float(cfg["digamma"]),
                             x_min=float(cfg["x_min"]))
    prefix = os.path.join(out, "normal_operator_output")
    axes = [family.x_levels, family.y_axes[0]]
    datafiles.save_field_grid(prefix, axes, res.values, rank=0,
                              chart_id="band-grid", mask=res.mask)
    print(f"transform: N_0 field on {res.values.shape} grid -> {prefix}.csv")
    return 0


def cmd_symbols(cfg):
    from . import symbols as sym

    out = _ensure_outdir(cfg)
    tol = cfg["tolerances"]
    sc = sym.StructureConfig(
        ellipticity_floor=float(tol.get("ellipticity_floor", 1e-6)),
        parity_ratio_max=float(tol.get("parity_ratio_max", 0.05)),
        phase_spread_max=float(tol.get("phase_spread_max", 0.05)),
    )
    if "grid" in cfg:
        grid = cfg["grid"]
        sc.digammas = tuple(grid.get("digammas", sc.digammas))
        sc.xis = tuple(grid.get("xis", sc.xis))
        sc.etas = tuple(grid.get("etas", sc.etas))
    report = sym.structure_report(sc)
    sym.save_report(report, os.path.join(out, "symbol_report.json"),
                    os.path.join(out, "symbol_report.csv"))
    ok = report["all_passed"]
    n = len(report["rows"])
    print(f"symbols: {n} grid points, decay slope "
          f"{report['digamma_decay_slope']:.3f}, "
          f"{'all checks passed' if ok else 'CHECKS FAILED'}")
    return 0 if ok else 2


def cmd_identity_check(cfg):
    from . import geometry as geo
    from . import rigidity as rg
    from .flow import unit_phase_point

    _ensure_outdir(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))
    ident = cfg["identity"]
    n_samples = int(ident["n_samples"])
    g = build_metric(cfg["metric"])
    gh = build_metric(cfg.get("metric_hat",
                              {"family": "gaussian", "amp": 0.25, "sigma": 0.45}))
    pair = rg.MetricPair(g, gh)
    samples = []
    for _ in range(n_samples):
        b = rng.uniform(0, 2 * np.pi)
        a = rng.uniform(-1.1, 1.1)
        p = np.array([np.cos(b), np.sin(b)])
        v = np.cos(a) * (-p) + np.sin(a) * np.array([-np.sin(b), np.cos(b)])
        z = unit_phase_point(g, p, v=v)
        t = rng.uniform(0.3, 1.4)
        samples.append((z, t))
    res = rg.pseudolin_identity_check_batch(pair, samples,
                                            order=int(ident["order"]))
    print(f"identity-check: {n_samples} samples, max residual "
          f"{res.max():.3e}, median {np.median(res):.3e}")
    return 0 if res.max() < 1e-5 else 2


def cmd_reconstruct(cfg):
    from . import geometry as geo
    from . import rigidity as rg

    out = _ensure_outdir(cfg)
    rc = cfg["reconstruct"]
    g = build_metric(cfg["metric"])
    diffeo = geo.BumpDiffeo(
        g.dim, centers=rc["diffeo"]["centers"], radii=rc["diffeo"]["radii"],
        amplitudes=rc["diffeo"]["amplitudes"],
    )
    pair = rg.pullback_pair(g, diffeo)
    f = geo.radius_squared_field(dim=g.dim)
    fol = rg.foliation_from_convex(f, g, tuple(rc["levels"]),
                                   n_levels=int(rc["n_levels"]))
    state = rg.layer_strip(
        pair, fol, n_y=int(rc["n_y"]), t_nodes=int(rc["t_nodes"]),
        half_width=float(rc["half_width"]),
        rays_per_layer=int(rc["rays_per_layer"]), ridge=float(rc["ridge"]),
        error_threshold=float(rc["error_threshold"]),
        invert=bool(rc.get("invert", True)),
    )
    datafiles.save_manifest(os.path.join(out, "reconstruction.json"),
                            state, fol, config=rc)
    # recovered metric of the deepest completed layer in the grid format
    if state.recovered:
        t_grid, ys, h_g, h_h = state.recovered[-1]
        samples = np.zeros(h_h.shape + (2, 2))
        samples[..., 0, 0] = 1.0
        samples[..., 1, 1] = h_h
        datafiles.save_grid_metric(os.path.join(out, "recovered_metric"),
                                   [t_grid, ys], samples,
                                   meta={"chart": "collar(t,y)",
                                         "layer_level": state.layers[-1].level})
    radii = [l.radius for l in state.layers]
    errs = [max(l.sup_rel_metric_error, 1e-18) for l in state.layers]
    svgplot.line_plot(os.path.join(out, "layer_errors.svg"), radii, errs,
                      title="per-layer sup relative metric error",
                      xlabel="layer radius", ylabel="log10 error", logy=True)
    done = state.halt_reason == "completed"
    print(f"reconstruct: {len(state.layers)} layers, halt={state.halt_reason!r}, "
          f"max error {state.max_metric_error():.3e}, "
          f"boundary diffeo error {state.boundary_diffeo_error:.2e}")
    return 0 if done else 2


def cmd_report(cfg):
    """Summarize a dataset or reconstruction manifest already on disk."""
    out = _ensure_outdir(cfg)
    target = cfg.get("input", os.path.join(out, "reconstruction.json"))
    if not os.path.exists(target):
        print(f"report: no such input {target}", file=sys.stderr)
        return 1
    if target.endswith(".json"):
        with open(target) as f:
            doc = json.load(f)
        if "layers" in doc:
            print(f"report: reconstruction halt={doc['halt_reason']!r}")
            for l in doc["layers"]:
                print(f"  radius {l['radius']:.3f}: metric err "
                      f"{l['sup_rel_metric_error']:.3e}, residual "
                      f"{l['residual_max']:.3e} ({l['n_rays']} rays)")
        else:
            print(json.dumps(doc, indent=1)[:2000])
    else:
        with open(target) as f:
            for i, line in enumerate(f):
                if i > 10:
                    break
                print(line.rstrip())
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "transform": cmd_transform,
    "symbols": cmd_symbols,
    "identity-check": cmd_identity_check,
    "reconstruct": cmd_reconstruct,
    "report": cmd_report,
}


def main(argv=None):
    ap = argparse.ArgumentParser(prog="lenslab",
                                 description="geodesic tomography laboratory")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--output-dir", dest="output_dir")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--set", action="append", default=[],
                    metavar="KEY=JSONVALUE",
                    help="dotted-path override, e.g. sampling.n_points=20")
    args = ap.parse_args(argv)

    overrides = {}
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if args.seed is not None:
        overrides["seed"] = args.seed
    for item in args.set:
        key, _, val = item.partition("=")
        node = overrides
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        try:
            node[parts[-1]] = json.loads(val)
        except json.JSONDecodeError:
            node[parts[-1]] = val

    try:
        cfg = load_config(args.config, overrides)
    except (OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg)
    except (ValueError, KeyError, DomainError, MetricError, OSError) as e:
        print(f"{args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
