"""File formats: grid metrics, lens datasets, field grids, run manifests.

All numeric CSV output uses 17 significant digits (round-trip safe); fixed
seeds and configs give byte-identical files on one platform.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

FMT = "%.17g"


def _write_csv(path, header, rows):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(FMT % v if isinstance(v, (int, float, np.floating))
                             else str(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Grid metric files: JSON header + CSV component table
# ---------------------------------------------------------------------------

def save_grid_metric(prefix, axes, samples, meta=None):
    """JSON header (dims, extents, spacing) + CSV array of g_ij samples,
    row-major, upper-triangle component order (00,01,...,11,12,22)."""
    samples = np.asarray(samples, float)
    dim = samples.shape[-1]
    iu = np.triu_indices(dim)
    comp_names = [f"g{i}{j}" for i, j in zip(*iu)]
    header = {
        "dim": dim,
        "shape": [int(a.size) for a in axes],
        "extents": [[float(a[0]), float(a[-1])] for a in axes],
        "spacing": [float(a[1] - a[0]) if a.size > 1 else 0.0 for a in axes],
        "component_order": comp_names,
        "layout": "row-major",
    }
    if meta:
        header["meta"] = meta
    with open(prefix + ".json", "w") as f:
        json.dump(header, f, indent=1)
    flat = samples[..., iu[0], iu[1]].reshape(-1, len(comp_names))
    _write_csv(prefix + ".csv", comp_names, flat)
    return prefix + ".json", prefix + ".csv"


def load_grid_metric(prefix):
    from .geometry import GridMetric

    with open(prefix + ".json") as f:
        header = json.load(f)
    dim = header["dim"]
    axes = [np.linspace(e[0], e[1], n)
            for e, n in zip(header["extents"], header["shape"])]
    table = np.loadtxt(prefix + ".csv", delimiter=",", skiprows=1, ndmin=2)
    iu = np.triu_indices(dim)
    grid_shape = tuple(header["shape"])
    samples = np.zeros(grid_shape + (dim, dim))
    packed = table.reshape(grid_shape + (len(iu[0]),))
    samples[..., iu[0], iu[1]] = packed
    samples[..., iu[1], iu[0]] = packed
    return GridMetric(axes, samples)


# ---------------------------------------------------------------------------
# Lens datasets: CSV records + JSON sidecar
# ---------------------------------------------------------------------------

def metric_fingerprint(metric, n_probe=64):
    """Deterministic hash of metric samples on a fixed probe set."""
    rng = np.random.default_rng(1234)
    pts = rng.uniform(metric.chart.lo, metric.chart.hi, (n_probe, metric.dim))
    pts = 0.5 * pts  # stay well inside
    vals = metric.eval(pts)
    h = hashlib.sha256(np.ascontiguousarray(np.round(vals, 12)).tobytes())
    return h.hexdigest()[:16]


def save_lens_dataset(prefix, records, metric=None, sampling=None,
                      tolerances=None):
    dim = records[0].entry.x.size if records else 2
    cols = (
        [f"entry_x{i}" for i in range(dim)]
        + [f"entry_xi{i}" for i in range(dim)]
        + [f"exit_x{i}" for i in range(dim)]
        + [f"exit_xi{i}" for i in range(dim)]
        + ["length", "status"]
    )
    rows = []
    for rec in records:
        rows.append(list(rec.entry.x) + list(rec.entry.xi)
                    + list(rec.exit.x) + list(rec.exit.xi)
                    + [rec.length, rec.status])
    _write_csv(prefix + ".csv", cols, rows)
    sidecar = {
        "n_records": len(records),
        "dim": dim,
        "metric_hash": metric_fingerprint(metric) if metric is not None else None,
        "sampling": sampling,
        "tolerances": tolerances or {},
    }
    with open(prefix + ".json", "w") as f:
        json.dump(sidecar, f, indent=1)
    return prefix + ".csv", prefix + ".json"


def load_lens_dataset(prefix):
    from .flow import LensRecord, PhasePoint

    with open(prefix + ".json") as f:
        sidecar = json.load(f)
    dim = sidecar["dim"]
    records = []
    with open(prefix + ".csv") as f:
        next(f)
        for line in f:
            parts = line.strip().split(",")
            vals = np.array([float(v) for v in parts[:-1]])
            status = parts[-1]
            entry = PhasePoint(vals[:dim], vals[dim:2 * dim])
            exit_ = PhasePoint(vals[2 * dim:3 * dim], vals[3 * dim:4 * dim])
            records.append(LensRecord(entry, exit_, float(vals[4 * dim]), status))
    return records, sidecar


# ---------------------------------------------------------------------------
# Field grids (SymField file format)
# ---------------------------------------------------------------------------

def save_field_grid(prefix, axes, values, rank, chart_id="chart", mask=None):
    """JSON header (rank, grid, chart id) + CSV component array."""
    values = np.asarray(values, float)
    grid_shape = [int(a.size) for a in axes]
    if rank == 0:
        comp = values.reshape(-1, 1)
        names = ["f"]
    elif rank == 1:
        comp = values.reshape(-1, values.shape[-1])
        names = [f"f{i}" for i in range(values.shape[-1])]
    else:
        dim = values.shape[-1]
        iu = np.triu_indices(dim)
        comp = values[..., iu[0], iu[1]].reshape(-1, len(iu[0]))
        names = [f"f{i}{j}" for i, j in zip(*iu)]
    header = {
        "rank": rank,
        "chart": chart_id,
        "shape": grid_shape,
        "extents": [[float(a[0]), float(a[-1])] for a in axes],
        "components": names,
    }
    if mask is not None:
        header["mask_true_count"] = int(np.sum(mask))
    with open(prefix + ".json", "w") as f:
        json.dump(header, f, indent=1)
    _write_csv(prefix + ".csv", names, comp)
    return prefix + ".json", prefix + ".csv"


# ---------------------------------------------------------------------------
# Reconstruction manifests
# ---------------------------------------------------------------------------

def save_manifest(path, state, fol=None, config=None):
    doc = {
        "halt_reason": state.halt_reason,
        "depth": state.depth,
        "boundary_diffeo_error": state.boundary_diffeo_error,
        "layers": [
            {
                "level": l.level,
                "radius": l.radius,
                "sup_rel_metric_error": l.sup_rel_metric_error,
                "inversion_norm": l.inversion_norm,
                "residual_max": l.residual_max,
                "n_rays": l.n_rays,
            }
            for l in state.layers
        ],
    }
    if fol is not None:
        doc["foliation"] = {
            "levels": [float(v) for v in fol.levels],
            "step": fol.step,
            "certificates": [float(v) for v in fol.certificates],
            "excluded_radius": fol.excluded_radius,
        }
    if config is not None:
        doc["config"] = config
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
    return path
