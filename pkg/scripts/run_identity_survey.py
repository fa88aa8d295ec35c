#!/usr/bin/env python3
"""Flow-difference identity survey across metric-pair families: the residual
of the pseudolinearization identity is pure integration error for any pair,
lens-data equality or not."""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

import numpy as np

from lenslab import geometry as geo, rigidity as rg
from lenslab.flow import unit_phase_point


def sample_rays(metric, n, rng):
    out = []
    for _ in range(n):
        b = rng.uniform(0, 2 * np.pi)
        a = rng.uniform(-1.1, 1.1)
        p = np.array([np.cos(b), np.sin(b)])
        v = np.cos(a) * (-p) + np.sin(a) * np.array([-np.sin(b), np.cos(b)])
        out.append((unit_phase_point(metric, p, v=v), rng.uniform(0.3, 1.4)))
    return out


def main():
    rng = np.random.default_rng(0)
    herglotz = geo.ConformalMetric(geo.herglotz_profile(0.2), 2)
    families = {
        "euclid vs herglotz": rg.MetricPair(geo.EuclideanMetric(2), herglotz),
        "herglotz vs gaussian": rg.MetricPair(
            herglotz,
            geo.ConformalMetric(geo.gaussian_speed_profile(0.25, 0.45), 2)),
        "herglotz a=0.1 vs a=0.3": rg.MetricPair(
            geo.ConformalMetric(geo.herglotz_profile(0.1), 2),
            geo.ConformalMetric(geo.herglotz_profile(0.3), 2)),
        "gaussian vs euclid": rg.MetricPair(
            geo.ConformalMetric(geo.gaussian_speed_profile(-0.2, 0.5), 2),
            geo.EuclideanMetric(2)),
    }
    for name, pair in families.items():
        samples = sample_rays(pair.g, 50, rng)
        res = rg.pseudolin_identity_check_batch(pair, samples, order=96)
        print(f"{name:28s} max {res.max():.3e}   median {np.median(res):.3e}")


if __name__ == "__main__":
    main()
