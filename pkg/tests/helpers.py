"""Shared fixtures-in-code for model-level tests: tiny synthetic datasets."""

import numpy as np
import pandas as pd

from heatburden.graph import build_graph, build_scaled_structure
from heatburden.splines import SplineBasis


def lattice_edges(nx, ny, queen=True):
    edges = []
    for y in range(ny):
        for x in range(nx):
            a = y * nx + x
            steps = [(-1, 0), (0, -1), (-1, -1), (1, -1)] if queen else [(-1, 0), (0, -1)]
            for dx, dy in steps:
                xx, yy = x + dx, y + dy
                if 0 <= xx < nx and 0 <= yy < ny:
                    b = yy * nx + xx
                    edges.append((min(a, b), max(a, b)))
    return sorted(set(edges))


def toy_structure(nx=2, ny=2, n_cantons=1):
    n = nx * ny
    cantons = {i: i % n_cantons for i in range(n)}
    graph = build_graph(lattice_edges(nx, ny), cantons)
    return build_scaled_structure(graph)


def toy_basis():
    return SplineBasis(np.array([9.0, 17.0, 21.0]), (4.0, 28.0), reference_temp=12.0)


def toy_table(n_areas, n_years=2, n_days=20, seed=0, base_pop=800.0,
              rate=1.5e-3, beta_effect=0.0):
    """Well-formed analysis table with Poisson deaths from a simple truth."""
    rng = np.random.default_rng(seed)
    rows = []
    for t in range(n_years):
        for d in range(n_days):
            dow = (t * n_days + d) % 7
            holiday = 1 if (d == 11) else 0
            for m in range(n_areas):
                exposure = rng.uniform(5.0, 27.0)
                pop = base_pop * (1.0 + 0.2 * np.sin(m + 1.0))
                eta = np.log(rate) + beta_effect * (exposure - 12.0) / 15.0
                deaths = rng.poisson(pop * np.exp(eta))
                rows.append((m, t, d, dow, holiday, exposure, pop, deaths))
    df = pd.DataFrame(rows, columns=["area_id", "year_index", "day_index", "dow",
                                     "holiday", "exposure", "population", "deaths"])
    return df
