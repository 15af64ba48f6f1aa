"""Natural cubic spline exposure basis.

The exposure-response curve is represented on a natural cubic spline
basis with interior knots at percentiles of the observed exposures and
boundary knots at the observed extremes.  The basis has
``len(interior_knots) + 1`` columns and no intercept: every column is the
unique natural cubic spline that is 0 at the lower boundary knot and 1 at
exactly one of the remaining knots (cardinal construction).  Consequences
used throughout the package:

* every uncentered basis value at the domain minimum is exactly 0;
* the basis spans all natural cubic splines on these knots that vanish
  at the domain minimum;
* evaluation beyond a boundary knot is exactly linear (second derivative
  is 0 at and outside the boundaries).

Rows can be centered at a reference temperature so that the fitted curve
is 0 there by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InputError

DEFAULT_KNOT_PERCENTILES = (10.0, 75.0, 90.0)
DEFAULT_REFERENCE_TEMP = 12.0
GRID_STEPS = 200


def knots_from_quantiles(exposures, percentiles=DEFAULT_KNOT_PERCENTILES):
    """Interior knots at empirical percentiles, boundary knots at min/max.

    Quantiles use linear interpolation between order statistics (numpy's
    default, equal to R's type 7); the convention is recorded in the fit
    report.
    """
    x = np.asarray(exposures, dtype=float).ravel()
    if x.size == 0 or not np.all(np.isfinite(x)):
        raise InputError("exposures must be non-empty and finite")
    n_distinct = np.unique(x).size
    if n_distinct < 2:
        raise InputError("degenerate exposures: all values are equal")
    if n_distinct < 10:
        raise InputError(
            f"need at least 10 distinct exposure values to place knots, got {n_distinct}"
        )
    interior = np.quantile(x, np.asarray(percentiles, dtype=float) / 100.0)
    boundary = (float(x.min()), float(x.max()))
    if not np.all(np.diff(interior) > 0):
        raise InputError(f"knot percentiles produce non-increasing knots: {interior}")
    if interior[0] <= boundary[0] or interior[-1] >= boundary[1]:
        raise InputError("interior knots must lie strictly inside the exposure range")
    return interior, boundary


@dataclass
class SplineBasis:
    """Centered natural cubic spline basis on fixed knots.

    ``center_row`` holds the uncentered basis values at ``reference_temp``;
    the centered basis is the uncentered one minus this row.
    """

    interior_knots: np.ndarray
    boundary_knots: tuple[float, float]
    reference_temp: float = DEFAULT_REFERENCE_TEMP

    center_row: np.ndarray = field(init=False, repr=False)
    _spline: CubicSpline = field(init=False, repr=False)
    _edge_value: np.ndarray = field(init=False, repr=False)
    _edge_slope: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.interior_knots = np.asarray(self.interior_knots, dtype=float).ravel()
        lo, hi = (float(self.boundary_knots[0]), float(self.boundary_knots[1]))
        self.boundary_knots = (lo, hi)
        knots = np.concatenate(([lo], self.interior_knots, [hi]))
        if not np.all(np.diff(knots) > 0):
            raise InputError(f"knots must be strictly increasing, got {knots}")
        if not np.isfinite(self.reference_temp):
            raise InputError("reference temperature must be finite")
        ncol = self.interior_knots.size + 1
        targets = np.zeros((knots.size, ncol))
        targets[1:, :] = np.eye(ncol)
        self._spline = CubicSpline(knots, targets, axis=0, bc_type="natural")
        deriv = self._spline.derivative()
        self._edge_value = np.vstack([targets[0], targets[-1]])
        self._edge_slope = np.vstack([deriv(lo), deriv(hi)])
        self.center_row = self._eval_uncentered(np.array([self.reference_temp]))[0]

    @classmethod
    def from_exposures(cls, exposures, reference_temp=DEFAULT_REFERENCE_TEMP,
                       percentiles=DEFAULT_KNOT_PERCENTILES):
        interior, boundary = knots_from_quantiles(exposures, percentiles)
        return cls(interior, boundary, reference_temp)

    @property
    def ncol(self) -> int:
        return self.interior_knots.size + 1

    def _eval_uncentered(self, x: np.ndarray) -> np.ndarray:
        lo, hi = self.boundary_knots
        inner = np.clip(x, lo, hi)
        vals = self._spline(inner)
        below = x < lo
        above = x > hi
        if below.any():
            vals[below] = self._edge_value[0] + np.outer(x[below] - lo, self._edge_slope[0])
        if above.any():
            vals[above] = self._edge_value[1] + np.outer(x[above] - hi, self._edge_slope[1])
        return vals

    def evaluate(self, x, centered: bool = True) -> np.ndarray:
        """Basis rows at exposure(s) ``x``; shape ``x.shape + (ncol,)``."""
        arr = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise InputError("exposure values must be finite")
        rows = self._eval_uncentered(np.atleast_1d(arr).ravel())
        if centered:
            rows = rows - self.center_row
        return rows.reshape(arr.shape + (self.ncol,))

    def to_dict(self) -> dict:
        return {
            "interior_knots": self.interior_knots.tolist(),
            "boundary_knots": list(self.boundary_knots),
            "reference_temp": self.reference_temp,
            "center_row": self.center_row.tolist(),
            "quantile_convention": "linear interpolation between order statistics (numpy default)",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineBasis":
        basis = cls(np.asarray(d["interior_knots"]), tuple(d["boundary_knots"]),
                    float(d["reference_temp"]))
        stored = np.asarray(d.get("center_row", basis.center_row))
        if not np.allclose(stored, basis.center_row, atol=1e-12):
            raise InputError("stored center_row inconsistent with knots/reference")
        return basis


def evaluate_basis(x, basis: SplineBasis, centered: bool = True) -> np.ndarray:
    return basis.evaluate(x, centered=centered)


def evaluation_grid(basis: SplineBasis, steps: int = GRID_STEPS) -> np.ndarray:
    """Equally spaced exposures spanning the boundary knots, inclusive."""
    lo, hi = basis.boundary_knots
    if not hi > lo:
        raise InputError("boundary knots must be distinct to build a grid")
    if steps < 2:
        raise InputError("grid needs at least 2 steps")
    return np.linspace(lo, hi, steps)
