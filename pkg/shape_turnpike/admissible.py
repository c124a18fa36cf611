# Copyright 2025 shape-turnpike contributors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""The convexified admissible set: densities 0 <= a <= 1 with volume <= L|Omega|."""

from __future__ import annotations

from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.optimize import bisect

from shape_turnpike.grid import FloatArray, Grid, ScalarField, ShapeMask, integrate
from shape_turnpike.pde import ConvergenceError

VALUE_TOL = 1e-12
VOLUME_RTOL = 1e-10
TIE_RTOL = 1e-9


def check_fraction(L: float) -> None:
    if not 0 < L < 1:
        raise ValueError(f"volume fraction L must lie in (0, 1), got {L}")


def budget(grid: Grid, L: float) -> float:
    """Volume budget ``L |Omega|`` in area units."""
    return L * grid.measure


class Density(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    field: ScalarField
    L: float

    @model_validator(mode="after")
    def _check_admissible(self) -> Density:
        check_fraction(self.L)
        v = self.field.values
        if v.min() < -VALUE_TOL or v.max() > 1 + VALUE_TOL:
            raise ValueError("density values must lie in [0, 1]")
        cap = budget(self.field.grid, self.L)
        if integrate(self.field) > cap * (1 + VOLUME_RTOL) + VALUE_TOL:
            raise ValueError(
                f"density volume {integrate(self.field):.6g} exceeds budget {cap:.6g}"
            )
        return self

    @property
    def grid(self) -> Grid:
        return self.field.grid

    @property
    def values(self) -> FloatArray:
        return self.field.values


class BathtubResult(BaseModel):
    density: Density
    level: float
    fractional_cells: int


class RelaxationReport(BaseModel):
    relaxed_area: float
    mask_volume: float
    budget: float
    volume_deviation: float
    flagged: bool
    threshold: float
    band: tuple[float, float]
    relaxed_mean_radius: float | None = None
    level_fill_area: float = 0.0


def bathtub_values(phi: FloatArray, budget_cells: float) -> tuple[FloatArray, float]:
    """Maximize ``sum(phi * a)`` over ``0 <= a <= 1, sum(a) <= budget_cells``.

    Returns the maximizer and ``inf{s : #{phi > s} <= budget_cells}``. Values
    within ``TIE_RTOL * max|phi|`` of the level share the leftover budget
    evenly, so round-off cannot split a symmetric level set.
    """
    n = phi.size
    ordered = np.sort(phi)[::-1]
    m = int(np.floor(budget_cells))
    level = float(ordered[m]) if m < n else -np.inf

    a = np.zeros(n)
    tol = TIE_RTOL * float(np.abs(phi).max(initial=0.0))
    above = phi > level + tol
    a[above & (phi > 0)] = 1.0
    if level > 0:
        tie = np.abs(phi - level) <= tol
        remainder = budget_cells - np.count_nonzero(above)
        a[tie] = min(1.0, max(0.0, remainder) / np.count_nonzero(tie))
    return a, level


def bathtub_maximize(phi: ScalarField, L: float) -> BathtubResult:
    check_fraction(L)
    a, level = bathtub_values(phi.values, L * phi.grid.size)
    fractional = int(np.count_nonzero((a > 0) & (a < 1)))
    density = Density(field=ScalarField(grid=phi.grid, values=a), L=L)
    return BathtubResult(density=density, level=level, fractional_cells=fractional)


def project(f: ScalarField, L: float) -> Density:
    """Euclidean projection onto ``{0 <= a <= 1, int a <= L |Omega|}``."""
    check_fraction(L)
    v = f.values
    cells = L * f.grid.size
    clamped = np.clip(v, 0.0, 1.0)
    if clamped.sum() <= cells:
        return Density(field=ScalarField(grid=f.grid, values=clamped), L=L)

    def excess(mu: float) -> float:
        return float(np.clip(v - mu, 0.0, 1.0).sum() - cells)

    mu, result = bisect(
        excess, 0.0, float(v.max()), xtol=1e-15, maxiter=500, full_output=True, disp=False
    )
    if not result.converged:
        raise ConvergenceError(f"projection bisection failed: {result.flag}")

    # the budget is affine in mu on the final active set; solve it exactly
    shifted = v - mu
    free = (shifted > 0) & (shifted < 1)
    if np.any(free):
        ones = np.count_nonzero(shifted >= 1)
        mu_exact = (v[free].sum() + ones - cells) / np.count_nonzero(free)
        s2 = v - mu_exact
        if np.array_equal((s2 > 0) & (s2 < 1), free) and np.count_nonzero(s2 >= 1) == ones:
            mu = mu_exact
    a = np.clip(v - mu, 0.0, 1.0)
    return Density(field=ScalarField(grid=f.grid, values=a), L=L)


def volume(d: Density) -> float:
    return integrate(d.field)


def threshold_to_shape(
    d: Density,
    threshold: float = 0.5,
    band: tuple[float, float] = (0.05, 0.95),
) -> tuple[ShapeMask, RelaxationReport]:
    """Threshold a density and report the cells left strictly inside ``band``.

    A band of equal values carrying less than one cell of mass is the fill of
    the critical level set of a bathtub vertex, not relaxation; it is reported
    as ``level_fill_area`` and does not raise the flag.
    """
    grid = d.grid
    v = d.values
    mask = ShapeMask(grid=grid, inside=v >= threshold)
    relaxed = (v > band[0]) & (v < band[1])
    fill_area = 0.0
    if np.any(relaxed) and np.ptp(v[relaxed]) <= TIE_RTOL and v[relaxed].sum() < 1.0:
        fill_area = float(np.count_nonzero(relaxed) * grid.cell_area)
        relaxed = np.zeros_like(relaxed)
    radius = None
    if np.any(relaxed):
        X, Y = grid.coordinates()
        cx, cy = 0.5 * (grid.xmin + grid.xmax), 0.5 * (grid.ymin + grid.ymax)
        r = np.hypot(X.ravel() - cx, Y.ravel() - cy)
        radius = float(r[relaxed].mean())
    cap = budget(grid, d.L)
    report = RelaxationReport(
        relaxed_area=float(np.count_nonzero(relaxed) * grid.cell_area),
        mask_volume=mask.volume,
        budget=cap,
        volume_deviation=mask.volume - cap,
        flagged=bool(np.any(relaxed)),
        threshold=threshold,
        band=band,
        relaxed_mean_radius=radius,
        level_fill_area=fill_area,
    )
    return mask, report


def uniform_density(grid: Grid, L: float) -> Density:
    return Density(field=ScalarField.constant(grid, L), L=L)


def random_density(grid: Grid, L: float, rng: np.random.Generator) -> Density:
    """A random member of the admissible set (projection of a noisy field)."""
    raw: Any = rng.uniform(-0.5, 1.5, grid.size)
    return project(ScalarField(grid=grid, values=raw), L)
