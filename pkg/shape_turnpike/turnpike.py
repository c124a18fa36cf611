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
"""Turnpike diagnostics: error curves against the static optimum, integral and
measure statistics, dissipativity residuals, exponential fits and the
spectral prediction for terminal-cost problems.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import ndimage
from scipy.integrate import trapezoid

from shape_turnpike.admissible import bathtub_values, check_fraction
from shape_turnpike.fieldio import CSV_FLOAT_FORMAT, write_json
from shape_turnpike.grid import (
    FloatArray,
    ScalarField,
    ShapeMask,
    distance_transform,
    inner,
    level_set_points,
    norm_l1,
    norm_l2,
    point_hausdorff,
    symmetric_difference_area,
)
from shape_turnpike.pde import EigenPair, InequalityReport, Trajectory
from shape_turnpike.solver import OptimalTriple, StaticTriple

CURVE_COLUMNS = ["t", "dy", "dp", "da_l2", "da_l1", "dh", "total"]


class ErrorCurves(BaseModel):
    """Distances between a dynamic optimum and the static one, per time step.

    ``dh`` is NaN where one of the thresholded shapes is empty.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    times: FloatArray
    dy: FloatArray
    dp: FloatArray
    da_l2: FloatArray
    da_l1: FloatArray
    dh: FloatArray
    total: FloatArray

    @field_validator("*", mode="before")
    @classmethod
    def validate_array(cls, v: Any) -> FloatArray:
        arr = np.array(v, dtype=np.float64, copy=True).ravel()
        arr.flags.writeable = False
        return arr

    @model_validator(mode="after")
    def _check_curves(self) -> ErrorCurves:
        n = self.times.size
        for name in CURVE_COLUMNS[1:]:
            arr = getattr(self, name)
            if arr.size != n:
                raise ValueError(f"curve {name} has {arr.size} entries, expected {n}")
            finite = arr[np.isfinite(arr)]
            if np.any(finite < 0):
                raise ValueError(f"curve {name} has negative entries")
        return self

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": self.times, **{c: getattr(self, c) for c in CURVE_COLUMNS[1:]}})

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> ErrorCurves:
        data = {c: df[c].to_numpy(dtype=np.float64) for c in CURVE_COLUMNS[1:]}
        return cls(times=df["t"].to_numpy(dtype=np.float64), **data)


class ExpFit(BaseModel):
    M: float
    mu: float
    window: tuple[float, float]
    residual: float
    n_points: int
    degenerate: bool = False
    side: Literal["terminal", "initial"] = "terminal"


class DissipativityReport(BaseModel):
    times: list[float]
    residual: list[float]
    min_residual: float
    scale: float
    gap_allowance: float


class SpectralPrediction(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    lambda_: float = Field(serialization_alias="lambda")
    mu: float
    mu_active: float | None
    Phi0: ScalarField
    s0: float
    omega0: ShapeMask
    coefficients: list[float]
    j0: int
    min_gradient: float
    hausdorff_constant: float

    @model_validator(mode="after")
    def _check_order(self) -> SpectralPrediction:
        if not self.lambda_ < self.mu:
            raise ValueError("dominant eigenvalue must be below the next one")
        return self

    @property
    def rate(self) -> float:
        return self.mu - self.lambda_

    def discrete_rate(self, dt: float) -> float:
        """Decay rate seen by implicit Euler with step ``dt``."""
        return (np.log1p(dt * self.mu) - np.log1p(dt * self.lambda_)) / dt

    def adjoint_profile(
        self, times: FloatArray, T: float, dt: float | None = None
    ) -> FloatArray:
        """Amplitude of the dominant adjoint component at ``times``."""
        tau = T - np.asarray(times, dtype=np.float64)
        if dt is None:
            return np.exp(-self.lambda_ * tau)
        steps = np.rint(tau / dt) + 1
        return np.power(1.0 + dt * self.lambda_, -steps)

    def summary(self) -> dict[str, float | None]:
        return {
            "lambda": self.lambda_,
            "mu": self.mu,
            "mu_active": self.mu_active,
            "rate": self.rate,
            "s0": self.s0,
            "omega0_volume": self.omega0.volume,
            "min_gradient": self.min_gradient,
            "hausdorff_constant": self.hausdorff_constant,
        }


class TurnpikeReport(BaseModel):
    T: float
    nt: int
    integral_turnpike: float | None = None
    measure_turnpike: dict[str, float] = Field(default_factory=dict)
    dissipativity: DissipativityReport | None = None
    dissipativity_min_residual: float | None = None
    fits: dict[str, ExpFit] = Field(default_factory=dict)
    spectral: dict[str, float | None] | None = None
    shape_stationarity: float | None = None
    inequalities: dict[str, InequalityReport] = Field(default_factory=dict)


def _masks(values: FloatArray, threshold: float) -> np.ndarray[Any, Any]:
    return np.asarray(values >= threshold)


def hausdorff_curve(
    a_path: Trajectory, reference: ShapeMask, threshold: float = 0.5
) -> FloatArray:
    """Hausdorff distance of each thresholded snapshot to ``reference`` (NaN if empty)."""
    a_path.grid.check_same(reference.grid)
    d_ref = distance_transform(reference).values
    out = np.full(a_path.timegrid.nt + 1, np.nan)
    for k, inside in enumerate(_masks(a_path.values, threshold)):
        if not inside.any():
            continue
        d_k = distance_transform(ShapeMask(grid=a_path.grid, inside=inside)).values
        out[k] = max(d_ref[inside].max(), d_k[reference.inside].max())
    return out


def _row_norms(ca: float, values: FloatArray) -> FloatArray:
    return np.sqrt(ca * np.einsum("ki,ki->k", values, values))


def error_curves(
    triple: OptimalTriple, stat: StaticTriple, threshold: float = 0.5
) -> ErrorCurves:
    """Compare ``y_T``, ``T p_T`` and ``a_T`` with the static triple.

    The dynamic adjoint carries the 1/T of the running cost, hence the
    rescaling before comparing with the static adjoint.
    """
    grid = triple.y.grid
    grid.check_same(stat.y_bar.grid)
    ca = grid.cell_area
    T = triple.timegrid.T
    dy = _row_norms(ca, triple.y.values - stat.y_bar.values)
    dp = _row_norms(ca, T * triple.p.values - stat.p_bar.values)
    da = triple.a.values - stat.a_bar.values
    da_l2 = _row_norms(ca, da)
    da_l1 = np.array([norm_l1(ScalarField(grid=grid, values=row)) for row in da])
    reference = ShapeMask(grid=grid, inside=_masks(stat.a_bar.values, threshold))
    if reference.is_empty:
        dh = np.full(triple.timegrid.nt + 1, np.nan)
    else:
        dh = hausdorff_curve(triple.a, reference, threshold)
    return ErrorCurves(
        times=triple.timegrid.times(),
        dy=dy,
        dp=dp,
        da_l2=da_l2,
        da_l1=da_l1,
        dh=dh,
        total=dy + dp + da_l2,
    )


def integral_turnpike(curves: ErrorCurves) -> float:
    return float(trapezoid(curves.dy**2 + curves.dp**2, curves.times))


def measure_turnpike(curves: ErrorCurves, eps: float) -> float:
    """Discrete measure of ``{t : dy(t) + dp(t) > eps}``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return curves.dt * int(np.count_nonzero(curves.dy + curves.dp > eps))


def check_dissipativity(
    y_path: Trajectory, a_path: Trajectory, stat: StaticTriple
) -> DissipativityReport:
    """Residual of the dissipation inequality with storage ``S(y) = (y, p_bar)``.

    ``residual(tau) = S(y0) + int w - S(y(tau)) - int |y - y_bar|^2 / 2`` with
    supply ``w = (|y - y_d|^2 - |y_bar - y_d|^2) / 2`` and right-endpoint sums.
    An inexact static solve lowers the bound by ``tau * gap / gamma1``.
    """
    grid = y_path.grid
    grid.check_same(stat.y_bar.grid)
    grid.check_same(a_path.grid)
    if a_path.timegrid != y_path.timegrid:
        raise ValueError("state and control paths are on different time grids")
    ca = grid.cell_area
    tg = y_path.timegrid
    y = y_path.values
    p_hat = stat.p_bar.values / stat.gamma1
    y_bar, y_d = stat.y_bar.values, stat.y_d.values

    storage = ca * (y @ p_hat)
    supply = 0.5 * ca * (
        np.einsum("ki,ki->k", y - y_d, y - y_d) - float((y_bar - y_d) @ (y_bar - y_d))
    )
    penalty = 0.5 * ca * np.einsum("ki,ki->k", y - y_bar, y - y_bar)
    cum_supply = np.concatenate([[0.0], np.cumsum(tg.dt * supply[1:])])
    cum_penalty = np.concatenate([[0.0], np.cumsum(tg.dt * penalty[1:])])
    residual = (storage[0] + cum_supply) - (storage + cum_penalty)
    scale = max(
        float(np.abs(storage).max()),
        float(np.abs(cum_supply).max()),
        float(cum_penalty.max()),
        1e-300,
    )
    return DissipativityReport(
        times=tg.times().tolist(),
        residual=residual.tolist(),
        min_residual=float(residual.min()),
        scale=scale,
        gap_allowance=tg.T * stat.gap / stat.gamma1,
    )


def exp_fit(
    curve: Sequence[float] | FloatArray,
    times: Sequence[float] | FloatArray,
    t_lo: float,
    t_hi: float,
    floor: float = 1e-12,
    T: float | None = None,
    side: Literal["terminal", "initial"] = "terminal",
) -> ExpFit:
    """Least-squares fit of ``M exp(-mu (T - t))`` (or ``M exp(-mu t)``) on a window."""
    c = np.asarray(curve, dtype=np.float64)
    t = np.asarray(times, dtype=np.float64)
    horizon = float(t[-1]) if T is None else T
    if not t_lo < t_hi:
        raise ValueError("fit window must satisfy t_lo < t_hi")
    if t_lo < -1e-12 or t_hi > horizon + 1e-12:
        raise ValueError("fit window must lie inside [0, T]")
    if floor <= 0:
        raise ValueError("floor must be positive")
    tol = 1e-9 * max(horizon, 1.0)
    sel = (t >= t_lo - tol) & (t <= t_hi + tol) & np.isfinite(c)
    n = int(np.count_nonzero(sel))
    if n < 4:
        raise ValueError(f"exponential fit needs at least 4 usable points, got {n}")
    vals = np.maximum(c[sel], floor)
    if np.all(vals <= floor):
        return ExpFit(
            M=0.0, mu=0.0, window=(t_lo, t_hi), residual=0.0, n_points=n,
            degenerate=True, side=side,
        )
    s = horizon - t[sel] if side == "terminal" else t[sel]
    logs = np.log(vals)
    slope, intercept = np.polyfit(s, logs, 1)
    residual = float(np.sqrt(np.mean((logs - (slope * s + intercept)) ** 2)))
    return ExpFit(
        M=float(np.exp(intercept)),
        mu=float(-slope),
        window=(t_lo, t_hi),
        residual=residual,
        n_points=n,
        side=side,
    )


def _boundary_band(inside: np.ndarray[Any, Any]) -> np.ndarray[Any, Any]:
    inner_part = ndimage.binary_erosion(inside)
    outer_part = ndimage.binary_dilation(inside)
    return np.asarray((inside & ~inner_part) | (outer_part & ~inside))


def spectral_mayer_predict(
    terminal_adjoint: ScalarField,
    modes: Sequence[EigenPair],
    L: float,
    tol_coef: float = 1e-10,
) -> SpectralPrediction:
    """Dominant spectral component of ``y_d - y_T(T)`` and its auxiliary shape.

    ``omega0`` takes the ``round(L N)`` largest nodes of ``Phi0`` (stable
    order), which keeps its volume within half a cell of the budget even on
    symmetric level sets.
    """
    check_fraction(L)
    grid = terminal_adjoint.grid
    zeta = [inner(terminal_adjoint, m.phi) for m in modes]
    active = [j for j, z in enumerate(zeta) if abs(z) > tol_coef]
    if not active:
        raise ValueError("all spectral coefficients are below tolerance")
    j0 = active[0]
    lam = modes[j0].lambda_
    same = [j for j, m in enumerate(modes) if abs(m.lambda_ - lam) <= 1e-9 * lam]
    higher = [m.lambda_ for m in modes if m.lambda_ > lam * (1 + 1e-9)]
    if not higher:
        raise ValueError("modes must include an eigenvalue above the dominant one")
    active_higher = [modes[j].lambda_ for j in active if modes[j].lambda_ > lam * (1 + 1e-9)]

    phi0 = np.zeros(grid.size)
    for j in same:
        phi0 += zeta[j] * modes[j].phi.values
    _, s0 = bathtub_values(phi0, L * grid.size)
    k = max(1, int(round(L * grid.size)))
    top = np.argsort(-phi0, kind="stable")[:k]
    inside = np.zeros(grid.size, dtype=bool)
    inside[top] = True
    omega0 = ShapeMask(grid=grid, inside=inside)

    # Phi0 is a sine combination, so zero padding is its boundary trace
    ext = np.pad(phi0.reshape(grid.shape), 1)
    gx = (ext[2:, 1:-1] - ext[:-2, 1:-1]) / (2 * grid.hx)
    gy = (ext[1:-1, 2:] - ext[1:-1, :-2]) / (2 * grid.hy)
    gnorm = np.hypot(gx, gy)
    band = _boundary_band(omega0.as_2d())
    min_gradient = float(gnorm[band].min()) if band.any() else 0.0

    return SpectralPrediction(
        lambda_=lam,
        mu=min(higher),
        mu_active=min(active_higher) if active_higher else None,
        Phi0=ScalarField(grid=grid, values=phi0),
        s0=s0,
        omega0=omega0,
        coefficients=zeta,
        j0=j0,
        min_gradient=min_gradient,
        hausdorff_constant=2.0 / min_gradient if min_gradient > 0 else float("inf"),
    )


def adjoint_deviation_curve(
    p_path: Trajectory, prediction: SpectralPrediction, discrete: bool = True
) -> FloatArray:
    """Relative distance of ``p_T(t)`` from its dominant spectral profile."""
    tg = p_path.timegrid
    profile = prediction.adjoint_profile(tg.times(), tg.T, tg.dt if discrete else None)
    phi0 = prediction.Phi0.values
    scale = norm_l2(prediction.Phi0)
    ca = p_path.grid.cell_area
    diff = p_path.values / profile[:, None] - phi0
    return np.sqrt(ca * np.einsum("ki,ki->k", diff, diff)) / scale


def boundary_hausdorff_curve(
    p_path: Trajectory, prediction: SpectralPrediction, L: float
) -> FloatArray:
    """Hausdorff distance between the boundaries of the bathtub superlevel sets
    of ``p_T(t)`` and of ``Phi0``, both located to sub-cell accuracy.

    Each step uses its own bathtub level, so the curve does not depend on the
    scale of ``p_T(t)``. NaN where a level set has no crossing.
    """
    check_fraction(L)
    grid = p_path.grid
    grid.check_same(prediction.Phi0.grid)
    cells = L * grid.size
    reference = level_set_points(prediction.Phi0, max(prediction.s0, 0.0))
    out = np.full(p_path.timegrid.nt + 1, np.nan)
    if len(reference) == 0:
        return out
    for k, row in enumerate(p_path.values):
        _, level = bathtub_values(row, cells)
        points = level_set_points(ScalarField(grid=grid, values=row), max(level, 0.0))
        if len(points):
            out[k] = point_hausdorff(points, reference)
    return out


def shape_stationarity(
    a_path: Trajectory, t_lo: float, t_hi: float, threshold: float = 0.5
) -> float:
    """Largest symmetric-difference area between thresholded shapes in a window."""
    t = a_path.times
    sel = (t >= t_lo) & (t <= t_hi)
    rows = _masks(a_path.values[sel], threshold)
    masks = [ShapeMask(grid=a_path.grid, inside=m) for m in rows]
    return max(
        (
            symmetric_difference_area(m1, m2)
            for i, m1 in enumerate(masks)
            for m2 in masks[i + 1 :]
        ),
        default=0.0,
    )


def write_curves_csv(curves: ErrorCurves, path: Path) -> None:
    curves.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, na_rep="")


def read_curves_csv(path: Path) -> ErrorCurves:
    df = pd.read_csv(path, float_precision="round_trip")
    if list(df.columns) != CURVE_COLUMNS:
        raise ValueError(f"{path}: unexpected header {list(df.columns)}")
    return ErrorCurves.from_frame(df)


def write_report(report: TurnpikeReport, path: Path) -> None:
    write_json(report, path)
