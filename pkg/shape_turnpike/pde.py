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
"""Elliptic operator assembly, static and implicit-Euler solves, spectra, and
the a priori energy / Gronwall checks.

Discretize-then-transpose: the adjoint recursion uses the matrix transpose of
the assembled forward operator, so adjoint gradients are exact for the
discrete cost.
"""

from __future__ import annotations

import threading
from typing import Any, Literal

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    PrivateAttr,
    field_validator,
    model_validator,
)

from shape_turnpike.grid import FloatArray, Grid, ScalarField, norm_l2
from shape_turnpike.logging_helper import get_logger

logger = get_logger()


class ConvergenceError(RuntimeError):
    """A linear solve, eigen-iteration or bisection failed to converge."""


class EllipticityDiagnostic(BaseModel):
    theta: float
    theta1: float
    poincare: float
    max_peclet: float
    passed: bool


class EllipticOperator(BaseModel):
    """Assembled ``A = -div(alpha grad) + b.grad + c`` with Dirichlet rows eliminated."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: Grid
    alpha: ScalarField
    b: tuple[ScalarField, ScalarField]
    c: ScalarField
    theta: float
    matrix: sp.csr_matrix
    adjoint_matrix: sp.csr_matrix
    ellipticity: EllipticityDiagnostic

    _factors: dict[tuple[float, int], Any] = PrivateAttr(default_factory=dict)

    @property
    def is_symmetric(self) -> bool:
        return not (np.any(self.b[0].values) or np.any(self.b[1].values))

    @property
    def lambda1(self) -> float:
        """Smallest eigenvalue of the symmetric part, from the assembly diagnostic."""
        return 1.0 / self.ellipticity.poincare

    def factor(self, dt: float = 0.0) -> Any:
        """LU factors of ``A`` (dt == 0) or ``I + dt A``.

        Cached per dt and per thread: SuperLU objects are not shared between
        threads, so concurrent horizons each factorize once.
        """
        key = (float(dt), threading.get_ident())
        lu = self._factors.get(key)
        if lu is None:
            if key[0] == 0.0:
                M = self.matrix
            else:
                M = sp.identity(self.grid.size, format="csr") + key[0] * self.matrix
            lu = spla.splu(M.tocsc())
            self._factors[key] = lu
        return lu

    def apply(self, f: ScalarField) -> ScalarField:
        self.grid.check_same(f.grid)
        return ScalarField(grid=self.grid, values=self.matrix @ f.values)

    def apply_extended(self, f: ScalarField) -> ScalarField:
        """Apply the differential operator to ``f`` without forcing zero boundary values.

        Boundary values are taken from quadratic extrapolation of the interior
        samples, so the result is exact on quadratic polynomials.
        """
        self.grid.check_same(f.grid)
        diag, east, west, north, south = _stencil(
            self.grid,
            self.alpha.as_2d(),
            self.b[0].as_2d(),
            self.b[1].as_2d(),
            self.c.as_2d(),
        )
        u = f.as_2d()
        ext = np.zeros((self.grid.nx + 2, self.grid.ny + 2))
        ext[1:-1, 1:-1] = u
        ext[0, 1:-1] = 3 * u[0] - 3 * u[1] + u[2]
        ext[-1, 1:-1] = 3 * u[-1] - 3 * u[-2] + u[-3]
        ext[1:-1, 0] = 3 * u[:, 0] - 3 * u[:, 1] + u[:, 2]
        ext[1:-1, -1] = 3 * u[:, -1] - 3 * u[:, -2] + u[:, -3]
        out = (
            diag * u
            + east * ext[2:, 1:-1]
            + west * ext[:-2, 1:-1]
            + north * ext[1:-1, 2:]
            + south * ext[1:-1, :-2]
        )
        return ScalarField(grid=self.grid, values=out)


def _as_field(grid: Grid, v: ScalarField | float) -> ScalarField:
    if isinstance(v, ScalarField):
        grid.check_same(v.grid)
        return v
    return ScalarField.constant(grid, v)


def _stencil(
    grid: Grid,
    alpha: FloatArray,
    bx: FloatArray,
    by: FloatArray,
    c: FloatArray,
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray, FloatArray]:
    """Five-point coefficients per node: diagonal, then east/west/north/south."""
    hx2, hy2 = grid.hx**2, grid.hy**2
    # face values: arithmetic mean inside, node value on boundary faces
    a_e = alpha.copy()
    a_e[:-1, :] = 0.5 * (alpha[:-1, :] + alpha[1:, :])
    a_w = alpha.copy()
    a_w[1:, :] = 0.5 * (alpha[1:, :] + alpha[:-1, :])
    a_n = alpha.copy()
    a_n[:, :-1] = 0.5 * (alpha[:, :-1] + alpha[:, 1:])
    a_s = alpha.copy()
    a_s[:, 1:] = 0.5 * (alpha[:, 1:] + alpha[:, :-1])

    diag = (a_e + a_w) / hx2 + (a_n + a_s) / hy2 + c
    east = -a_e / hx2 + bx / (2 * grid.hx)
    west = -a_w / hx2 - bx / (2 * grid.hx)
    north = -a_n / hy2 + by / (2 * grid.hy)
    south = -a_s / hy2 - by / (2 * grid.hy)
    return diag, east, west, north, south


def _assemble_matrix(
    grid: Grid,
    alpha: FloatArray,
    bx: FloatArray,
    by: FloatArray,
    c: FloatArray,
) -> sp.csr_matrix:
    diag, east, west, north, south = _stencil(grid, alpha, bx, by, c)
    idx = np.arange(grid.size).reshape(grid.shape)
    rows = [idx.ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols = [idx.ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel()]
    data = [diag.ravel(), east[:-1, :].ravel(), west[1:, :].ravel()]
    rows += [idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    cols += [idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    data += [north[:, :-1].ravel(), south[:, 1:].ravel()]
    return sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    )


def _inverse_iteration(
    S: sp.spmatrix, tol: float, max_iter: int
) -> tuple[float, FloatArray]:
    lu = spla.splu(sp.csc_matrix(S))
    v = np.ones(S.shape[0])
    v /= np.linalg.norm(v)
    lam_old = np.inf
    for _ in range(max_iter):
        w = lu.solve(v)
        v = w / np.linalg.norm(w)
        lam = float(v @ (S @ v))
        if abs(lam - lam_old) <= tol * abs(lam):
            return lam, v
        lam_old = lam
    raise ConvergenceError(
        f"inverse iteration stagnated after {max_iter} iterations (lambda={lam_old})"
    )


def assemble_operator(
    grid: Grid,
    alpha: ScalarField | float = 1.0,
    b: tuple[ScalarField | float, ScalarField | float] | None = None,
    c: ScalarField | float = 0.0,
) -> EllipticOperator:
    alpha_f = _as_field(grid, alpha)
    bx, by = (0.0, 0.0) if b is None else b
    b_f = (_as_field(grid, bx), _as_field(grid, by))
    c_f = _as_field(grid, c)
    if np.any(alpha_f.values <= 0):
        raise ValueError("diffusion coefficient alpha must be positive everywhere")
    if np.any(c_f.values < 0):
        raise ValueError("reaction coefficient c must be nonnegative everywhere")

    matrix = _assemble_matrix(
        grid, alpha_f.as_2d(), b_f[0].as_2d(), b_f[1].as_2d(), c_f.as_2d()
    )
    adjoint = matrix.transpose().tocsr()

    theta = float(alpha_f.values.min())
    lam1, _ = _inverse_iteration(0.5 * (matrix + adjoint), 1e-8, 500)
    poincare = 1.0 / lam1
    m = min(1.0, poincare)
    c_inf = float(np.abs(c_f.values).max())
    b_sum = float(np.abs(b_f[0].values).max() + np.abs(b_f[1].values).max())
    theta1 = 2 * m * (c_inf + np.sqrt(c_inf**2 + b_sum / (2 * m)))
    peclet = np.maximum(
        np.abs(b_f[0].values) * grid.hx, np.abs(b_f[1].values) * grid.hy
    ) / (2 * alpha_f.values)
    diagnostic = EllipticityDiagnostic(
        theta=theta,
        theta1=float(theta1),
        poincare=poincare,
        max_peclet=float(peclet.max()),
        passed=bool(theta > theta1),
    )
    if diagnostic.passed:
        logger.info(f"Ellipticity check passed: theta={theta:.6g} > theta1={theta1:.6g}")
    else:
        logger.warning(
            f"Ellipticity condition fails: theta={theta:.6g} <= theta1={theta1:.6g}"
        )
    if diagnostic.max_peclet > 1:
        logger.warning(
            f"Cell Peclet number {diagnostic.max_peclet:.3g} > 1; "
            "centered drift may oscillate"
        )

    return EllipticOperator(
        grid=grid,
        alpha=alpha_f,
        b=b_f,
        c=c_f,
        theta=theta,
        matrix=matrix,
        adjoint_matrix=adjoint,
        ellipticity=diagnostic,
    )


def laplacian(grid: Grid) -> EllipticOperator:
    return assemble_operator(grid, 1.0, None, 0.0)


def solve_static_pde(
    op: EllipticOperator,
    a: ScalarField,
    rtol: float = 1e-10,
    method: Literal["direct", "cg"] = "direct",
    max_iter: int = 2000,
) -> ScalarField:
    """Solve ``A y = a`` with homogeneous Dirichlet data."""
    op.grid.check_same(a.grid)
    rhs = a.values
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0:
        return ScalarField.zeros(op.grid)

    if method == "direct":
        lu = op.factor(0.0)
        y = lu.solve(rhs)
        residual = rhs - op.matrix @ y
        if np.linalg.norm(residual) > rtol * rhs_norm:
            y = y + lu.solve(residual)
    elif method == "cg":
        if not op.is_symmetric:
            raise ValueError("conjugate gradient requires a symmetric operator (b=0)")
        ilu = spla.spilu(op.matrix.tocsc())
        precond = spla.LinearOperator(op.matrix.shape, ilu.solve)
        y, info = spla.cg(op.matrix, rhs, rtol=0.1 * rtol, maxiter=max_iter, M=precond)
        if info != 0:
            raise ConvergenceError(f"CG did not converge (info={info})")
    else:
        raise ValueError(f"unknown method: {method}")

    rel = np.linalg.norm(rhs - op.matrix @ y) / rhs_norm
    if rel > rtol:
        raise ConvergenceError(f"static solve residual {rel:.3e} exceeds rtol {rtol:.1e}")
    return ScalarField(grid=op.grid, values=y)


class TimeGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    T: float = Field(gt=0)
    nt: int = Field(ge=1)

    @property
    def dt(self) -> float:
        return self.T / self.nt

    def times(self) -> FloatArray:
        return np.linspace(0.0, self.T, self.nt + 1)


class Trajectory(BaseModel):
    """Time path of fields, ``values[k]`` being the snapshot at ``t_k = k dt``."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: Grid
    timegrid: TimeGrid
    values: FloatArray

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v: Any) -> FloatArray:
        arr = np.array(v, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError("trajectory values must be a 2-D array (steps x nodes)")
        arr.flags.writeable = False
        return arr

    @model_validator(mode="after")
    def _check_shape(self) -> Trajectory:
        expected = (self.timegrid.nt + 1, self.grid.size)
        if self.values.shape != expected:
            raise ValueError(
                f"trajectory shape {self.values.shape} does not match {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("trajectory values must be finite")
        return self

    @classmethod
    def constant(cls, f: ScalarField, tg: TimeGrid) -> Trajectory:
        values = np.broadcast_to(f.values, (tg.nt + 1, f.grid.size))
        return cls(grid=f.grid, timegrid=tg, values=values)

    @property
    def times(self) -> FloatArray:
        return self.timegrid.times()

    def snapshot(self, k: int) -> ScalarField:
        return ScalarField(grid=self.grid, values=self.values[k])

    @property
    def snapshots(self) -> list[ScalarField]:
        return [self.snapshot(k) for k in range(self.timegrid.nt + 1)]

    @property
    def final(self) -> ScalarField:
        return self.snapshot(self.timegrid.nt)


def forward_values(
    op: EllipticOperator, a_values: FloatArray, y0_values: FloatArray, tg: TimeGrid
) -> FloatArray:
    lu = op.factor(tg.dt)
    out = np.empty((tg.nt + 1, op.grid.size))
    out[0] = y0_values
    for k in range(tg.nt):
        out[k + 1] = lu.solve(out[k] + tg.dt * a_values[k + 1])
    return out


def adjoint_values(
    op: EllipticOperator,
    y_values: FloatArray,
    yd_values: FloatArray,
    tg: TimeGrid,
    gamma1: float,
    gamma2: float,
) -> FloatArray:
    lu = op.factor(tg.dt)
    weight = tg.dt * gamma1 / tg.T
    p = np.empty_like(y_values)
    nxt = np.zeros(op.grid.size)
    for k in range(tg.nt, -1, -1):
        rhs = nxt + weight * (yd_values - y_values[k])
        if k == tg.nt:
            rhs = rhs + gamma2 * (yd_values - y_values[k])
        p[k] = lu.solve(rhs, trans="T")
        nxt = p[k]
    return p


def solve_forward(
    op: EllipticOperator, a_path: Trajectory, y0: ScalarField, tg: TimeGrid
) -> Trajectory:
    op.grid.check_same(a_path.grid)
    op.grid.check_same(y0.grid)
    if a_path.timegrid != tg:
        raise ValueError("control path is not on the given time grid")
    values = forward_values(op, a_path.values, y0.values, tg)
    return Trajectory(grid=op.grid, timegrid=tg, values=values)


def solve_adjoint(
    op: EllipticOperator,
    y_path: Trajectory,
    y_d: ScalarField,
    tg: TimeGrid,
    gamma1: float,
    gamma2: float,
) -> Trajectory:
    """Backward recursion ``(I + dt A*) p^k = p^{k+1} + dt (g1/T)(y_d - y^k)``.

    The terminal step additionally carries ``g2 (y_d - y^nt)``, so
    ``p^nt = (I + dt A*)^{-1} [dt (g1/T) + g2] (y_d - y^nt)``; for the terminal
    cost alone this is ``(I + dt A*)^{-1} g2 (y_d - y^nt)``, one implicit step
    off the continuous final condition. With this convention
    ``dJ/da^k = -dt p^k`` for k >= 1.
    """
    op.grid.check_same(y_path.grid)
    op.grid.check_same(y_d.grid)
    values = adjoint_values(op, y_path.values, y_d.values, tg, gamma1, gamma2)
    return Trajectory(grid=op.grid, timegrid=tg, values=values)


class EigenPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    lambda_: float = Field(gt=0, serialization_alias="lambda")
    phi: ScalarField
    indices: tuple[int, int] | None = None

    @model_validator(mode="after")
    def _check_normalized(self) -> EigenPair:
        if abs(norm_l2(self.phi) - 1.0) > 1e-10:
            raise ValueError("eigenfunction must have unit L2 norm")
        return self

    @property
    def poincare_constant(self) -> float:
        return 1.0 / self.lambda_


def discrete_eigenvalue(grid: Grid, m: int, n: int) -> float:
    """Eigenvalue of the 5-point Laplacian for the sampled (m, n) sine mode."""
    lx, ly = grid.lengths
    return float(
        4 / grid.hx**2 * np.sin(m * np.pi * grid.hx / (2 * lx)) ** 2
        + 4 / grid.hy**2 * np.sin(n * np.pi * grid.hy / (2 * ly)) ** 2
    )


def discrete_poincare_constant(grid: Grid) -> float:
    return 1.0 / discrete_eigenvalue(grid, 1, 1)


def analytic_modes(grid: Grid, kmax: int, discrete: bool = False) -> list[EigenPair]:
    """Sine modes of the box Dirichlet Laplacian, sorted by eigenvalue then (m, n).

    ``discrete=True`` reports the exact 5-point eigenvalues instead of the
    continuous ones (the sampled modes are eigenvectors of both).
    """
    if kmax < 1:
        raise ValueError("kmax must be >= 1")
    X, Y = grid.coordinates()
    lx, ly = grid.lengths
    entries = []
    for m in range(1, min(kmax, grid.nx) + 1):
        sx = np.sin(m * np.pi * (X - grid.xmin) / lx)
        for n in range(1, min(kmax, grid.ny) + 1):
            if discrete:
                lam = discrete_eigenvalue(grid, m, n)
            else:
                lam = float(np.pi**2 * (m**2 / lx**2 + n**2 / ly**2))
            phi = ScalarField(grid=grid, values=sx * np.sin(n * np.pi * (Y - grid.ymin) / ly))
            phi = phi * (1.0 / norm_l2(phi))
            entries.append((lam, m, n, phi))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    return [EigenPair(lambda_=lam, phi=phi, indices=(m, n)) for lam, m, n, phi in entries]


def smallest_eigenvalue(
    op: EllipticOperator, tol: float = 1e-8, max_iter: int = 500
) -> EigenPair:
    """Inverse power iteration on the symmetric part of ``A``."""
    S = 0.5 * (op.matrix + op.adjoint_matrix)
    lam, v = _inverse_iteration(S, tol, max_iter)
    if v.sum() < 0:
        v = -v
    phi = ScalarField(grid=op.grid, values=v / np.sqrt(op.grid.cell_area))
    phi = phi * (1.0 / norm_l2(phi))
    return EigenPair(lambda_=lam, phi=phi)


class InequalityReport(BaseModel):
    name: str
    max_ratio: float
    violated: bool
    assumptions_hold: bool
    constants: dict[str, float]
    lhs: list[float]
    rhs: list[float]
    decay_rate: float | None = None


def _ratio(lhs: FloatArray, rhs: FloatArray) -> float:
    scale = max(float(np.abs(rhs).max()), float(np.abs(lhs).max()), 1e-300)
    ratios = np.where(
        rhs > 1e-14 * scale,
        lhs / np.maximum(rhs, 1e-300),
        np.where(lhs > 1e-14 * scale, np.inf, 0.0),
    )
    return float(ratios.max())


def _squared_norms(grid: Grid, values: FloatArray) -> FloatArray:
    return grid.cell_area * np.einsum("ki,ki->k", values, values)


def check_energy_inequality(
    y_path: Trajectory, a_path: Trajectory, op: EllipticOperator
) -> InequalityReport:
    """``|y(t)|^2 + int |grad y|^2 <= C (|y0|^2 + int |a|^2)``, right-endpoint sums."""
    grid = op.grid
    dt = y_path.timegrid.dt
    lap = _assemble_matrix(
        grid,
        np.ones(grid.shape),
        np.zeros(grid.shape),
        np.zeros(grid.shape),
        np.zeros(grid.shape),
    )
    beta = op.theta
    cp = discrete_poincare_constant(grid)
    C = max(1.0, 1.0 / beta) * max(1.0, cp / beta)

    y = y_path.values
    y_norm2 = _squared_norms(grid, y)
    grad2 = grid.cell_area * np.einsum("ki,ki->k", y, (lap @ y.T).T)
    a_norm2 = _squared_norms(grid, a_path.values)

    lhs = y_norm2.copy()
    lhs[1:] += dt * np.cumsum(grad2[1:])
    rhs = np.full_like(lhs, y_norm2[0])
    rhs[1:] += dt * np.cumsum(a_norm2[1:])
    rhs *= C

    max_ratio = _ratio(lhs, rhs)
    return InequalityReport(
        name="energy",
        max_ratio=max_ratio,
        violated=max_ratio > 1 + 1e-8,
        assumptions_hold=op.is_symmetric,
        constants={"C": C, "beta": beta, "poincare": cp},
        lhs=lhs.tolist(),
        rhs=rhs.tolist(),
    )


def check_gronwall(
    y_path: Trajectory, a_path: Trajectory, op: EllipticOperator
) -> InequalityReport:
    """``|y(t)|^2 <= |y0|^2 e^{-C1 t} + C2 int e^{-C1 (t-s)} |a(s)|^2 ds``.

    C1 = lambda_1, C2 = 1 / lambda_1 of the symmetric part of A.
    """
    grid = op.grid
    tg = y_path.timegrid
    dt = tg.dt
    lam = op.lambda1
    c1, c2 = lam, 1.0 / lam

    y_norm2 = _squared_norms(grid, y_path.values)
    a_norm2 = _squared_norms(grid, a_path.values)
    decay = np.exp(-c1 * dt)
    forcing = np.zeros(tg.nt + 1)
    for k in range(1, tg.nt + 1):
        forcing[k] = decay * forcing[k - 1] + dt * a_norm2[k]
    rhs = y_norm2[0] * np.exp(-c1 * tg.times()) + c2 * forcing

    decay_rate = None
    if not np.any(a_path.values) and y_norm2[0] > 0:
        usable = y_norm2 > 1e-300
        if np.count_nonzero(usable) >= 2:
            slope = np.polyfit(tg.times()[usable], np.log(y_norm2[usable]), 1)[0]
            decay_rate = float(-slope)

    max_ratio = _ratio(y_norm2, rhs)
    return InequalityReport(
        name="gronwall",
        max_ratio=max_ratio,
        violated=max_ratio > 1 + 1e-8,
        assumptions_hold=True,
        constants={"C1": c1, "C2": c2},
        lhs=y_norm2.tolist(),
        rhs=rhs.tolist(),
        decay_rate=decay_rate,
    )
