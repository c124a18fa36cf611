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
"""Conditional-gradient solvers for the relaxed dynamic and static shape problems.

The linear maximization oracle over the admissible set is the bathtub
principle, so every iterate is a convex combination of superlevel-set
characteristic functions and the duality gap certifies optimality.
"""

from __future__ import annotations

from enum import Enum
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from shape_turnpike.admissible import (
    Density,
    bathtub_values,
    check_fraction,
    project,
)
from shape_turnpike.grid import FloatArray, Grid, ScalarField
from shape_turnpike.logging_helper import get_logger, log_solver_call
from shape_turnpike.pde import (
    EllipticOperator,
    TimeGrid,
    Trajectory,
    adjoint_values,
    forward_values,
    solve_static_pde,
)

logger = get_logger()


class CostSpec(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    gamma1: float = Field(ge=0)
    gamma2: float = Field(ge=0)
    y_d: ScalarField

    @model_validator(mode="after")
    def _check_weights(self) -> CostSpec:
        if self.gamma1 == 0 and self.gamma2 == 0:
            raise ValueError("gamma1 and gamma2 cannot both be zero")
        return self


class SolverOptions(BaseModel):
    tol_gap: float = Field(default=1e-6, gt=0)
    max_iter: int = Field(default=500, ge=1)
    line_search: Literal["exact", "open_loop"] = "exact"
    vertex_rounds: int = Field(default=8, ge=0)


class IterationRecord(BaseModel):
    iter: int
    cost: float
    gap: float
    step: float


class OptimalTriple(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    y: Trajectory
    p: Trajectory
    a: Trajectory
    L: float
    cost: float
    gap: float
    iterations: int
    certified: bool
    history: list[IterationRecord] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_triple(self) -> OptimalTriple:
        if not np.isfinite(self.cost):
            raise ValueError("cost must be finite")
        if self.gap < -1e-12:
            raise ValueError(f"negative duality gap {self.gap}")
        return self

    @property
    def timegrid(self) -> TimeGrid:
        return self.y.timegrid


class StaticTriple(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    y_bar: ScalarField
    p_bar: ScalarField
    a_bar: Density
    level: float
    cost: float
    gap: float
    iterations: int
    certified: bool
    gamma1: float
    y_d: ScalarField
    history: list[IterationRecord] = Field(default_factory=list)


class ExistenceCase(str, Enum):
    MAYER_UNIQUE = "mayer_unique"
    LAGRANGE_COMPARISON = "lagrange_comparison"
    LAGRANGE_BETA = "lagrange_beta"
    RELAXATION_RISK = "relaxation_risk"


class ExistenceDiagnosis(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    case: ExistenceCase
    y0_bound: ScalarField
    y1_bound: ScalarField
    beta_margin: float | None = None
    message: str = ""


def discrete_cost(
    grid: Grid, y_values: FloatArray, cost: CostSpec, tg: TimeGrid
) -> float:
    """Right-endpoint rule for the running term plus the terminal term."""
    diff = y_values[1:] - cost.y_d.values
    running = grid.cell_area * float(np.einsum("ki,ki->", diff, diff))
    terminal = grid.cell_area * float(diff[-1] @ diff[-1])
    return 0.5 * cost.gamma1 / tg.T * tg.dt * running + 0.5 * cost.gamma2 * terminal


def directional_derivative(
    grid: Grid, p_values: FloatArray, d_values: FloatArray, tg: TimeGrid
) -> float:
    """Derivative of the discrete cost along control direction ``d``."""
    return -tg.dt * grid.cell_area * float(np.einsum("ki,ki->", p_values[1:], d_values[1:]))


def _vertices(p_values: FloatArray, L: float) -> FloatArray:
    cells = L * p_values.shape[1]
    return np.stack([bathtub_values(row, cells)[0] for row in p_values])


def vertex_path(p_path: Trajectory, L: float) -> Trajectory:
    """Per-step bathtub maximizers of an adjoint path."""
    check_fraction(L)
    return Trajectory(
        grid=p_path.grid,
        timegrid=p_path.timegrid,
        values=_vertices(p_path.values, L),
    )


def duality_gap(q_path: Trajectory, a_path: Trajectory, L: float) -> float:
    """``sum_k dt <p^k, s^k - a^k>`` over k = 1..nt, ``s^k`` the bathtub vertex."""
    check_fraction(L)
    q_path.grid.check_same(a_path.grid)
    s = _vertices(q_path.values, L)
    return -directional_derivative(
        q_path.grid, q_path.values, s - a_path.values, q_path.timegrid
    )


def _certified(gap: float, cost: float, opts: SolverOptions) -> bool:
    return gap <= opts.tol_gap * (1 + abs(cost))


def _step(gap: float, curvature: float, iteration: int, opts: SolverOptions) -> float:
    if opts.line_search == "open_loop":
        return 2.0 / (iteration + 2.0)
    return 1.0 if curvature <= 0 else min(1.0, max(0.0, gap / curvature))


def _polish_dynamic(
    op: EllipticOperator,
    cost: CostSpec,
    y0: FloatArray,
    tg: TimeGrid,
    L: float,
    p: FloatArray,
    bound: float,
    opts: SolverOptions,
) -> tuple[FloatArray, FloatArray, FloatArray, float, float] | None:
    """Round to the vertex path of ``p`` and iterate the bathtub oracle.

    A vertex path is accepted when its own gap is certified and its cost stays
    below ``bound``, the cost plus gap of the iterate it replaces.
    """
    grid = op.grid
    s = _vertices(p, L)
    for rounds in range(1, opts.vertex_rounds + 1):
        y_s = forward_values(op, s, y0, tg)
        J_s = discrete_cost(grid, y_s, cost, tg)
        p_s = adjoint_values(op, y_s, cost.y_d.values, tg, cost.gamma1, cost.gamma2)
        s_next = _vertices(p_s, L)
        gap_s = -directional_derivative(grid, p_s, s_next - s, tg)
        if _certified(gap_s, J_s, opts) and J_s <= bound:
            logger.info(f"Vertex path accepted after {rounds} rounds: gap={gap_s:.3e}")
            return s, y_s, p_s, J_s, gap_s
        if np.array_equal(s_next, s):
            break
        s = s_next
    return None


@log_solver_call
def solve_dynamic(
    op: EllipticOperator,
    cost: CostSpec,
    y0: ScalarField,
    tg: TimeGrid,
    L: float,
    opts: SolverOptions | None = None,
) -> OptimalTriple:
    opts = opts or SolverOptions()
    check_fraction(L)
    grid = op.grid
    grid.check_same(y0.grid)
    grid.check_same(cost.y_d.grid)
    ca, dt = grid.cell_area, tg.dt
    g1, g2 = cost.gamma1, cost.gamma2
    yd = cost.y_d.values

    a = np.full((tg.nt + 1, grid.size), L)
    y = forward_values(op, a, y0.values, tg)
    J = discrete_cost(grid, y, cost, tg)
    zero = np.zeros(grid.size)
    history: list[IterationRecord] = []
    iterations = 0
    logger.info(
        f"Dynamic solve: T={tg.T}, nt={tg.nt}, grid={grid.nx}x{grid.ny}, "
        f"gamma=({g1}, {g2}), L={L}"
    )
    while True:
        p = adjoint_values(op, y, yd, tg, g1, g2)
        s = _vertices(p, L)
        gap = -directional_derivative(grid, p, s - a, tg)
        if _certified(gap, J, opts) or iterations >= opts.max_iter:
            break
        d = s - a
        dy = forward_values(op, d, zero, tg)
        curvature = g1 / tg.T * dt * ca * float(
            np.einsum("ki,ki->", dy[1:], dy[1:])
        ) + g2 * ca * float(dy[-1] @ dy[-1])
        step = _step(gap, curvature, iterations, opts)
        a = a + step * d
        y = y + step * dy
        J = discrete_cost(grid, y, cost, tg)
        iterations += 1
        history.append(IterationRecord(iter=iterations, cost=J, gap=gap, step=step))
        logger.debug(f"{iterations},{J:.12e},{gap:.12e},{step:.6e}")

    polished = _polish_dynamic(op, cost, y0.values, tg, L, p, J + max(gap, 0.0), opts)
    if polished is not None:
        a, y, p, J, gap = polished
    certified = _certified(gap, J, opts)
    if certified:
        logger.info(f"Certified after {iterations} iterations: cost={J:.8e} gap={gap:.3e}")
    else:
        logger.warning(
            f"Gap tolerance unmet after {iterations} iterations: "
            f"gap={gap:.3e} > {opts.tol_gap:.1e}*(1+|cost|)"
        )
    return OptimalTriple(
        y=Trajectory(grid=grid, timegrid=tg, values=y),
        p=Trajectory(grid=grid, timegrid=tg, values=p),
        a=Trajectory(grid=grid, timegrid=tg, values=np.clip(a, 0.0, 1.0)),
        L=L,
        cost=J,
        gap=max(gap, 0.0),
        iterations=iterations,
        certified=certified,
        history=history,
    )


def _static_cost(grid: Grid, y: FloatArray, cost: CostSpec) -> float:
    diff = y - cost.y_d.values
    return 0.5 * cost.gamma1 * grid.cell_area * float(diff @ diff)


def _static_triple(
    op: EllipticOperator,
    cost: CostSpec,
    L: float,
    a: FloatArray,
    iterations: int,
    history: list[IterationRecord],
    opts: SolverOptions,
) -> StaticTriple:
    grid = op.grid
    a_bar = Density(field=ScalarField(grid=grid, values=np.clip(a, 0.0, 1.0)), L=L)
    y_bar = solve_static_pde(op, a_bar.field)
    p = op.factor(0.0).solve(cost.gamma1 * (cost.y_d.values - y_bar.values), trans="T")
    s, level = bathtub_values(p, L * grid.size)
    gap = max(0.0, grid.cell_area * float(p @ (s - a_bar.values)))
    J = _static_cost(grid, y_bar.values, cost)
    return StaticTriple(
        y_bar=y_bar,
        p_bar=ScalarField(grid=grid, values=p),
        a_bar=a_bar,
        level=level,
        cost=J,
        gap=gap,
        iterations=iterations,
        certified=_certified(gap, J, opts),
        gamma1=cost.gamma1,
        y_d=cost.y_d,
        history=history,
    )


def _require_lagrange(cost: CostSpec) -> None:
    if cost.gamma1 == 0:
        raise ValueError("static Mayer problem has no criterion")


def _polish_static(
    op: EllipticOperator,
    cost: CostSpec,
    L: float,
    p: FloatArray,
    bound: float,
    opts: SolverOptions,
) -> FloatArray | None:
    """Static counterpart of :func:`_polish_dynamic`; returns the accepted vertex."""
    grid = op.grid
    lu = op.factor(0.0)
    cells = L * grid.size
    s, _ = bathtub_values(p, cells)
    for rounds in range(1, opts.vertex_rounds + 1):
        y_s = lu.solve(s)
        J_s = _static_cost(grid, y_s, cost)
        p_s = lu.solve(cost.gamma1 * (cost.y_d.values - y_s), trans="T")
        s_next, _ = bathtub_values(p_s, cells)
        gap_s = grid.cell_area * float(p_s @ (s_next - s))
        if _certified(gap_s, J_s, opts) and J_s <= bound:
            logger.info(f"Static vertex accepted after {rounds} rounds: gap={gap_s:.3e}")
            return s
        if np.array_equal(s_next, s):
            break
        s = s_next
    return None


@log_solver_call
def solve_static(
    op: EllipticOperator,
    cost: CostSpec,
    L: float,
    opts: SolverOptions | None = None,
) -> StaticTriple:
    """Minimize ``g1/2 |A^{-1} a - y_d|^2`` over admissible densities.

    The adjoint solves ``A* p = g1 (y_d - y)``.
    """
    _require_lagrange(cost)
    opts = opts or SolverOptions()
    check_fraction(L)
    grid = op.grid
    grid.check_same(cost.y_d.grid)
    lu = op.factor(0.0)
    g1, yd, ca = cost.gamma1, cost.y_d.values, grid.cell_area

    a = np.full(grid.size, L)
    y = lu.solve(a)
    J = _static_cost(grid, y, cost)
    history: list[IterationRecord] = []
    iterations = 0
    while True:
        p = lu.solve(g1 * (yd - y), trans="T")
        s, _ = bathtub_values(p, L * grid.size)
        gap = ca * float(p @ (s - a))
        if _certified(gap, J, opts) or iterations >= opts.max_iter:
            break
        d = s - a
        dy = lu.solve(d)
        curvature = g1 * ca * float(dy @ dy)
        step = _step(gap, curvature, iterations, opts)
        a = a + step * d
        y = y + step * dy
        J = _static_cost(grid, y, cost)
        iterations += 1
        history.append(IterationRecord(iter=iterations, cost=J, gap=gap, step=step))
        logger.debug(f"{iterations},{J:.12e},{gap:.12e},{step:.6e}")

    vertex = _polish_static(op, cost, L, p, J + max(gap, 0.0), opts)
    if vertex is not None:
        a = vertex
    triple = _static_triple(op, cost, L, a, iterations, history, opts)
    if not triple.certified:
        logger.warning(
            f"Static gap tolerance unmet after {iterations} iterations: gap={triple.gap:.3e}"
        )
    return triple


def _inverse_norm_squared(op: EllipticOperator, n_iter: int = 100) -> float:
    """Power iteration for the largest eigenvalue of ``A^{-T} A^{-1}``."""
    lu = op.factor(0.0)
    v = np.ones(op.grid.size) / np.sqrt(op.grid.size)
    est = 0.0
    for _ in range(n_iter):
        w = lu.solve(lu.solve(v), trans="T")
        est = float(np.linalg.norm(w))
        v = w / est
    return est


@log_solver_call
def solve_static_projected(
    op: EllipticOperator,
    cost: CostSpec,
    L: float,
    opts: SolverOptions | None = None,
) -> StaticTriple:
    """Projected-gradient cross-check for the static problem (small grids)."""
    _require_lagrange(cost)
    opts = opts or SolverOptions()
    check_fraction(L)
    grid = op.grid
    lu = op.factor(0.0)
    g1, yd = cost.gamma1, cost.y_d.values
    step = 1.0 / (g1 * _inverse_norm_squared(op))

    a = np.full(grid.size, L)
    history: list[IterationRecord] = []
    for it in range(1, opts.max_iter + 1):
        y = lu.solve(a)
        p = lu.solve(g1 * (yd - y), trans="T")
        s, _ = bathtub_values(p, L * grid.size)
        gap = grid.cell_area * float(p @ (s - a))
        J = _static_cost(grid, y, cost)
        if _certified(gap, J, opts):
            break
        a = project(ScalarField(grid=grid, values=a + step * p), L).values
        history.append(IterationRecord(iter=it, cost=J, gap=gap, step=step))
    return _static_triple(op, cost, L, a, len(history), history, opts)


def compute_comparison_bounds(
    op: EllipticOperator, y0: ScalarField, tg: TimeGrid
) -> tuple[ScalarField, ScalarField]:
    """Pointwise envelopes of the a=0 and a=1 solutions, static and dynamic."""
    grid = op.grid
    zeros = np.zeros((tg.nt + 1, grid.size))
    y_off = forward_values(op, zeros, y0.values, tg)
    y_on = forward_values(op, np.ones_like(zeros), y0.values, tg)
    static_on = solve_static_pde(op, ScalarField.constant(grid, 1.0)).values
    lower = np.minimum(0.0, y_off.min(axis=0))
    upper = np.maximum(static_on, y_on.max(axis=0))
    return ScalarField(grid=grid, values=lower), ScalarField(grid=grid, values=upper)


def classify_target(
    op: EllipticOperator,
    cost: CostSpec,
    y0: ScalarField,
    tg: TimeGrid,
    bounds: tuple[ScalarField, ScalarField],
    static: StaticTriple | None = None,
    tol: float = 1e-8,
) -> ExistenceDiagnosis:
    """Report which sufficient condition for existence of optimal shapes holds."""
    lower, upper = bounds
    yd = cost.y_d.values
    if cost.gamma1 == 0:
        return ExistenceDiagnosis(
            case=ExistenceCase.MAYER_UNIQUE,
            y0_bound=lower,
            y1_bound=upper,
            message="terminal cost only: optimal shapes exist and are unique",
        )
    if np.all(yd < lower.values) or np.all(yd > upper.values):
        return ExistenceDiagnosis(
            case=ExistenceCase.LAGRANGE_COMPARISON,
            y0_bound=lower,
            y1_bound=upper,
            message="target lies outside the reachable envelope",
        )
    if static is None:
        raise ValueError("the beta test needs a solved StaticTriple")

    grid = op.grid
    a_yd = op.apply_extended(cost.y_d).values
    bx, by = op.b[0].as_2d(), op.b[1].as_2d()
    div_b = np.gradient(bx, grid.hx, axis=0, edge_order=2) + np.gradient(
        by, grid.hy, axis=1, edge_order=2
    )
    c_star = ScalarField(grid=grid, values=op.c.as_2d() - div_b)
    beta = static.level * op.apply_extended(c_star).values
    margin = float(np.min(beta - a_yd))
    scale = max(1.0, float(np.abs(a_yd).max()), float(np.abs(beta).max()))
    if margin >= -tol * scale:
        case = ExistenceCase.LAGRANGE_BETA
        message = "A y_d <= beta holds: optimal shapes exist"
    else:
        case = ExistenceCase.RELAXATION_RISK
        message = "A y_d <= beta fails: the relaxed optimum may not be a shape"
    logger.info(f"Target classification: {case.value} (beta margin {margin:.3e})")
    return ExistenceDiagnosis(
        case=case, y0_bound=lower, y1_bound=upper, beta_margin=margin, message=message
    )
