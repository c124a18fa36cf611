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

from pathlib import Path

import numpy as np
import pytest

from shape_turnpike.admissible import random_density
from shape_turnpike.grid import Grid, ScalarField, ShapeMask, build_grid
from shape_turnpike.pde import (
    EllipticOperator,
    TimeGrid,
    Trajectory,
    analytic_modes,
    solve_forward,
)
from shape_turnpike.solver import (
    CostSpec,
    OptimalTriple,
    SolverOptions,
    StaticTriple,
    solve_dynamic,
    solve_static,
)
from shape_turnpike.turnpike import (
    ErrorCurves,
    TurnpikeReport,
    adjoint_deviation_curve,
    boundary_hausdorff_curve,
    check_dissipativity,
    error_curves,
    exp_fit,
    hausdorff_curve,
    integral_turnpike,
    measure_turnpike,
    read_curves_csv,
    shape_stationarity,
    spectral_mayer_predict,
    write_curves_csv,
    write_report,
)


@pytest.fixture
def lagrange(lap: EllipticOperator) -> tuple[OptimalTriple, StaticTriple]:
    grid = lap.grid
    cost = CostSpec(gamma1=1.0, gamma2=0.0, y_d=ScalarField.constant(grid, 0.1))
    opts = SolverOptions(tol_gap=1e-9, max_iter=2000)
    static = solve_static(lap, cost, 0.125, opts)
    triple = solve_dynamic(lap, cost, ScalarField.zeros(grid), TimeGrid(T=2.0, nt=16), 0.125, opts)
    return triple, static


def _curves(dy: list[float], dt: float = 0.5) -> ErrorCurves:
    n = len(dy)
    zeros = np.zeros(n)
    return ErrorCurves(
        times=dt * np.arange(n), dy=dy, dp=zeros, da_l2=zeros, da_l1=zeros, dh=zeros, total=dy
    )


def test_exp_fit_recovers_terminal_rate() -> None:
    t = np.linspace(0.0, 5.0, 51)
    fit = exp_fit(2.0 * np.exp(-3.0 * (5.0 - t)), t, 1.0, 4.5)
    assert fit.mu == pytest.approx(3.0, rel=1e-9)
    assert fit.M == pytest.approx(2.0, rel=1e-9)
    assert fit.residual < 1e-9
    assert fit.n_points == 36


def test_exp_fit_recovers_initial_rate() -> None:
    t = np.linspace(0.0, 5.0, 51)
    fit = exp_fit(0.5 * np.exp(-1.5 * t), t, 0.5, 2.5, side="initial")
    assert fit.mu == pytest.approx(1.5, rel=1e-9)
    assert fit.side == "initial"


def test_exp_fit_edge_cases() -> None:
    t = np.linspace(0.0, 1.0, 11)
    with pytest.raises(ValueError, match="at least 4"):
        exp_fit(np.ones(11), t, 0.0, 0.2)
    with pytest.raises(ValueError, match="inside"):
        exp_fit(np.ones(11), t, 0.0, 2.0)
    with pytest.raises(ValueError, match="t_lo < t_hi"):
        exp_fit(np.ones(11), t, 0.5, 0.5)
    flat = exp_fit(np.zeros(11), t, 0.0, 1.0)
    assert flat.degenerate
    assert flat.mu == 0.0


def test_integral_and_measure_turnpike() -> None:
    curves = _curves([1.0, 1.0, 1.0, 1.0, 1.0])
    assert integral_turnpike(curves) == pytest.approx(2.0)
    curves = _curves([0.9, 0.2, 0.01, 0.02, 0.5])
    assert measure_turnpike(curves, 0.1) == pytest.approx(1.5)
    assert measure_turnpike(curves, 1.0) == 0.0
    with pytest.raises(ValueError, match="positive"):
        measure_turnpike(curves, 0.0)


def test_error_curves_reject_negative_values() -> None:
    with pytest.raises(ValueError, match="negative"):
        _curves([1.0, -0.5, 0.0, 0.0])


def test_error_curves_of_a_solved_problem(lagrange: tuple[OptimalTriple, StaticTriple]) -> None:
    triple, static = lagrange
    curves = error_curves(triple, static)
    assert curves.times.size == triple.timegrid.nt + 1
    np.testing.assert_allclose(curves.total, curves.dy + curves.dp + curves.da_l2)
    assert curves.dy[0] > 0
    assert np.all(curves.da_l1 <= 2 * triple.y.grid.measure)
    # the middle of the horizon is closer to the static optimum than the start
    middle = curves.total[4:13].min()
    assert middle < curves.total[0]


def test_dissipativity_along_optimal_and_random_paths(
    lagrange: tuple[OptimalTriple, StaticTriple],
    lap: EllipticOperator,
    rng: np.random.Generator,
) -> None:
    triple, static = lagrange
    report = check_dissipativity(triple.y, triple.a, static)
    assert report.residual[0] == 0.0
    assert report.min_residual >= -report.gap_allowance - 1e-9 * report.scale
    grid = triple.y.grid
    tg = triple.timegrid
    y0 = ScalarField.zeros(grid)
    for _ in range(20):
        controls = np.stack([random_density(grid, 0.125, rng).values for _ in range(tg.nt + 1)])
        a_path = Trajectory(grid=grid, timegrid=tg, values=controls)
        y_path = solve_forward(lap, a_path, y0, tg)
        report = check_dissipativity(y_path, a_path, static)
        assert report.residual[0] == 0.0
        assert report.min_residual >= -report.gap_allowance - 1e-9 * report.scale


def test_hausdorff_curve_marks_empty_snapshots(grid: Grid) -> None:
    tg = TimeGrid(T=1.0, nt=2)
    values = np.zeros((3, grid.size))
    values[1, 0] = 1.0
    values[2, :2] = 1.0
    reference = ShapeMask(grid=grid, inside=values[1] > 0)
    curve = hausdorff_curve(Trajectory(grid=grid, timegrid=tg, values=values), reference)
    assert np.isnan(curve[0])
    assert curve[1] == 0.0
    assert curve[2] == pytest.approx(grid.hy)


def test_shape_stationarity(grid: Grid) -> None:
    tg = TimeGrid(T=1.0, nt=4)
    values = np.zeros((5, grid.size))
    values[:, :3] = 1.0
    path = Trajectory(grid=grid, timegrid=tg, values=values)
    assert shape_stationarity(path, 0.0, 1.0) == 0.0
    values[4, 3] = 1.0
    path = Trajectory(grid=grid, timegrid=tg, values=values)
    assert shape_stationarity(path, 0.0, 1.0) == pytest.approx(grid.cell_area)
    assert shape_stationarity(path, 0.0, 0.5) == 0.0


def test_spectral_prediction_from_mode_combination(grid: Grid) -> None:
    modes = analytic_modes(grid, 4, discrete=True)
    by_index = {m.indices: m for m in modes}
    terminal = 2.0 * by_index[(1, 1)].phi + 0.5 * by_index[(1, 3)].phi
    prediction = spectral_mayer_predict(terminal, modes, 0.125)
    assert prediction.j0 == 0
    assert prediction.lambda_ == pytest.approx(by_index[(1, 1)].lambda_)
    assert prediction.mu == pytest.approx(by_index[(1, 2)].lambda_)
    assert prediction.mu_active == pytest.approx(by_index[(1, 3)].lambda_)
    assert prediction.coefficients[0] == pytest.approx(2.0)
    np.testing.assert_allclose(prediction.Phi0.values, 2.0 * by_index[(1, 1)].phi.values)
    assert prediction.omega0.count == round(0.125 * grid.size)
    assert prediction.min_gradient > 0
    assert prediction.hausdorff_constant == pytest.approx(2.0 / prediction.min_gradient)
    assert 0 < prediction.discrete_rate(0.1) < prediction.rate


def test_spectral_prediction_needs_a_signal(grid: Grid) -> None:
    with pytest.raises(ValueError, match="below tolerance"):
        spectral_mayer_predict(ScalarField.zeros(grid), analytic_modes(grid, 3), 0.125)


def test_adjoint_deviation_vanishes_on_the_profile(grid: Grid) -> None:
    modes = analytic_modes(grid, 3, discrete=True)
    prediction = spectral_mayer_predict(modes[0].phi, modes, 0.125)
    tg = TimeGrid(T=1.0, nt=10)
    profile = prediction.adjoint_profile(tg.times(), tg.T, tg.dt)
    assert profile[-1] == pytest.approx(1.0 / (1.0 + tg.dt * prediction.lambda_))
    values = profile[:, None] * prediction.Phi0.values
    p_path = Trajectory(grid=grid, timegrid=tg, values=values)
    assert np.max(adjoint_deviation_curve(p_path, prediction)) < 1e-12


def test_curves_csv_round_trip_is_exact(
    tmp_path: Path, lagrange: tuple[OptimalTriple, StaticTriple]
) -> None:
    triple, static = lagrange
    curves = error_curves(triple, static)
    write_curves_csv(curves, tmp_path / "curves.csv")
    back = read_curves_csv(tmp_path / "curves.csv")
    for name in ("times", "dy", "dp", "da_l2", "da_l1", "dh", "total"):
        np.testing.assert_array_equal(getattr(back, name), getattr(curves, name))


def test_report_json_replaces_non_finite_values(tmp_path: Path) -> None:
    report = TurnpikeReport(T=1.0, nt=4, integral_turnpike=float("nan"))
    write_report(report, tmp_path / "turnpike.json")
    text = (tmp_path / "turnpike.json").read_text()
    assert '"integral_turnpike": null' in text


def test_exp_fit_tolerates_multiplicative_noise(rng: np.random.Generator) -> None:
    t = np.linspace(0.0, 4.0, 161)
    curve = 3.0 * np.exp(-2.0 * (4.0 - t)) * (1 + 0.01 * rng.normal(size=t.size))
    fit = exp_fit(curve, t, 0.8, 3.6)
    assert fit.mu == pytest.approx(2.0, rel=0.05)


def test_exp_fit_separates_the_two_arcs_of_a_symmetric_curve() -> None:
    T, mu, nu = 30.0, 2.0, 0.1
    t = np.linspace(0.0, T, 3001)
    curve = 3.0 * np.exp(-mu * (T - t)) + 3.0 * np.exp(-mu * t)
    terminal = exp_fit(curve, t, 0.5 * T, (1 - nu) * T, floor=1e-15)
    initial = exp_fit(curve, t, nu * T, 0.5 * T, floor=1e-15, side="initial")
    assert terminal.mu == pytest.approx(mu, rel=0.01)
    assert initial.mu == pytest.approx(mu, rel=0.01)


def test_measure_turnpike_is_non_increasing_in_eps(
    lagrange: tuple[OptimalTriple, StaticTriple],
) -> None:
    curves = error_curves(*lagrange)
    scale = float(np.max(curves.dy + curves.dp))
    measures = [measure_turnpike(curves, eps * scale) for eps in np.geomspace(1e-4, 2.0, 25)]
    assert all(b <= a for a, b in zip(measures, measures[1:]))
    assert measures[-1] == 0.0


def test_boundary_hausdorff_curve_follows_the_perturbation() -> None:
    grid = build_grid((-1.0, 1.0, -1.0, 1.0), 31, 31)
    modes = analytic_modes(grid, 4, discrete=True)
    by_index = {m.indices: m for m in modes}
    prediction = spectral_mayer_predict(by_index[(1, 1)].phi, modes, 0.125)
    tg = TimeGrid(T=2.0, nt=40)
    t = tg.times()
    eps = 0.02 * np.exp(-3.0 * (tg.T - t))
    values = by_index[(1, 1)].phi.values + eps[:, None] * by_index[(2, 1)].phi.values
    values[0] = 0.0
    path = Trajectory(grid=grid, timegrid=tg, values=values)
    curve = boundary_hausdorff_curve(path, prediction, 0.125)
    assert np.isnan(curve[0])
    assert np.nanmax(curve) < grid.hx
    fit = exp_fit(curve, t, 0.5, 2.0)
    assert fit.mu == pytest.approx(3.0, rel=0.15)
