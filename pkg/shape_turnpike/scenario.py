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
"""Scenario orchestration: solves, diagnostics and artifact layout on disk.

A run directory holds ``dynamic/`` (state, adjoint and control
trajectories), ``log.csv``, ``turnpike.json`` and, for running costs,
``curves.csv``. Sweeps put one run directory per horizon under ``T_<T>/``
and share ``static/`` at the top level.
"""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict

from shape_turnpike.admissible import Density, threshold_to_shape
from shape_turnpike.fieldio import (
    CSV_FLOAT_FORMAT,
    read_field_csv,
    read_trajectory,
    write_field_csv,
    write_field_pgm,
    write_json,
    write_mask_pgm,
    write_trajectory,
)
from shape_turnpike.grid import ScalarField
from shape_turnpike.logging_helper import (
    format_json,
    get_logger,
    log_error_details,
    log_memory,
)
from shape_turnpike.pde import (
    EigenPair,
    EllipticOperator,
    TimeGrid,
    analytic_modes,
    assemble_operator,
    check_energy_inequality,
    check_gronwall,
)
from shape_turnpike.schema import (
    ConfigError,
    OutputConfig,
    RunConfig,
    RunEntry,
    RunSummary,
    StaticEntry,
)
from shape_turnpike.solver import (
    CostSpec,
    ExistenceDiagnosis,
    IterationRecord,
    OptimalTriple,
    SolverOptions,
    StaticTriple,
    classify_target,
    compute_comparison_bounds,
    solve_dynamic,
    solve_static,
    vertex_path,
)
from shape_turnpike.turnpike import (
    ErrorCurves,
    ExpFit,
    SpectralPrediction,
    TurnpikeReport,
    adjoint_deviation_curve,
    boundary_hausdorff_curve,
    check_dissipativity,
    error_curves,
    exp_fit,
    hausdorff_curve,
    integral_turnpike,
    measure_turnpike,
    shape_stationarity,
    spectral_mayer_predict,
    write_curves_csv,
    write_report,
)

logger = get_logger()

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_GAP = 2
EXIT_SOLVER = 3

HISTORY_COLUMNS = ["iter", "cost", "gap", "step"]


class Scenario(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    config: RunConfig
    op: EllipticOperator
    cost: CostSpec
    y0: ScalarField

    @property
    def options(self) -> SolverOptions:
        return SolverOptions(**self.config.solver.model_dump())


def build_scenario(config: RunConfig, base_dir: Path | None = None) -> Scenario:
    logger.debug(f"Experiment card:\n{format_json(config)}")
    grid = config.grid()
    try:
        y_d = config.y_d.to_field(grid, base_dir)
        y0 = config.y0.to_field(grid, base_dir)
    except (OSError, ValueError) as e:
        raise ConfigError(f"target fields: {e}") from e
    op = assemble_operator(grid, config.alpha, config.drift, config.reaction)
    cost = CostSpec(gamma1=config.gamma1, gamma2=config.gamma2, y_d=y_d)
    return Scenario(config=config, op=op, cost=cost, y0=y0)


def horizon_label(T: float) -> str:
    return f"T_{T:g}"


def write_history(history: list[IterationRecord], path: Path) -> None:
    frame = pd.DataFrame([r.model_dump() for r in history], columns=HISTORY_COLUMNS)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


def read_history(path: Path) -> list[IterationRecord]:
    if not Path(path).exists():
        return []
    frame = pd.read_csv(path, float_precision="round_trip")
    return [
        IterationRecord(iter=int(r.iter), cost=float(r.cost), gap=float(r.gap), step=float(r.step))
        for r in frame.itertuples(index=False)
    ]


# Static problem


def write_static(static: StaticTriple, directory: Path, config: RunConfig) -> StaticEntry:
    directory.mkdir(parents=True, exist_ok=True)
    fields = {"y_bar": static.y_bar, "p_bar": static.p_bar, "a_bar": static.a_bar.field}
    for name, f in fields.items():
        write_field_csv(f, directory / f"{name}.csv")
        if config.output.write_pgm:
            write_field_pgm(f, directory / f"{name}.pgm")
    tp = config.turnpike
    mask, relaxation = threshold_to_shape(static.a_bar, tp.threshold, tp.relaxation_band)
    if config.output.write_pgm:
        write_mask_pgm(mask, directory / "shape.pgm")
    if relaxation.flagged:
        logger.warning(
            f"Static density is relaxed on an area of {relaxation.relaxed_area:.4g}"
        )
    write_history(static.history, directory / "log.csv")
    entry = StaticEntry(
        cost=static.cost,
        gap=static.gap,
        level=static.level,
        iterations=static.iterations,
        certified=static.certified,
        relaxation=relaxation,
    )
    write_json(entry, directory / "static.json")
    return entry


def load_static(directory: Path, sc: Scenario) -> StaticTriple:
    meta = json.loads((directory / "static.json").read_text())
    grid = sc.op.grid
    fields = {
        name: read_field_csv(directory / f"{name}.csv", grid)
        for name in ("y_bar", "p_bar", "a_bar")
    }
    level = meta["level"]
    return StaticTriple(
        y_bar=fields["y_bar"],
        p_bar=fields["p_bar"],
        a_bar=Density(field=fields["a_bar"], L=sc.config.L),
        level=-np.inf if level is None else level,
        cost=meta["cost"],
        gap=meta["gap"],
        iterations=meta["iterations"],
        certified=meta["certified"],
        gamma1=sc.cost.gamma1,
        y_d=sc.cost.y_d,
        history=read_history(directory / "log.csv"),
    )


def static_stage(sc: Scenario, out: Path) -> tuple[StaticTriple | None, StaticEntry | None]:
    if sc.cost.gamma1 == 0:
        logger.info("Terminal cost only: the static problem has no criterion, skipping")
        return None, None
    static = solve_static(sc.op, sc.cost, sc.config.L, sc.options)
    return static, write_static(static, out / "static", sc.config)


# Dynamic problem


def write_dynamic(triple: OptimalTriple, directory: Path, output: OutputConfig) -> None:
    for kind, traj in (("y", triple.y), ("p", triple.p), ("a", triple.a)):
        write_trajectory(traj, directory / kind, kind, output.snapshot_stride, output.write_pgm)
    meta = {
        "T": triple.timegrid.T,
        "nt": triple.timegrid.nt,
        "L": triple.L,
        "cost": triple.cost,
        "gap": triple.gap,
        "iterations": triple.iterations,
        "certified": triple.certified,
    }
    write_json(meta, directory / "solve.json")


def load_dynamic(run_dir: Path) -> OptimalTriple:
    directory = run_dir / "dynamic"
    meta = json.loads((directory / "solve.json").read_text())
    return OptimalTriple(
        y=read_trajectory(directory / "y"),
        p=read_trajectory(directory / "p"),
        a=read_trajectory(directory / "a"),
        L=meta["L"],
        cost=meta["cost"],
        gap=meta["gap"],
        iterations=meta["iterations"],
        certified=meta["certified"],
        history=read_history(run_dir / "log.csv"),
    )


def operator_modes(sc: Scenario) -> list[EigenPair]:
    """Eigenpairs of ``-alpha Lap + c`` from the sampled sine modes."""
    if any(sc.config.drift):
        raise ValueError("spectral prediction needs a self-adjoint operator (zero drift)")
    modes = analytic_modes(sc.op.grid, sc.config.turnpike.kmax, discrete=True)
    alpha, c = sc.config.alpha, sc.config.reaction
    return [
        EigenPair(lambda_=alpha * m.lambda_ + c, phi=m.phi, indices=m.indices) for m in modes
    ]


def spectral_prediction(sc: Scenario, triple: OptimalTriple) -> SpectralPrediction:
    terminal = sc.cost.y_d - triple.y.final
    tp = sc.config.turnpike
    return spectral_mayer_predict(terminal, operator_modes(sc), sc.config.L, tp.tol_coef)


def _fit(
    name: str,
    curve: np.ndarray[Any, Any],
    times: np.ndarray[Any, Any],
    window: tuple[float, float],
    floor: float,
    side: Literal["terminal", "initial"] = "terminal",
) -> ExpFit | None:
    try:
        return exp_fit(curve, times, window[0], window[1], floor, side=side)
    except ValueError as e:
        logger.warning(f"Skipping fit {name}: {e}")
        return None


def diagnose(
    sc: Scenario, triple: OptimalTriple, static: StaticTriple | None
) -> tuple[TurnpikeReport, ErrorCurves | None, pd.DataFrame | None]:
    """Turnpike report plus the curve tables backing it."""
    tp = sc.config.turnpike
    tg = triple.timegrid
    T = tg.T
    times = tg.times()
    fits: dict[str, ExpFit] = {}
    curves: ErrorCurves | None = None
    mayer: pd.DataFrame | None = None
    report: dict[str, Any] = {
        "inequalities": {
            "energy": check_energy_inequality(triple.y, triple.a, sc.op),
            "gronwall": check_gronwall(triple.y, triple.a, sc.op),
        },
        "shape_stationarity": shape_stationarity(
            triple.a, tp.stationarity_window[0] * T, tp.stationarity_window[1] * T, tp.threshold
        ),
    }

    if static is not None:
        curves = error_curves(triple, static, tp.threshold)
        scale = float(np.nanmax(curves.total))
        report["integral_turnpike"] = integral_turnpike(curves)
        report["measure_turnpike"] = {
            f"{eps:g}": measure_turnpike(curves, eps * scale) if scale > 0 else 0.0
            for eps in tp.eps_list
        }
        dissipativity = check_dissipativity(triple.y, triple.a, static)
        report["dissipativity"] = dissipativity
        report["dissipativity_min_residual"] = dissipativity.min_residual
        terminal = _fit(
            "total_terminal", curves.total, times, (0.5 * T, (1 - tp.nu) * T), tp.floor
        )
        initial = _fit(
            "total_initial", curves.total, times, (tp.nu * T, 0.5 * T), tp.floor, "initial"
        )
        if terminal is not None:
            fits["total_terminal"] = terminal
        if initial is not None:
            fits["total_initial"] = initial
    else:
        try:
            prediction = spectral_prediction(sc, triple)
        except ValueError as e:
            logger.warning(f"Skipping spectral prediction: {e}")
        else:
            spectral = prediction.summary()
            spectral["discrete_rate"] = prediction.discrete_rate(tg.dt)
            report["spectral"] = spectral
            vertices = vertex_path(triple.p, triple.L)
            mayer = pd.DataFrame(
                {
                    "t": times,
                    "dh": boundary_hausdorff_curve(triple.p, prediction, triple.L),
                    "dh_mask": hausdorff_curve(triple.a, prediction.omega0, tp.threshold),
                    "dh_vertex": hausdorff_curve(vertices, prediction.omega0, tp.threshold),
                    "adjoint_deviation": adjoint_deviation_curve(triple.p, prediction),
                }
            )
            window = (tp.fit_window[0] * T, tp.fit_window[1] * T)
            for name in ("dh", "dh_mask", "dh_vertex", "adjoint_deviation"):
                fit = _fit(name, mayer[name].to_numpy(), times, window, tp.floor)
                if fit is not None:
                    fits[name] = fit

    report["fits"] = fits
    return TurnpikeReport(T=T, nt=tg.nt, **report), curves, mayer


def write_diagnostics(
    sc: Scenario,
    triple: OptimalTriple,
    static: StaticTriple | None,
    run_dir: Path,
    label: str,
) -> RunEntry:
    report, curves, mayer = diagnose(sc, triple, static)
    write_report(report, run_dir / "turnpike.json")
    if curves is not None:
        write_curves_csv(curves, run_dir / "curves.csv")
    if mayer is not None:
        mayer.to_csv(
            run_dir / "mayer_curves.csv", index=False, float_format=CSV_FLOAT_FORMAT, na_rep=""
        )
    tp = sc.config.turnpike
    tg = triple.timegrid
    middle = Density(field=triple.a.snapshot(tg.nt // 2), L=triple.L)
    _, relaxation = threshold_to_shape(middle, tp.threshold, tp.relaxation_band)
    return RunEntry(
        T=tg.T,
        nt=tg.nt,
        cost=triple.cost,
        gap=triple.gap,
        iterations=triple.iterations,
        certified=triple.certified,
        integral_turnpike=report.integral_turnpike,
        measure_turnpike=report.measure_turnpike,
        relaxation=relaxation,
        output_dir=label,
    )


def run_horizon(
    sc: Scenario, static: StaticTriple | None, T: float, run_dir: Path, label: str
) -> RunEntry:
    tg = sc.config.timegrid(T)
    triple = solve_dynamic(sc.op, sc.cost, sc.y0, tg, sc.config.L, sc.options)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_dynamic(triple, run_dir / "dynamic", sc.config.output)
    write_history(triple.history, run_dir / "log.csv")
    return write_diagnostics(sc, triple, static, run_dir, label)


def _safe_horizon(
    sc: Scenario, static: StaticTriple | None, T: float, run_dir: Path, label: str
) -> RunEntry:
    try:
        return run_horizon(sc, static, T, run_dir, label)
    except Exception as e:
        log_error_details(e, {"T": T, "output_dir": label})
        return RunEntry(
            T=T,
            nt=sc.config.timegrid(T).nt,
            output_dir=label,
            error=f"{type(e).__name__}: {e}",
        )


# Classification


def classify_stage(
    sc: Scenario, static: StaticTriple | None, tg: TimeGrid, out: Path
) -> ExistenceDiagnosis:
    bounds = compute_comparison_bounds(sc.op, sc.y0, tg)
    diagnosis = classify_target(sc.op, sc.cost, sc.y0, tg, bounds, static)
    out.mkdir(parents=True, exist_ok=True)
    write_field_csv(bounds[0], out / "y0_bound.csv")
    write_field_csv(bounds[1], out / "y1_bound.csv")
    write_json(
        {
            "case": diagnosis.case.value,
            "beta_margin": diagnosis.beta_margin,
            "message": diagnosis.message,
            "T": tg.T,
            "y0_bound_min": float(bounds[0].values.min()),
            "y1_bound_max": float(bounds[1].values.max()),
        },
        out / "classification.json",
    )
    return diagnosis


def exit_code(summary: RunSummary) -> int:
    if any(e.error is not None for e in summary.entries):
        return EXIT_SOLVER
    static_ok = summary.static is None or summary.static.certified
    if not static_ok or not all(e.certified for e in summary.entries):
        return EXIT_GAP
    return EXIT_OK


def _finish(summary: RunSummary, out: Path) -> RunSummary:
    summary.exit_code = exit_code(summary)
    write_json(summary, out / "summary.json")
    for stage, seconds in summary.wall_clock.items():
        logger.info(f"Wall clock {stage}: {seconds:.2f}s")
    log_memory()
    return summary


def run_scenario(
    config: RunConfig, out_dir: Path | None = None, base_dir: Path | None = None
) -> RunSummary:
    """Static solve, one dynamic solve, classification and turnpike diagnostics."""
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    T = config.T if config.T is not None else config.horizons()[-1]
    clock: dict[str, float] = {}

    start = time.perf_counter()
    sc = build_scenario(config, base_dir)
    static, static_entry = static_stage(sc, out)
    clock["static"] = time.perf_counter() - start

    start = time.perf_counter()
    entry = run_horizon(sc, static, T, out, ".")
    clock["dynamic"] = time.perf_counter() - start

    diagnosis = classify_stage(sc, static, config.timegrid(T), out)
    summary = RunSummary(
        entries=[entry],
        static=static_entry,
        classification=diagnosis.case.value,
        wall_clock=clock,
    )
    return _finish(summary, out)


def sweep_T(
    config: RunConfig,
    out_dir: Path | None = None,
    threads: int = 1,
    base_dir: Path | None = None,
) -> RunSummary:
    """Solve every horizon of ``T_list``; failures are recorded per horizon."""
    out = Path(out_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    horizons = config.horizons()
    clock: dict[str, float] = {}

    start = time.perf_counter()
    sc = build_scenario(config, base_dir)
    static, static_entry = static_stage(sc, out)
    clock["static"] = time.perf_counter() - start

    start = time.perf_counter()
    logger.info(f"Sweeping T over {horizons} with {threads} thread(s)")
    entries = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_safe_horizon)(sc, static, T, out / horizon_label(T), horizon_label(T))
        for T in horizons
    )
    clock["sweep"] = time.perf_counter() - start

    diagnosis = classify_stage(sc, static, config.timegrid(horizons[-1]), out)
    summary = RunSummary(
        entries=sorted(entries, key=lambda e: e.T),
        static=static_entry,
        classification=diagnosis.case.value,
        wall_clock=clock,
    )
    pd.DataFrame(summary.table()).to_csv(
        out / "sweep.csv", index=False, float_format=CSV_FLOAT_FORMAT, na_rep=""
    )
    return _finish(summary, out)


# Re-runs on saved artifacts


def run_static_only(config: RunConfig, out: Path, base_dir: Path | None = None) -> RunSummary:
    sc = build_scenario(config, base_dir)
    if sc.cost.gamma1 == 0:
        raise ConfigError("gamma1: the static problem needs a running cost (gamma1 > 0)")
    start = time.perf_counter()
    _, entry = static_stage(sc, out)
    summary = RunSummary(static=entry, wall_clock={"static": time.perf_counter() - start})
    return _finish(summary, out)


def run_classify(config: RunConfig, out: Path, base_dir: Path | None = None) -> ExistenceDiagnosis:
    sc = build_scenario(config, base_dir)
    static = None
    if sc.cost.gamma1 > 0:
        static_dir = out / "static"
        if (static_dir / "static.json").exists():
            static = load_static(static_dir, sc)
        else:
            static, _ = static_stage(sc, out)
    T = config.T if config.T is not None else config.horizons()[-1]
    return classify_stage(sc, static, config.timegrid(T), out)


def run_spectral(config: RunConfig, out: Path, base_dir: Path | None = None) -> SpectralPrediction:
    """Spectral prediction from the saved (or freshly solved) terminal state."""
    sc = build_scenario(config, base_dir)
    if not (out / "dynamic" / "solve.json").exists():
        T = config.T if config.T is not None else config.horizons()[-1]
        static, _ = static_stage(sc, out)
        run_horizon(sc, static, T, out, ".")
    triple = load_dynamic(out)
    prediction = spectral_prediction(sc, triple)
    data: dict[str, Any] = dict(prediction.summary())
    data.update(
        {
            "discrete_rate": prediction.discrete_rate(triple.timegrid.dt),
            "dt": triple.timegrid.dt,
            "T": triple.timegrid.T,
            "j0": prediction.j0,
            "coefficients": prediction.coefficients,
        }
    )
    write_json(data, out / "spectral.json")
    write_field_csv(prediction.Phi0, out / "Phi0.csv")
    if config.output.write_pgm:
        write_field_pgm(prediction.Phi0, out / "Phi0.pgm")
        write_mask_pgm(prediction.omega0, out / "omega0.pgm")
    return prediction


def run_dirs(out: Path) -> list[Path]:
    if (out / "dynamic" / "solve.json").exists():
        return [out]
    found = [d for d in out.glob("T_*") if (d / "dynamic" / "solve.json").exists()]
    return sorted(found, key=lambda d: json.loads((d / "dynamic" / "solve.json").read_text())["T"])


def run_report(config: RunConfig, out: Path, base_dir: Path | None = None) -> list[RunEntry]:
    """Recompute ``turnpike.json`` and the curve tables from saved artifacts."""
    sc = build_scenario(config, base_dir)
    dirs = run_dirs(out)
    if not dirs:
        raise FileNotFoundError(f"{out}: no saved dynamic solves")
    static = load_static(out / "static", sc) if sc.cost.gamma1 > 0 else None
    entries = []
    for d in dirs:
        label = "." if d == out else d.name
        entries.append(write_diagnostics(sc, load_dynamic(d), static, d, label))
    return entries
