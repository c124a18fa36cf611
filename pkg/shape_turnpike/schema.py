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
"""Experiment cards and run summaries."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from shape_turnpike.admissible import RelaxationReport
from shape_turnpike.fieldio import read_field_csv
from shape_turnpike.grid import Grid, ScalarField
from shape_turnpike.pde import TimeGrid


class ConfigError(ValueError):
    """Invalid experiment card; the message lists every offending key path."""


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainConfig(StrictModel):
    xmin: float = -1.0
    xmax: float = 1.0
    ymin: float = -1.0
    ymax: float = 1.0

    @model_validator(mode="after")
    def _check_extent(self) -> DomainConfig:
        if not self.xmax > self.xmin or not self.ymax > self.ymin:
            raise ValueError("domain extents must be positive")
        return self


class QuadraticSpec(StrictModel):
    """``a (x^2 + y^2) + b + c x``."""

    a: float
    b: float = 0.0
    c: float = 0.0


class FieldSpec(StrictModel):
    constant: float | None = None
    quadratic: QuadraticSpec | None = None
    file: Path | None = None

    @model_validator(mode="after")
    def _check_one_of(self) -> FieldSpec:
        given = [k for k in ("constant", "quadratic", "file") if getattr(self, k) is not None]
        if len(given) != 1:
            raise ValueError("exactly one of constant, quadratic, file must be given")
        return self

    def to_field(self, grid: Grid, base_dir: Path | None = None) -> ScalarField:
        if self.constant is not None:
            return ScalarField.constant(grid, self.constant)
        if self.quadratic is not None:
            q = self.quadratic
            return ScalarField.from_function(
                grid, lambda x, y: q.a * (x**2 + y**2) + q.b + q.c * x
            )
        assert self.file is not None
        path = self.file if base_dir is None or self.file.is_absolute() else base_dir / self.file
        return read_field_csv(path, grid)


class SolverConfig(StrictModel):
    tol_gap: float = Field(default=1e-6, gt=0)
    max_iter: int = Field(default=500, ge=1)
    line_search: Literal["exact", "open_loop"] = "exact"
    vertex_rounds: int = Field(default=8, ge=0)


class TurnpikeConfig(StrictModel):
    eps_list: list[float] = Field(default_factory=lambda: [0.1, 0.05, 0.01])
    fit_window: tuple[float, float] = (0.2, 0.9)
    nu: float = Field(default=0.1, ge=0, lt=0.5)
    floor: float = Field(default=1e-12, gt=0)
    threshold: float = Field(default=0.5, gt=0, lt=1)
    relaxation_band: tuple[float, float] = (0.05, 0.95)
    stationarity_window: tuple[float, float] = (0.2, 0.8)
    kmax: int = Field(default=16, ge=2)
    tol_coef: float = Field(default=1e-10, gt=0)

    @field_validator("eps_list")
    @classmethod
    def _check_eps(cls, v: list[float]) -> list[float]:
        if not v or any(e <= 0 for e in v):
            raise ValueError("eps_list entries must be positive (fractions of the curve scale)")
        return v

    @field_validator("fit_window", "relaxation_band", "stationarity_window")
    @classmethod
    def _check_interval(cls, v: tuple[float, float]) -> tuple[float, float]:
        if not 0 <= v[0] < v[1] <= 1:
            raise ValueError("interval must satisfy 0 <= lo < hi <= 1")
        return v


class OutputConfig(StrictModel):
    snapshot_stride: int = Field(default=1, ge=1)
    write_pgm: bool = True


class RunConfig(StrictModel):
    domain: DomainConfig = Field(default_factory=DomainConfig)
    nx: int = Field(default=63, ge=3)
    ny: int = Field(default=63, ge=3)
    nt_per_unit: int = Field(default=32, ge=1)
    T: float | None = Field(default=None, gt=0)
    T_list: list[float] | None = Field(default=None, min_length=1)
    L: float = Field(gt=0, lt=1)
    gamma1: float = Field(default=1.0, ge=0)
    gamma2: float = Field(default=0.0, ge=0)
    y_d: FieldSpec
    y0: FieldSpec = Field(default_factory=lambda: FieldSpec(constant=0.0))
    alpha: float = Field(default=1.0, gt=0)
    drift: tuple[float, float] = (0.0, 0.0)
    reaction: float = Field(default=0.0, ge=0)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    turnpike: TurnpikeConfig = Field(default_factory=TurnpikeConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    output_dir: Path = Path("runs")

    @field_validator("T_list")
    @classmethod
    def _check_T_list(cls, v: list[float] | None) -> list[float] | None:
        if v is None:
            return v
        if any(t <= 0 for t in v):
            raise ValueError("horizons must be positive")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("T_list must be strictly ascending")
        return v

    @model_validator(mode="after")
    def _check_run(self) -> RunConfig:
        if self.T is None and self.T_list is None:
            raise ValueError("one of T or T_list is required")
        if self.gamma1 == 0 and self.gamma2 == 0:
            raise ValueError("gamma1 and gamma2 cannot both be zero")
        return self

    def grid(self) -> Grid:
        d = self.domain
        return Grid(xmin=d.xmin, xmax=d.xmax, ymin=d.ymin, ymax=d.ymax, nx=self.nx, ny=self.ny)

    def timegrid(self, T: float) -> TimeGrid:
        return TimeGrid(T=T, nt=max(1, round(self.nt_per_unit * T)))

    def horizons(self) -> list[float]:
        if self.T_list is not None:
            return list(self.T_list)
        assert self.T is not None
        return [self.T]


class StaticEntry(BaseModel):
    cost: float
    gap: float
    level: float
    iterations: int
    certified: bool
    relaxation: RelaxationReport


class RunEntry(BaseModel):
    T: float
    nt: int
    cost: float | None = None
    gap: float | None = None
    iterations: int | None = None
    certified: bool = False
    integral_turnpike: float | None = None
    measure_turnpike: dict[str, float] = Field(default_factory=dict)
    relaxation: RelaxationReport | None = None
    output_dir: str
    error: str | None = None


class RunSummary(BaseModel):
    entries: list[RunEntry] = Field(default_factory=list)
    static: StaticEntry | None = None
    classification: str | None = None
    exit_code: int = 0
    wall_clock: dict[str, float] = Field(default_factory=dict, exclude=True)

    def table(self) -> list[dict[str, Any]]:
        rows = []
        for e in self.entries:
            row: dict[str, Any] = {
                "T": e.T,
                "cost": e.cost,
                "gap": e.gap,
                "certified": e.certified,
                "integral_turnpike": e.integral_turnpike,
            }
            row.update({f"measure_{k}": v for k, v in e.measure_turnpike.items()})
            rows.append(row)
        return rows
