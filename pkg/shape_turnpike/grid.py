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
"""Box-domain grid, nodal scalar fields, shape masks and their metrics.

Fields live on the interior nodes of a uniform tensor grid over
``[xmin, xmax] x [ymin, ymax]``; boundary nodes are implicit zeros
(homogeneous Dirichlet). Values are stored flat with index ``i * ny + j``
where ``i`` is the x-index.
"""

from __future__ import annotations

from typing import Any, Callable

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, computed_field, field_validator, model_validator
from scipy import ndimage
from scipy.spatial import cKDTree

FloatArray = NDArray[np.float64]
BoolArray = NDArray[np.bool_]


class Grid(BaseModel):
    model_config = ConfigDict(frozen=True)

    xmin: float
    xmax: float
    ymin: float
    ymax: float
    nx: int
    ny: int

    @model_validator(mode="after")
    def _check_extent(self) -> Grid:
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"nx and ny must be >= 3, got ({self.nx}, {self.ny})")
        if not self.xmax > self.xmin or not self.ymax > self.ymin:
            raise ValueError("domain extents must be positive")
        return self

    @computed_field  # type: ignore[prop-decorator]
    @property
    def hx(self) -> float:
        return (self.xmax - self.xmin) / (self.nx + 1)

    @computed_field  # type: ignore[prop-decorator]
    @property
    def hy(self) -> float:
        return (self.ymax - self.ymin) / (self.ny + 1)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def measure(self) -> float:
        """Discrete |Omega|: the area carried by the interior nodes."""
        return self.size * self.cell_area

    @property
    def lengths(self) -> tuple[float, float]:
        return (self.xmax - self.xmin, self.ymax - self.ymin)

    def axes(self) -> tuple[FloatArray, FloatArray]:
        x = self.xmin + self.hx * np.arange(1, self.nx + 1, dtype=np.float64)
        y = self.ymin + self.hy * np.arange(1, self.ny + 1, dtype=np.float64)
        return x, y

    def coordinates(self) -> tuple[FloatArray, FloatArray]:
        """Node coordinates as two ``(nx, ny)`` arrays."""
        x, y = self.axes()
        X, Y = np.meshgrid(x, y, indexing="ij")
        return X, Y

    def check_same(self, other: Grid) -> None:
        if self != other:
            raise ValueError("grid mismatch")


def build_grid(bounds: tuple[float, float, float, float], nx: int, ny: int) -> Grid:
    """Build a grid from ``(xmin, xmax, ymin, ymax)`` and interior node counts."""
    xmin, xmax, ymin, ymax = bounds
    return Grid(xmin=xmin, xmax=xmax, ymin=ymin, ymax=ymax, nx=nx, ny=ny)


def _frozen_copy(v: Any, dtype: type) -> NDArray[Any]:
    arr = np.array(v, dtype=dtype, copy=True).ravel()
    arr.flags.writeable = False
    return arr


class ScalarField(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: Grid
    values: FloatArray

    @field_validator("values", mode="before")
    @classmethod
    def validate_values(cls, v: Any) -> FloatArray:
        try:
            return _frozen_copy(v, np.float64)
        except (TypeError, ValueError) as e:
            raise ValueError("values must be a real array") from e

    @model_validator(mode="after")
    def _check_values(self) -> ScalarField:
        if self.values.size != self.grid.size:
            raise ValueError(
                f"field has {self.values.size} values, grid has {self.grid.size} nodes"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field values must be finite")
        return self

    @classmethod
    def constant(cls, grid: Grid, value: float) -> ScalarField:
        return cls(grid=grid, values=np.full(grid.size, float(value)))

    @classmethod
    def zeros(cls, grid: Grid) -> ScalarField:
        return cls.constant(grid, 0.0)

    @classmethod
    def from_function(
        cls, grid: Grid, f: Callable[[FloatArray, FloatArray], Any]
    ) -> ScalarField:
        X, Y = grid.coordinates()
        values = np.broadcast_to(np.asarray(f(X, Y), dtype=np.float64), X.shape)
        return cls(grid=grid, values=values)

    def as_2d(self) -> FloatArray:
        return self.values.reshape(self.grid.shape)

    def _other(self, other: ScalarField | float) -> FloatArray | float:
        if isinstance(other, ScalarField):
            self.grid.check_same(other.grid)
            return other.values
        return float(other)

    def __add__(self, other: ScalarField | float) -> ScalarField:
        return ScalarField(grid=self.grid, values=self.values + self._other(other))

    def __sub__(self, other: ScalarField | float) -> ScalarField:
        return ScalarField(grid=self.grid, values=self.values - self._other(other))

    def __mul__(self, other: float) -> ScalarField:
        return ScalarField(grid=self.grid, values=self.values * float(other))

    __rmul__ = __mul__

    def __neg__(self) -> ScalarField:
        return ScalarField(grid=self.grid, values=-self.values)


class ShapeMask(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    grid: Grid
    inside: BoolArray

    @field_validator("inside", mode="before")
    @classmethod
    def validate_inside(cls, v: Any) -> BoolArray:
        return _frozen_copy(v, np.bool_)

    @model_validator(mode="after")
    def _check_inside(self) -> ShapeMask:
        if self.inside.size != self.grid.size:
            raise ValueError(
                f"mask has {self.inside.size} entries, grid has {self.grid.size} nodes"
            )
        return self

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.inside))

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    @property
    def volume(self) -> float:
        return self.count * self.grid.cell_area

    def as_2d(self) -> BoolArray:
        return self.inside.reshape(self.grid.shape)


def integrate(f: ScalarField) -> float:
    return float(f.grid.cell_area * np.sum(f.values))


def inner(f: ScalarField, g: ScalarField) -> float:
    f.grid.check_same(g.grid)
    return float(f.grid.cell_area * np.dot(f.values, g.values))


def norm_l2(f: ScalarField) -> float:
    return float(np.sqrt(f.grid.cell_area * np.dot(f.values, f.values)))


def norm_l1(f: ScalarField) -> float:
    return float(f.grid.cell_area * np.sum(np.abs(f.values)))


def distance_transform(m: ShapeMask) -> ScalarField:
    """Exact Euclidean distance from every node to the nearest node of ``m``."""
    if m.is_empty:
        raise ValueError("empty shape")
    dist = ndimage.distance_transform_edt(
        ~m.as_2d(), sampling=(m.grid.hx, m.grid.hy)
    )
    return ScalarField(grid=m.grid, values=dist)


def hausdorff(m1: ShapeMask, m2: ShapeMask) -> float:
    m1.grid.check_same(m2.grid)
    d_to_2 = distance_transform(m2).values
    d_to_1 = distance_transform(m1).values
    return float(max(d_to_2[m1.inside].max(), d_to_1[m2.inside].max()))


def symmetric_difference_area(m1: ShapeMask, m2: ShapeMask) -> float:
    m1.grid.check_same(m2.grid)
    return float(np.count_nonzero(m1.inside ^ m2.inside) * m1.grid.cell_area)


def level_set_points(f: ScalarField, level: float) -> FloatArray:
    """Points where ``f`` crosses ``level`` along grid edges, as an ``(m, 2)`` array.

    The Dirichlet boundary ring counts as zero. Crossings are placed by linear
    interpolation, so the points move continuously with ``f`` below the grid
    spacing.
    """
    grid = f.grid
    u = np.pad(f.as_2d(), 1) - level
    xs = grid.xmin + grid.hx * np.arange(grid.nx + 2)
    ys = grid.ymin + grid.hy * np.arange(grid.ny + 2)
    pos = u > 0

    i, j = np.nonzero(pos[:-1, :] != pos[1:, :])
    t = u[i, j] / (u[i, j] - u[i + 1, j])
    along_x = np.column_stack([xs[i] + t * grid.hx, ys[j]])

    i, j = np.nonzero(pos[:, :-1] != pos[:, 1:])
    t = u[i, j] / (u[i, j] - u[i, j + 1])
    along_y = np.column_stack([xs[i], ys[j] + t * grid.hy])
    return np.concatenate([along_x, along_y])


def point_hausdorff(p1: FloatArray, p2: FloatArray) -> float:
    """Hausdorff distance between two finite point sets."""
    if len(p1) == 0 or len(p2) == 0:
        raise ValueError("empty point set")
    d12, _ = cKDTree(p2).query(p1)
    d21, _ = cKDTree(p1).query(p2)
    return float(max(d12.max(), d21.max()))
