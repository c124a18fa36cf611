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

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pytest

from shape_turnpike.grid import Grid, build_grid
from shape_turnpike.pde import EllipticOperator, laplacian
from shape_turnpike.settings import get_settings

SQUARE = (-1.0, 1.0, -1.0, 1.0)


@pytest.fixture(autouse=True)
def _fresh_settings() -> Any:
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def grid() -> Grid:
    return build_grid(SQUARE, 7, 7)


@pytest.fixture
def tiny_grid() -> Grid:
    return build_grid(SQUARE, 3, 3)


@pytest.fixture
def lap(grid: Grid) -> EllipticOperator:
    return laplacian(grid)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def card(tmp_path: Path) -> Callable[..., Path]:
    """Write a small experiment card and return its path."""

    def _write(name: str = "card.json", **overrides: Any) -> Path:
        data: dict[str, Any] = {
            "nx": 9,
            "ny": 9,
            "nt_per_unit": 8,
            "T": 1.0,
            "L": 0.125,
            "y_d": {"constant": 0.1},
            "solver": {"tol_gap": 1e-4, "max_iter": 2000},
            "output": {"snapshot_stride": 4, "write_pgm": False},
        }
        data.update(overrides)
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path

    return _write
