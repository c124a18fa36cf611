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
"""Field, mask and trajectory serialization (PGM, CSV, JSON index, .npy)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from shape_turnpike.grid import Grid, ScalarField, ShapeMask
from shape_turnpike.pde import TimeGrid, Trajectory

CSV_FLOAT_FORMAT = "%.17g"


def _pgm_text(image: np.ndarray[Any, Any], vmin: float, vmax: float) -> str:
    # rows run top to bottom, i.e. y descending
    rows = np.flipud(image.T)
    height, width = rows.shape
    span = vmax - vmin
    if span > 0:
        levels = np.rint((rows - vmin) / span * 255)
    else:
        levels = np.zeros_like(rows)
    levels = np.clip(levels, 0, 255).astype(int)
    lines = ["P2", f"# vmin={vmin!r} vmax={vmax!r}", f"{width} {height}", "255"]
    lines += [" ".join(str(v) for v in row) for row in levels]
    return "\n".join(lines) + "\n"


def write_field_pgm(
    f: ScalarField,
    path: Path,
    vmin: float | None = None,
    vmax: float | None = None,
) -> None:
    lo = float(f.values.min()) if vmin is None else vmin
    hi = float(f.values.max()) if vmax is None else vmax
    Path(path).write_text(_pgm_text(f.as_2d(), lo, hi))


def write_mask_pgm(m: ShapeMask, path: Path) -> None:
    Path(path).write_text(_pgm_text(m.as_2d().astype(float), 0.0, 1.0))


def field_frame(f: ScalarField) -> pd.DataFrame:
    X, Y = f.grid.coordinates()
    return pd.DataFrame({"x": X.ravel(), "y": Y.ravel(), "value": f.values})


def write_field_csv(f: ScalarField, path: Path) -> None:
    field_frame(f).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)


def read_field_csv(path: Path, grid: Grid) -> ScalarField:
    df = pd.read_csv(path, float_precision="round_trip")
    missing = {"x", "y", "value"} - set(df.columns)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    if len(df) != grid.size:
        raise ValueError(f"{path}: {len(df)} rows, grid has {grid.size} nodes")
    X, Y = grid.coordinates()
    tol = 1e-9 * max(grid.hx, grid.hy)
    if not (
        np.allclose(df["x"].to_numpy(), X.ravel(), atol=tol)
        and np.allclose(df["y"].to_numpy(), Y.ravel(), atol=tol)
    ):
        raise ValueError(f"{path}: node coordinates do not match the grid")
    return ScalarField(grid=grid, values=df["value"].to_numpy())


def write_trajectory(
    traj: Trajectory,
    directory: Path,
    kind: str,
    stride: int = 1,
    write_pgm: bool = True,
) -> None:
    """Write ``index.json``, the exact ``values.npy`` payload and per-step files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "values.npy", np.ascontiguousarray(traj.values))
    vmin, vmax = float(traj.values.min()), float(traj.values.max())
    steps = list(range(0, traj.timegrid.nt + 1, stride))
    if steps[-1] != traj.timegrid.nt:
        steps.append(traj.timegrid.nt)
    files = []
    for k in steps:
        stem = f"step_{k:05d}"
        snap = traj.snapshot(k)
        write_field_csv(snap, directory / f"{stem}.csv")
        if write_pgm:
            write_field_pgm(snap, directory / f"{stem}.pgm", vmin, vmax)
        files.append({"step": k, "t": k * traj.timegrid.dt, "stem": stem})
    index = {
        "kind": kind,
        "T": traj.timegrid.T,
        "nt": traj.timegrid.nt,
        "grid": traj.grid.model_dump(),
        "files": files,
    }
    (directory / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def read_trajectory(directory: Path) -> Trajectory:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    grid_fields = {k: index["grid"][k] for k in ("xmin", "xmax", "ymin", "ymax", "nx", "ny")}
    grid = Grid(**grid_fields)
    tg = TimeGrid(T=index["T"], nt=index["nt"])
    values = np.load(directory / "values.npy")
    return Trajectory(grid=grid, timegrid=tg, values=values)


def json_safe(obj: Any) -> Any:
    """Replace non-finite floats by None so files stay strict JSON."""
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(obj: Any, path: Path) -> None:
    if hasattr(obj, "model_dump"):
        obj = obj.model_dump(mode="json", by_alias=True)
    Path(path).write_text(
        json.dumps(json_safe(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
    )
