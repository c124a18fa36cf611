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
"""End-to-end experiment checks at the default resolution (``pytest -m slow``)."""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from shape_turnpike.cli import config_from_dict
from shape_turnpike.presets import PRESETS
from shape_turnpike.scenario import (
    build_scenario,
    load_dynamic,
    run_scenario,
    spectral_prediction,
    sweep_T,
)
from shape_turnpike.turnpike import exp_fit, measure_turnpike, read_curves_csv

pytestmark = pytest.mark.slow


def test_constant_target_shape_is_nearly_static_in_the_middle(tmp_path: Path) -> None:
    config = config_from_dict(PRESETS["paper-demo"])
    summary = run_scenario(config, tmp_path)
    assert summary.exit_code == 0
    assert summary.static is not None
    assert summary.static.relaxation.relaxed_area == 0.0
    assert not summary.static.relaxation.flagged
    report = json.loads((tmp_path / "turnpike.json").read_text())
    assert report["shape_stationarity"] <= 0.02 * config.grid().measure
    assert report["dissipativity"]["min_residual"] >= (
        -report["dissipativity"]["gap_allowance"] - 1e-6 * report["dissipativity"]["scale"]
    )
    assert not report["inequalities"]["energy"]["violated"]
    assert not report["inequalities"]["gronwall"]["violated"]

    curves = read_curves_csv(tmp_path / "curves.csv")
    T = curves.T
    middle = (curves.times >= 0.2 * T) & (curves.times <= 0.8 * T)
    assert curves.total[middle].min() <= 0.1 * curves.total[0]


def test_integral_and_measure_turnpike_are_stable_in_T(tmp_path: Path) -> None:
    config = config_from_dict({**PRESETS["paper-demo"], "T_list": [4.0, 5.0]})
    summary = sweep_T(config, tmp_path, threads=2)
    assert summary.exit_code == 0
    by_T = {e.T: e for e in summary.entries}
    i4, i5 = by_T[4.0].integral_turnpike, by_T[5.0].integral_turnpike
    assert i4 is not None and i5 is not None
    assert abs(i5 - i4) <= 0.05 * i5

    c4 = read_curves_csv(tmp_path / "T_4" / "curves.csv")
    c5 = read_curves_csv(tmp_path / "T_5" / "curves.csv")
    eps = 0.05 * float(np.max(c5.total))
    assert abs(measure_turnpike(c5, eps) - measure_turnpike(c4, eps)) <= 2 * c5.dt + 1e-12


def test_terminal_cost_adjoint_converges_at_the_spectral_rate(tmp_path: Path) -> None:
    config = config_from_dict(
        {**PRESETS["mayer-demo"], "nx": 15, "ny": 15, "nt_per_unit": 128}
    )
    run_scenario(config, tmp_path)
    sc = build_scenario(config)
    triple = load_dynamic(tmp_path)
    prediction = spectral_prediction(sc, triple)
    assert prediction.mu_active == pytest.approx(prediction.mu)

    mayer = pd.read_csv(tmp_path / "mayer_curves.csv", float_precision="round_trip")
    T = triple.timegrid.T
    fit = exp_fit(
        mayer["adjoint_deviation"].to_numpy(), mayer["t"].to_numpy(), 0.2 * T, 0.9 * T
    )
    analytic = 3 * np.pi**2 / 4
    assert fit.mu > 0
    assert abs(fit.mu - analytic) <= 0.3 * analytic
    assert fit.mu == pytest.approx(prediction.discrete_rate(triple.timegrid.dt), rel=0.1)


def test_terminal_cost_shapes_approach_the_auxiliary_shape_exponentially(
    tmp_path: Path,
) -> None:
    config = config_from_dict(PRESETS["mayer-demo"])
    assert config.nx == 63
    run_scenario(config, tmp_path)

    mayer = pd.read_csv(tmp_path / "mayer_curves.csv", float_precision="round_trip")
    T = config.T
    dh = mayer["dh"].to_numpy()
    window = (mayer["t"] >= 0.2 * T) & (mayer["t"] <= 0.9 * T)
    assert np.all(np.isfinite(dh[window]))
    fit = exp_fit(dh, mayer["t"].to_numpy(), 0.2 * T, 0.9 * T)
    analytic = 3 * np.pi**2 / 4
    assert fit.mu > 0
    assert abs(fit.mu - analytic) <= 0.3 * analytic
    report = json.loads((tmp_path / "turnpike.json").read_text())
    assert report["fits"]["dh"]["mu"] == pytest.approx(fit.mu)


def test_relaxation_demo_is_flagged(tmp_path: Path) -> None:
    config = config_from_dict(PRESETS["relaxation-demo"])
    summary = run_scenario(config, tmp_path)
    assert summary.classification == "relaxation_risk"
    assert summary.static is not None
    assert summary.static.relaxation.relaxed_area > 0
    assert summary.static.relaxation.relaxed_mean_radius is not None
    assert summary.static.relaxation.relaxed_mean_radius < 0.5

    curves = read_curves_csv(tmp_path / "curves.csv")
    T = curves.T
    middle = (curves.times >= 0.2 * T) & (curves.times <= 0.8 * T)
    assert curves.total[middle].min() < min(curves.total[0], curves.total[-1])
