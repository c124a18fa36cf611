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

from shape_turnpike.cli import config_from_dict, parse_config
from shape_turnpike.fieldio import write_field_csv
from shape_turnpike.grid import ScalarField
from shape_turnpike.presets import PRESETS
from shape_turnpike.schema import (
    ConfigError,
    FieldSpec,
    RunConfig,
    RunEntry,
    RunSummary,
)
from shape_turnpike.settings import get_settings

CONFIGS = Path(__file__).resolve().parents[1] / "shape_turnpike" / "configs"


def test_minimal_card_gets_defaults() -> None:
    config = config_from_dict({"T": 2, "L": 0.125, "y_d": {"constant": 0.1}})
    assert (config.nx, config.ny, config.nt_per_unit) == (63, 63, 32)
    assert config.solver.tol_gap == 1e-6
    assert config.turnpike.eps_list == [0.1, 0.05, 0.01]
    assert (config.gamma1, config.gamma2) == (1.0, 0.0)
    assert config.y0.constant == 0.0
    assert config.horizons() == [2.0]
    assert config.timegrid(2.0).nt == 64


def test_out_of_range_fraction_names_the_key() -> None:
    with pytest.raises(ConfigError, match=r"(?m)^L: "):
        config_from_dict({"T": 2, "L": 1.5, "y_d": {"constant": 0.1}})


def test_unknown_keys_are_rejected_with_their_path() -> None:
    with pytest.raises(ConfigError, match=r"solver\.tolgap"):
        config_from_dict(
            {"T": 2, "L": 0.125, "y_d": {"constant": 0.1}, "solver": {"tolgap": 1e-3}}
        )


def test_horizon_validation() -> None:
    with pytest.raises(ConfigError, match="T_list"):
        config_from_dict({"T_list": [], "L": 0.125, "y_d": {"constant": 0.1}})
    with pytest.raises(ConfigError, match="ascending"):
        config_from_dict({"T_list": [2, 1], "L": 0.125, "y_d": {"constant": 0.1}})
    with pytest.raises(ConfigError, match="one of T or T_list"):
        config_from_dict({"L": 0.125, "y_d": {"constant": 0.1}})


def test_both_weights_zero_is_rejected() -> None:
    with pytest.raises(ConfigError, match="cannot both be zero"):
        config_from_dict(
            {"T": 1, "L": 0.125, "gamma1": 0, "gamma2": 0, "y_d": {"constant": 0.1}}
        )


def test_field_spec_needs_exactly_one_source() -> None:
    with pytest.raises(ValueError, match="exactly one"):
        FieldSpec(constant=0.1, quadratic={"a": 1.0})
    with pytest.raises(ValueError, match="exactly one"):
        FieldSpec()


def test_relaxation_card_is_the_quadratic_target() -> None:
    config = parse_config(CONFIGS / "relaxation_demo.json")
    assert config.y_d.quadratic is not None
    assert config.y_d.quadratic.a == -0.05
    assert config.y_d.quadratic.b == 0.1
    grid = config.grid()
    expected = ScalarField.from_function(grid, lambda x, y: -(x**2 + y**2 - 2) / 20)
    np.testing.assert_allclose(config.y_d.to_field(grid).values, expected.values, atol=1e-15)


def test_file_targets_resolve_relative_to_the_card(tmp_path: Path) -> None:
    config = config_from_dict(
        {"T": 1, "L": 0.125, "nx": 5, "ny": 5, "y_d": {"file": "target.csv"}}
    )
    grid = config.grid()
    target = ScalarField.from_function(grid, lambda x, y: x * y)
    write_field_csv(target, tmp_path / "target.csv")
    np.testing.assert_array_equal(config.y_d.to_field(grid, tmp_path).values, target.values)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_are_valid(name: str) -> None:
    config = config_from_dict(PRESETS[name], source=name)
    assert 0 < config.L < 1


def test_presets_are_loaded_from_the_shipped_cards() -> None:
    stems = sorted(p.stem.replace("_", "-") for p in CONFIGS.glob("*.json"))
    assert sorted(PRESETS) == stems == ["mayer-demo", "paper-demo", "relaxation-demo", "trivial"]


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_cards_parse_like_presets(path: Path) -> None:
    config = parse_config(path)
    assert config == config_from_dict(PRESETS[path.stem.replace("_", "-")])
    assert config.output_dir == Path("runs") / path.stem


def test_parse_config_errors(tmp_path: Path) -> None:
    with pytest.raises(ConfigError, match="no such file"):
        parse_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(tmp_path / "bad.json")
    (tmp_path / "list.json").write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        parse_config(tmp_path / "list.json")


def test_summary_dump_omits_wall_clock() -> None:
    summary = RunSummary(
        entries=[RunEntry(T=1.0, nt=32, cost=0.5, output_dir=".")],
        wall_clock={"dynamic": 1.25},
    )
    dumped = summary.model_dump(mode="json")
    assert "wall_clock" not in dumped
    assert summary.table()[0]["T"] == 1.0


def test_runtime_settings_from_environment(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("TSL_THREADS", "4")
    monkeypatch.setenv("TSL_LOG_LEVEL", "debug")
    settings = get_settings()
    assert settings.threads == 4
    assert settings.log_level == "debug"


def test_run_config_is_strict_at_every_level() -> None:
    with pytest.raises(ValueError):
        RunConfig.model_validate(
            {"T": 1, "L": 0.1, "y_d": {"constant": 0.1}, "output": {"stride": 2}}
        )
