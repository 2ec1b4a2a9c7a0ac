"""Tests for the problem_io module."""

import json
import re
from collections.abc import Callable
from pathlib import Path
from typing import Any

import numpy as np
import pytest
import yaml

from mwcc_tools.model import GridSpec, PolicyError, ProblemValidationError, SchemaError, build_problem, discretize
from mwcc_tools.problem_io import (
    InputFormat,
    detect_format,
    dump_problem,
    dumps_json,
    load_policy_file,
    load_problem,
    override_grid,
    parse_content,
    problem_from_data,
    scenario_path,
    write_csv,
    write_json,
)

from .factories import chain_v1_data, two_state_data

CONTINUOUS = {
    "name": "small-continuous",
    "continuous": {
        "noise_std": 0.05,
        "action_interval": [-0.1, 0.1],
        "safe_interval": [-1.0, 1.0],
        "horizon": 2,
        "risk_bound": 0.1,
        "initial_state": 0.5,
    },
    "grid": {"n_state_cells": 41, "n_actions": 5},
}


class TestLoadProblem:
    """Test cases for loading problem files."""

    def test_packaged_chain(self) -> None:
        """Test that the shipped chain-v1 scenario loads as a one-state problem."""
        problem = load_problem(scenario_path("chain-v1.json"))

        assert problem.n_states == 1
        assert problem.name == "chain-v1"
        assert problem.fail == "X"

    def test_packaged_case_study(self) -> None:
        """Test that the shipped case-study scenario discretizes onto 401 states."""
        problem = load_problem(scenario_path("casestudy.json"))

        assert problem.n_states == 401
        assert problem.n_actions == 21
        assert problem.name == "casestudy"
        assert problem.discretization is not None

    def test_yaml_file(self, tmp_path: Path) -> None:
        """Test that YAML problem files are accepted."""
        path = tmp_path / "chain.yaml"
        path.write_text(yaml.safe_dump(chain_v1_data()), encoding="utf-8")

        problem = load_problem(path)

        assert problem.actions == ("a1", "a2")

    def test_unknown_extension_falls_back_to_yaml(self, tmp_path: Path) -> None:
        """Test that content without a known extension is still parsed."""
        path = tmp_path / "chain.problem"
        path.write_text(yaml.safe_dump(chain_v1_data()), encoding="utf-8")

        assert load_problem(path).n_states == 1

    def test_risk_bound_out_of_range(self, tmp_path: Path) -> None:
        """Test that a risk bound of 1.5 is a validation error."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({**chain_v1_data(), "risk_bound": 1.5}), encoding="utf-8")

        with pytest.raises(ProblemValidationError, match="risk_bound"):
            load_problem(path)

    def test_unknown_key(self, tmp_path: Path) -> None:
        """Test that unknown top-level keys are rejected."""
        path = tmp_path / "extra.json"
        path.write_text(json.dumps({**chain_v1_data(), "discount": 0.9}), encoding="utf-8")

        with pytest.raises(SchemaError, match="discount"):
            load_problem(path)

    def test_missing_key(self, tmp_path: Path) -> None:
        """Test that required keys are enforced."""
        data = chain_v1_data()
        del data["horizon"]
        path = tmp_path / "missing.json"
        path.write_text(json.dumps(data), encoding="utf-8")

        with pytest.raises(SchemaError, match="horizon"):
            load_problem(path)

    def test_invalid_json_has_line_context(self, tmp_path: Path) -> None:
        """Test that JSON syntax errors report file, line and column."""
        path = tmp_path / "broken.json"
        path.write_text('{\n  "states": ["A"],\n  "horizon": ,\n}\n', encoding="utf-8")

        with pytest.raises(SchemaError, match=r"broken\.json:3:"):
            load_problem(path)

    def test_invalid_yaml_has_line_context(self, tmp_path: Path) -> None:
        """Test that YAML syntax errors report file and line."""
        path = tmp_path / "broken.yaml"
        path.write_text("states: [A\nhorizon: 2\n", encoding="utf-8")

        with pytest.raises(SchemaError, match=r"broken\.yaml:\d+:\d+"):
            load_problem(path)

    def test_top_level_must_be_mapping(self, tmp_path: Path) -> None:
        """Test that a list document is rejected."""
        path = tmp_path / "list.json"
        path.write_text("[1, 2, 3]", encoding="utf-8")

        with pytest.raises(SchemaError, match="mapping"):
            load_problem(path)

    def test_file_not_found(self, tmp_path: Path) -> None:
        """Test that a missing file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError, match="Problem file not found"):
            load_problem(tmp_path / "absent.json")


def _set_probs(data: dict[str, Any], value: Any) -> None:
    data["kernel"][0]["probs"] = value


def _set_first_probability(data: dict[str, Any], value: Any) -> None:
    data["kernel"][0]["probs"]["A"] = value


class TestMalformedFields:
    """Test cases for fields of the wrong shape in tabular documents."""

    @pytest.mark.parametrize(
        "mutate, message",
        [
            (lambda d: _set_probs(d, [0.9]), "kernel[0].probs must be a mapping"),
            (lambda d: _set_first_probability(d, "abc"), "kernel[0].probs.A must be a number, got 'abc'"),
            (lambda d: _set_first_probability(d, None), "kernel[0].probs.A must be a number"),
            (lambda d: d.update(kernel=5), "kernel must be a list"),
            (lambda d: d.update(states="A"), "states must be a list"),
            (lambda d: d.update(stage_cost=[0, 1]), "stage_cost must be a mapping"),
            (lambda d: d.update(stage_cost={"A": [0.0, 1.0]}), "stage_cost.A must be a mapping"),
            (lambda d: d.update(stage_cost={"A": {"a1": "cheap", "a2": 1.0}}), "stage_cost.A.a1 must be a number"),
            (lambda d: d.update(terminal_cost=0.0), "terminal_cost must be a mapping"),
            (lambda d: d.update(terminal_cost={"A": True}), "terminal_cost.A must be a number"),
            (lambda d: d.update(actions={"A": "a1"}), "actions.A must be a list"),
        ],
    )
    def test_field_is_named(self, mutate: Callable[[dict[str, Any]], None], message: str) -> None:
        """Test that a malformed field raises a schema error naming it."""
        data = chain_v1_data()
        mutate(data)

        with pytest.raises(SchemaError, match=re.escape(message)):
            problem_from_data(data)

    def test_malformed_file(self, tmp_path: Path) -> None:
        """Test that load_problem reports the field of a malformed file."""
        data = chain_v1_data()
        data["kernel"][1]["probs"] = [0.99, 0.01]
        path = tmp_path / "bad-probs.json"
        path.write_text(json.dumps(data), encoding="utf-8")

        with pytest.raises(SchemaError, match=re.escape("kernel[1].probs must be a mapping")):
            load_problem(path)

    @pytest.mark.parametrize(
        "block, key, value, message",
        [
            ("continuous", "noise_std", "wide", "continuous.noise_std must be a number"),
            ("continuous", "safe_interval", [-1.0, "one"], "continuous.safe_interval[1] must be a number"),
            ("grid", "n_state_cells", "41", "grid.n_state_cells must be an integer"),
        ],
    )
    def test_continuous_field_is_named(self, block: str, key: str, value: Any, message: str) -> None:
        """Test that malformed continuous and grid fields raise schema errors naming them."""
        data = json.loads(json.dumps(CONTINUOUS))
        data[block][key] = value

        with pytest.raises(SchemaError, match=re.escape(message)):
            problem_from_data(data)


class TestContinuousDocuments:
    """Test cases for continuous problem documents."""

    def test_discretized_on_its_grid(self) -> None:
        """Test that a continuous block is discretized on its grid."""
        problem = problem_from_data(CONTINUOUS)

        assert problem.n_states == 41
        assert problem.n_actions == 5
        assert problem.name == "small-continuous"

    def test_grid_override(self) -> None:
        """Test replacing one grid field."""
        grid = override_grid(CONTINUOUS, n_state_cells=21)

        assert grid == GridSpec(21, 5)
        assert problem_from_data(CONTINUOUS, grid).n_states == 21

    def test_no_override(self) -> None:
        """Test that no override leaves the grid to the document."""
        assert override_grid(CONTINUOUS) is None

    def test_override_on_tabular_problem(self) -> None:
        """Test that grid overrides are refused for tabular problems."""
        with pytest.raises(SchemaError, match="continuous problems only"):
            override_grid(chain_v1_data(), n_actions=3)

    def test_unknown_continuous_key(self) -> None:
        """Test that unknown keys inside the continuous block are rejected."""
        data = json.loads(json.dumps(CONTINUOUS))
        data["continuous"]["drift"] = 0.1

        with pytest.raises(SchemaError, match="drift"):
            problem_from_data(data)

    def test_interval_shape(self) -> None:
        """Test that intervals must have two elements."""
        data = json.loads(json.dumps(CONTINUOUS))
        data["continuous"]["safe_interval"] = [-1.0]

        with pytest.raises(SchemaError, match="safe_interval"):
            problem_from_data(data)

    def test_missing_grid(self) -> None:
        """Test that a continuous problem needs a grid."""
        data = {key: value for key, value in CONTINUOUS.items() if key != "grid"}

        with pytest.raises(SchemaError, match="grid"):
            problem_from_data(data)

    def test_invalid_continuous_values(self) -> None:
        """Test that continuous invariants are enforced."""
        data = json.loads(json.dumps(CONTINUOUS))
        data["continuous"]["noise_std"] = -1.0

        with pytest.raises(ProblemValidationError, match="noise_std"):
            problem_from_data(data)


class TestDumpProblem:
    """Test cases for emitting problems in the tabular schema."""

    def test_round_trip_chain(self) -> None:
        """Test that chain-v1 survives a JSON round trip bitwise."""
        problem = build_problem(chain_v1_data())

        reloaded = build_problem(json.loads(dumps_json(dump_problem(problem))))

        assert reloaded.kernel.tobytes() == problem.kernel.tobytes()
        assert reloaded.stage_cost.tobytes() == problem.stage_cost.tobytes()
        assert reloaded.terminal_cost.tobytes() == problem.terminal_cost.tobytes()
        assert reloaded.fail == "X"

    def test_round_trip_discretized(self) -> None:
        """Test that a discretized problem round-trips through the tabular schema."""
        problem = problem_from_data(CONTINUOUS)

        reloaded = build_problem(json.loads(dumps_json(dump_problem(problem))))

        assert reloaded.states == problem.states
        assert reloaded.actions == problem.actions
        assert np.array_equal(reloaded.kernel, problem.kernel)
        assert np.array_equal(reloaded.stage_cost, problem.stage_cost)
        assert np.array_equal(reloaded.terminal_cost, problem.terminal_cost)
        assert reloaded.initial_state == problem.initial_state

    def test_per_state_actions_are_kept(self) -> None:
        """Test that non-uniform admissibility is emitted as a mapping."""
        data = two_state_data()
        data["actions"] = {"A": ["go", "stay"], "B": ["stay"]}
        data["kernel"] = [row for row in data["kernel"] if not (row["state"] == "B" and row["action"] == "go")]
        del data["stage_cost"]["B"]["go"]

        dumped = dump_problem(build_problem(data))

        assert dumped["actions"] == {"A": ["go", "stay"], "B": ["stay"]}
        assert len(dumped["kernel"]) == 3

    def test_discretized_dump_size(self) -> None:
        """Test that discretize output dumps one kernel row per cell and action."""
        problem = discretize(problem_from_data(CONTINUOUS).discretization.continuous, GridSpec(11, 3))  # type: ignore[union-attr]

        assert len(dump_problem(problem)["kernel"]) == 33


class TestFormatsAndTables:
    """Test cases for format detection and table writers."""

    @pytest.mark.parametrize(
        ("name", "expected"),
        [("p.json", InputFormat.JSON), ("p.yaml", InputFormat.YAML), ("p.YML", InputFormat.YAML), ("p.txt", None), (None, None)],
    )
    def test_detect_format(self, name: str | None, expected: InputFormat | None) -> None:
        """Test extension-based format detection."""
        assert detect_format(name) == expected

    def test_parse_content_prefers_json(self) -> None:
        """Test that JSON content parses without a hint."""
        assert parse_content('{"a": 1}') == {"a": 1}

    def test_write_json(self, tmp_path: Path) -> None:
        """Test that JSON is indented and newline-terminated."""
        path = tmp_path / "r.json"

        write_json(path, {"b": 1, "a": [1, 2]})

        text = path.read_text(encoding="utf-8")
        assert text.endswith("}\n")
        assert json.loads(text) == {"b": 1, "a": [1, 2]}

    def test_write_csv(self, tmp_path: Path) -> None:
        """Test the CSV header and rows."""
        path = tmp_path / "t.csv"

        write_csv(path, [{"stage": 0, "state": "A", "value": 0.81}], ["stage", "state", "value"])

        assert path.read_text(encoding="utf-8") == "stage,state,value\n0,A,0.81\n"


class TestLoadPolicyFile:
    """Test cases for Markov policy files."""

    def test_valid_policy(self, tmp_path: Path) -> None:
        """Test reading a per-stage action list."""
        problem = build_problem(chain_v1_data())
        path = tmp_path / "policy.json"
        path.write_text(json.dumps([{"A": "a1"}, {"A": "a2"}]), encoding="utf-8")

        assert load_policy_file(path, problem).key() == ((0,), (1,))

    def test_malformed_policy(self, tmp_path: Path) -> None:
        """Test that a policy must be a list of mappings."""
        problem = build_problem(chain_v1_data())
        path = tmp_path / "policy.json"
        path.write_text(json.dumps({"A": "a1"}), encoding="utf-8")

        with pytest.raises(SchemaError, match="list"):
            load_policy_file(path, problem)

    def test_inadmissible_policy(self, tmp_path: Path) -> None:
        """Test that a policy of the wrong length is rejected."""
        problem = build_problem(chain_v1_data())
        path = tmp_path / "policy.yaml"
        path.write_text("- A: a1\n", encoding="utf-8")

        with pytest.raises(PolicyError, match="horizon"):
            load_policy_file(path, problem)
