"""Problem files, reports and tables.

Problem files follow the schema in ``docs/requirements/req-fn-0001.md`` and may
be written as JSON or YAML; the format is detected from the extension and
otherwise by trying JSON first, then YAML. Unknown keys are rejected.

Example:
    >>> from mwcc_tools.problem_io import load_problem
    >>> problem = load_problem("chain-v1.json")
"""

from __future__ import annotations

import csv
import json
from collections.abc import Iterable, Mapping
from dataclasses import replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .model import ContinuousSpec, GridSpec, Policy, Problem, SchemaError, as_number, build_problem, discretize

TABULAR_KEYS = {"name", "states", "fail", "actions", "kernel", "stage_cost", "terminal_cost", "horizon", "risk_bound", "initial_state"}
REQUIRED_TABULAR_KEYS = TABULAR_KEYS - {"name", "fail"}
CONTINUOUS_TOP_KEYS = {"name", "continuous", "grid"}
CONTINUOUS_KEYS = {
    "noise_std",
    "action_interval",
    "safe_interval",
    "horizon",
    "risk_bound",
    "initial_state",
    "state_gain",
    "action_gain",
    "offset",
    "stage_state_weight",
    "stage_action_weight",
    "terminal_weight",
}
GRID_KEYS = {"n_state_cells", "n_actions"}


class InputFormat(Enum):
    """Supported problem file formats."""

    JSON = "json"
    YAML = "yaml"


def detect_format(file_path: str | Path | None) -> InputFormat | None:
    """Guess the format from the file extension; ``None`` when unknown."""
    if file_path is None:
        return None
    suffix = Path(file_path).suffix.lower()
    if suffix in (".yaml", ".yml"):
        return InputFormat.YAML
    if suffix == ".json":
        return InputFormat.JSON
    return None


def parse_content(content: str, format_hint: InputFormat | None = None, source: str = "<string>") -> Any:
    """Parse JSON or YAML content, with line context on errors."""
    if format_hint is not InputFormat.YAML:
        try:
            data = json.loads(content)
        except json.JSONDecodeError as e:
            if format_hint is InputFormat.JSON:
                raise SchemaError(f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
        else:
            return data
    try:
        data = yaml.safe_load(content)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark is not None else source
        raise SchemaError(f"{where}: unable to parse file: {getattr(e, 'problem', None) or e}") from None
    return data


def parse_document(content: str, format_hint: InputFormat | None = None, source: str = "<string>") -> dict[str, Any]:
    """Parse a problem document; the top level must be a mapping."""
    return _require_mapping(parse_content(content, format_hint, source), source)


def _require_mapping(data: Any, source: str) -> dict[str, Any]:
    if not isinstance(data, dict):
        raise SchemaError(f"{source}: a problem file must contain a mapping at the top level")
    return data


def _reject_unknown(data: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise SchemaError(f"{where}: unknown keys {unknown}")


def continuous_spec_from_data(block: Mapping[str, Any]) -> ContinuousSpec:
    if not isinstance(block, Mapping):
        raise SchemaError("continuous must be a mapping")
    _reject_unknown(block, CONTINUOUS_KEYS, "continuous")
    missing = sorted({"noise_std", "action_interval", "safe_interval", "horizon", "risk_bound", "initial_state"} - set(block))
    if missing:
        raise SchemaError(f"continuous: missing keys {missing}")
    values = dict(block)
    for key in ("action_interval", "safe_interval"):
        interval = values[key]
        if not isinstance(interval, (list, tuple)) or len(interval) != 2:
            raise SchemaError(f"continuous.{key} must be a two-element list")
        values[key] = (as_number(interval[0], f"continuous.{key}[0]"), as_number(interval[1], f"continuous.{key}[1]"))
    for key in ("noise_std", "initial_state"):
        values[key] = as_number(values[key], f"continuous.{key}")
    return ContinuousSpec(**values)


def grid_spec_from_data(block: Mapping[str, Any]) -> GridSpec:
    if not isinstance(block, Mapping):
        raise SchemaError("grid must be a mapping")
    _reject_unknown(block, GRID_KEYS, "grid")
    missing = sorted(GRID_KEYS - set(block))
    if missing:
        raise SchemaError(f"grid: missing keys {missing}")
    for key in ("n_state_cells", "n_actions"):
        if isinstance(block[key], bool) or not isinstance(block[key], int):
            raise SchemaError(f"grid.{key} must be an integer, got {block[key]!r}")
    return GridSpec(block["n_state_cells"], block["n_actions"])


def problem_from_data(data: Mapping[str, Any], grid: GridSpec | None = None) -> Problem:
    """Build a problem from a parsed document.

    A document with a ``continuous`` block is discretized on its ``grid`` (or
    on ``grid`` when given); anything else is read as a tabular problem.
    """
    if "continuous" in data:
        _reject_unknown(data, CONTINUOUS_TOP_KEYS, "problem")
        cspec = continuous_spec_from_data(data["continuous"])
        if grid is None:
            if "grid" not in data:
                raise SchemaError("problem: a continuous problem needs a 'grid' block or an explicit grid")
            grid = grid_spec_from_data(data["grid"])
        problem = discretize(cspec, grid)
        return replace(problem, name=str(data["name"])) if "name" in data else problem
    _reject_unknown(data, TABULAR_KEYS, "problem")
    missing = sorted(REQUIRED_TABULAR_KEYS - set(data))
    if missing:
        raise SchemaError(f"problem: missing keys {missing}")
    return build_problem(data)


def load_document(path: str | Path) -> dict[str, Any]:
    """Read and parse a problem file without building the problem."""
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"Problem file not found: {path}")
    content = file_path.read_text(encoding="utf-8")
    return parse_document(content, detect_format(file_path), source=str(file_path))


def load_problem(path: str | Path, grid: GridSpec | None = None) -> Problem:
    """Load and validate a problem file.

    Raises:
        FileNotFoundError: the file does not exist.
        SchemaError: the file cannot be parsed or has unknown keys.
        ProblemValidationError: the problem violates a model invariant.
    """
    return problem_from_data(load_document(path), grid)


def override_grid(data: Mapping[str, Any], n_state_cells: int | None = None, n_actions: int | None = None) -> GridSpec | None:
    """Grid of a continuous document with the given fields replaced; ``None`` when nothing is overridden."""
    if n_state_cells is None and n_actions is None:
        return None
    if "continuous" not in data:
        raise SchemaError("grid overrides apply to continuous problems only")
    base = dict(data.get("grid") or {})
    if n_state_cells is not None:
        base["n_state_cells"] = n_state_cells
    if n_actions is not None:
        base["n_actions"] = n_actions
    return grid_spec_from_data(base)


def scenario_path(name: str) -> Path:
    """Path of a scenario file shipped with the package."""
    path = resources.files("mwcc_tools") / "scenarios" / name
    return Path(str(path))


def dump_problem(problem: Problem) -> dict[str, Any]:
    """Tabular schema representation of any problem, discretized ones included."""
    per_state = {problem.states[s]: [problem.actions[a] for a in problem.admissible_actions(s)] for s in range(problem.n_states)}
    uniform = all(lst == list(problem.actions) for lst in per_state.values())
    kernel = []
    for s in range(problem.n_states):
        for a in problem.admissible_actions(s):
            row = problem.kernel[s, a]
            probs = {problem.states[t]: float(row[t]) for t in range(problem.n_states) if row[t] > 0}
            kernel.append({"state": problem.states[s], "action": problem.actions[a], "probs": probs})
    return {
        "name": problem.name,
        "states": list(problem.states),
        "fail": problem.fail,
        "actions": list(problem.actions) if uniform else per_state,
        "kernel": kernel,
        "stage_cost": {problem.states[s]: {problem.actions[a]: float(problem.stage_cost[s, a]) for a in problem.admissible_actions(s)} for s in range(problem.n_states)},
        "terminal_cost": {problem.states[s]: float(problem.terminal_cost[s]) for s in range(problem.n_states)},
        "horizon": problem.horizon,
        "risk_bound": problem.risk_bound,
        "initial_state": problem.states[problem.initial_state],
    }


def dumps_json(data: Any) -> str:
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"


def write_json(path: Path, data: Any) -> None:
    path.write_text(dumps_json(data), encoding="utf-8")


def write_csv(path: Path, records: Iterable[Mapping[str, Any]], fieldnames: list[str]) -> None:
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(record)


def load_policy_file(path: str | Path, problem: Problem) -> Policy:
    """Read a Markov policy: a list of per-stage ``{state: action}`` mappings."""
    file_path = Path(path)
    if not file_path.exists():
        raise FileNotFoundError(f"Policy file not found: {path}")
    data = parse_content(file_path.read_text(encoding="utf-8"), detect_format(file_path), source=str(file_path))
    if not isinstance(data, list) or not all(isinstance(rule, dict) for rule in data):
        raise SchemaError(f"{file_path}: a policy file must be a list of {{state: action}} mappings")
    return Policy.from_names(problem, data)
