"""Problem data model for mission-wide chance-constrained control.

A tabular problem is a finite-horizon MDP over an ordered set of safe states
plus one absorbing fail state. The fail state is never stored explicitly: each
kernel row lists probabilities over the safe states and the residual mass
``1 - sum(row)`` is the probability of leaving the safe set. Stage and terminal
costs on the fail state are zero, so a trajectory that fails stops paying.

Problems are built either from the tabular JSON/YAML schema (``build_problem``)
or by discretizing a one-dimensional Gaussian-affine system on a grid
(``discretize``).

Example:
    >>> from mwcc_tools.model import build_problem
    >>> problem = build_problem(data)
    >>> row, fail = problem.transition_row(0, 1)
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
from scipy.stats import norm

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-12
DEFAULT_FAIL_STATE = "fail"


class MwccError(ValueError):
    """Base class for all errors raised by mwcc-tools."""

    code = "error"


class ProblemValidationError(MwccError):
    """A problem violates one of the model invariants."""

    code = "validation"


class SchemaError(MwccError):
    """A problem file does not follow the documented schema."""

    code = "schema"


class PolicyError(MwccError):
    """A policy is malformed or undefined where it is needed."""

    code = "policy"


class BudgetExceededError(MwccError):
    """An enumeration would exceed its configured budget."""

    code = "budget"


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class ContinuousSpec:
    """One-dimensional system ``s+ = state_gain*s + action_gain*a + offset + w``.

    ``w`` is zero-mean Gaussian with standard deviation ``noise_std``. Costs are
    ``stage_state_weight*s**2 + stage_action_weight*a**2`` per stage and
    ``terminal_weight*s**2`` at the horizon.
    """

    noise_std: float
    action_interval: tuple[float, float]
    safe_interval: tuple[float, float]
    horizon: int
    risk_bound: float
    initial_state: float
    state_gain: float = 1.0
    action_gain: float = 1.0
    offset: float = 0.0
    stage_state_weight: float = 1.0
    stage_action_weight: float = 1.0
    terminal_weight: float = 1.0

    def __post_init__(self) -> None:
        a_min, a_max = self.action_interval
        lo, hi = self.safe_interval
        if not self.noise_std > 0:
            raise ProblemValidationError(f"continuous.noise_std must be positive, got {self.noise_std}")
        if not a_min <= a_max:
            raise ProblemValidationError(f"continuous.action_interval must satisfy a_min <= a_max, got [{a_min}, {a_max}]")
        if not lo < hi:
            raise ProblemValidationError(f"continuous.safe_interval must satisfy lo < hi, got [{lo}, {hi}]")
        if not lo <= self.initial_state <= hi:
            raise ProblemValidationError(f"continuous.initial_state {self.initial_state} lies outside the safe interval [{lo}, {hi}]")
        _check_horizon_and_risk(self.horizon, self.risk_bound, prefix="continuous.")
        for name in ("state_gain", "action_gain", "offset", "stage_state_weight", "stage_action_weight", "terminal_weight"):
            if not math.isfinite(getattr(self, name)):
                raise ProblemValidationError(f"continuous.{name} must be finite")

    def stage_cost(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return self.stage_state_weight * s**2 + self.stage_action_weight * a**2

    def terminal_cost(self, s: np.ndarray) -> np.ndarray:
        return self.terminal_weight * s**2

    def mean_next(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        return self.state_gain * s + self.action_gain * a + self.offset


@dataclass(frozen=True)
class GridSpec:
    """Grid resolution used by ``discretize``."""

    n_state_cells: int
    n_actions: int

    def __post_init__(self) -> None:
        if self.n_state_cells < 2:
            raise ProblemValidationError(f"grid.n_state_cells must be at least 2, got {self.n_state_cells}")
        if self.n_actions < 2:
            raise ProblemValidationError(f"grid.n_actions must be at least 2, got {self.n_actions}")


@dataclass(frozen=True)
class Discretization:
    """Grid geometry kept on problems produced by ``discretize``."""

    continuous: ContinuousSpec
    grid: GridSpec
    edges: np.ndarray
    midpoints: np.ndarray
    action_values: np.ndarray

    def cell_of(self, s: np.ndarray) -> np.ndarray:
        """Index of the cell containing each value, clipped to the grid."""
        idx = np.searchsorted(self.edges, s, side="right") - 1
        return np.clip(idx, 0, len(self.midpoints) - 1)


@dataclass(frozen=True, eq=False)
class Problem:
    """Validated tabular problem; immutable after construction.

    Attributes:
        states: Safe-state identifiers, in index order.
        actions: Action identifiers, in index order.
        admissible: Boolean mask ``[state, action]`` of admissible actions.
        kernel: Transition probabilities ``[state, action, next_state]`` over safe states.
        stage_cost: Running cost ``[state, action]``.
        terminal_cost: Terminal cost per safe state.
        horizon: Number of decision stages N.
        risk_bound: Allowed mission failure probability epsilon.
        initial_state: Index of s0 among the safe states.
        fail: Identifier of the absorbing fail state.
    """

    states: tuple[str, ...]
    actions: tuple[str, ...]
    admissible: np.ndarray
    kernel: np.ndarray
    stage_cost: np.ndarray
    terminal_cost: np.ndarray
    horizon: int
    risk_bound: float
    initial_state: int
    fail: str = DEFAULT_FAIL_STATE
    name: str = "problem"
    discretization: Discretization | None = None
    fail_mass: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        admissible = np.array(self.admissible, dtype=bool)
        kernel = np.array(self.kernel, dtype=np.float64)
        stage_cost = np.array(self.stage_cost, dtype=np.float64)
        terminal_cost = np.array(self.terminal_cost, dtype=np.float64)
        n, m = len(self.states), len(self.actions)

        if n == 0:
            raise ProblemValidationError("states: the safe set must not be empty")
        if m == 0:
            raise ProblemValidationError("actions: at least one action is required")
        if len(set(self.states)) != n:
            raise ProblemValidationError("states: identifiers must be unique")
        if self.fail in self.states:
            raise ProblemValidationError(f"fail: '{self.fail}' is also listed as a safe state")
        if admissible.shape != (n, m) or kernel.shape != (n, m, n) or stage_cost.shape != (n, m) or terminal_cost.shape != (n,):
            raise ProblemValidationError(f"array shapes do not match {n} states and {m} actions")
        _check_horizon_and_risk(self.horizon, self.risk_bound)
        if not 0 <= self.initial_state < n:
            raise ProblemValidationError(f"initial_state: index {self.initial_state} is not a safe state")

        for s in range(n):
            if not admissible[s].any():
                raise ProblemValidationError(f"actions: state '{self.states[s]}' has no admissible action")
            for a in np.flatnonzero(admissible[s]):
                row = kernel[s, a]
                where = f"kernel row ({self.states[s]}, {self.actions[a]})"
                if not np.all(np.isfinite(row)):
                    raise ProblemValidationError(f"{where} has non-finite entries")
                if np.any(row < 0):
                    raise ProblemValidationError(f"{where} has a negative probability")
                if np.any(row > 1):
                    raise ProblemValidationError(f"{where} has an entry above 1")
                total = row.sum()
                if total > 1 + PROBABILITY_TOLERANCE:
                    raise ProblemValidationError(f"{where} sums to {total!r} > 1")
                if not math.isfinite(stage_cost[s, a]):
                    raise ProblemValidationError(f"stage_cost ({self.states[s]}, {self.actions[a]}) must be finite")
            if not math.isfinite(terminal_cost[s]):
                raise ProblemValidationError(f"terminal_cost ({self.states[s]}) must be finite")

        # Inadmissible slots are zeroed so they never contribute to any sum.
        kernel[~admissible] = 0.0
        stage_cost[~admissible] = 0.0
        fail_mass = np.clip(1.0 - kernel.sum(axis=2), 0.0, 1.0)

        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "actions", tuple(self.actions))
        object.__setattr__(self, "admissible", _frozen(admissible))
        object.__setattr__(self, "kernel", _frozen(kernel))
        object.__setattr__(self, "stage_cost", _frozen(stage_cost))
        object.__setattr__(self, "terminal_cost", _frozen(terminal_cost))
        object.__setattr__(self, "fail_mass", _frozen(fail_mass))

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def admissible_actions(self, s: int) -> list[int]:
        return [int(a) for a in np.flatnonzero(self.admissible[s])]

    def transition_row(self, s: int, a: int) -> tuple[np.ndarray, float]:
        """Return the safe-state row for ``(s, a)`` and its residual fail mass."""
        if not 0 <= s < self.n_states:
            raise IndexError(f"state index {s} out of range [0, {self.n_states})")
        if not 0 <= a < self.n_actions:
            raise IndexError(f"action index {a} out of range [0, {self.n_actions})")
        if not self.admissible[s, a]:
            raise PolicyError(f"action '{self.actions[a]}' is not admissible at state '{self.states[s]}'")
        return self.kernel[s, a], float(self.fail_mass[s, a])

    def with_risk_bound(self, risk_bound: float) -> Problem:
        """Return a copy with a different epsilon."""
        return replace(self, risk_bound=risk_bound)

    def state_index(self, state: str) -> int:
        try:
            return self.states.index(state)
        except ValueError:
            raise PolicyError(f"unknown state '{state}'") from None

    def action_index(self, action: str) -> int:
        try:
            return self.actions.index(action)
        except ValueError:
            raise PolicyError(f"unknown action '{action}'") from None


@dataclass(frozen=True, eq=False)
class Policy:
    """Deterministic Markov policy: ``rules[k][s]`` is the action index at stage k."""

    rules: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(_frozen(np.array(rule, dtype=np.int64)) for rule in self.rules))

    @property
    def horizon(self) -> int:
        return len(self.rules)

    def validate(self, problem: Problem) -> None:
        if self.horizon != problem.horizon:
            raise PolicyError(f"policy has {self.horizon} decision rules, horizon is {problem.horizon}")
        states = np.arange(problem.n_states)
        for k, rule in enumerate(self.rules):
            if rule.shape != (problem.n_states,):
                raise PolicyError(f"decision rule {k} must assign one action per safe state")
            in_range = (rule >= 0) & (rule < problem.n_actions)
            ok = in_range.copy()
            ok[in_range] = problem.admissible[states[in_range], rule[in_range]]
            if not ok.all():
                s = int(np.flatnonzero(~ok)[0])
                raise PolicyError(f"decision rule {k} assigns an inadmissible action at state '{problem.states[s]}'")

    def suffix(self, k: int) -> Policy:
        """The tail policy (pi_k, ..., pi_{N-1})."""
        return Policy(self.rules[k:])

    def key(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(int(a) for a in rule) for rule in self.rules)

    def digest(self) -> str:
        """Short stable identifier of the action table."""
        return hashlib.sha256(json.dumps(self.key(), separators=(",", ":")).encode("utf-8")).hexdigest()[:12]

    def describe(self, problem: Problem) -> list[dict[str, str]]:
        return [{problem.states[s]: problem.actions[a] for s, a in enumerate(rule)} for rule in self.rules]

    def action_tables(self) -> list[np.ndarray]:
        return [rule[np.newaxis, :] for rule in self.rules]

    def successor_tables(self) -> list[np.ndarray]:
        return [np.zeros((1, len(rule)), dtype=np.int64) for rule in self.rules]

    @classmethod
    def constant(cls, problem: Problem, actions: Sequence[int]) -> Policy:
        """Policy applying ``actions[k]`` at every state in stage k."""
        return cls(tuple(np.full(problem.n_states, a, dtype=np.int64) for a in actions))

    @classmethod
    def from_names(cls, problem: Problem, rules: Sequence[Mapping[str, str]]) -> Policy:
        """Build a policy from per-stage ``{state: action}`` mappings."""
        table = []
        for k, mapping in enumerate(rules):
            rule = np.full(problem.n_states, -1, dtype=np.int64)
            for state, action in mapping.items():
                rule[problem.state_index(state)] = problem.action_index(action)
            if (rule < 0).any():
                missing = problem.states[int(np.flatnonzero(rule < 0)[0])]
                raise PolicyError(f"decision rule {k} has no action for state '{missing}'")
            table.append(rule)
        policy = cls(tuple(table))
        policy.validate(problem)
        return policy


def _check_horizon_and_risk(horizon: Any, risk_bound: Any, prefix: str = "") -> None:
    if not isinstance(horizon, (int, np.integer)) or isinstance(horizon, bool) or horizon < 1:
        raise ProblemValidationError(f"{prefix}horizon must be a positive integer, got {horizon!r}")
    if not isinstance(risk_bound, (int, float)) or isinstance(risk_bound, bool) or not 0.0 <= risk_bound <= 1.0:
        raise ProblemValidationError(f"{prefix}risk_bound must lie in [0, 1], got {risk_bound!r}")


def _mapping(value: Any, where: str) -> Mapping[Any, Any]:
    if not isinstance(value, Mapping):
        raise SchemaError(f"{where} must be a mapping, got {type(value).__name__}")
    return value


def _listing(value: Any, where: str) -> Sequence[Any]:
    if isinstance(value, (str, bytes)) or not isinstance(value, Sequence):
        raise SchemaError(f"{where} must be a list, got {type(value).__name__}")
    return value


def as_number(value: Any, where: str) -> float:
    """``value`` as a float, or a ``SchemaError`` naming ``where``."""
    if isinstance(value, bool):
        raise SchemaError(f"{where} must be a number, got {value!r}")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise SchemaError(f"{where} must be a number, got {value!r}") from None


def _as_action_lists(states: Sequence[str], actions: Any) -> dict[str, list[str]]:
    if isinstance(actions, Mapping):
        unknown = set(actions) - set(states)
        if unknown:
            raise ProblemValidationError(f"actions: unknown states {sorted(unknown)}")
        missing = [s for s in states if s not in actions]
        if missing:
            raise ProblemValidationError(f"actions: no admissible actions listed for state '{missing[0]}'")
        return {s: [str(a) for a in _listing(actions[s], f"actions.{s}")] for s in states}
    if isinstance(actions, Sequence) and not isinstance(actions, str):
        return {s: [str(a) for a in actions] for s in states}
    raise ProblemValidationError("actions must be a list of identifiers or a mapping from state to list")


def build_problem(spec: Mapping[str, Any]) -> Problem:
    """Build and validate a tabular problem from its schema representation.

    ``spec`` follows the tabular problem schema: ``states``, ``actions``
    (a global list or a per-state mapping), ``kernel`` (rows with ``state``,
    ``action`` and sparse ``probs``), nested ``stage_cost``, ``terminal_cost``,
    ``horizon``, ``risk_bound`` and ``initial_state``; ``fail`` and ``name``
    are optional.

    Raises:
        ProblemValidationError: naming the offending row or field.
        SchemaError: a field has the wrong shape or a value is not a number.
    """
    for key in ("states", "actions", "kernel", "stage_cost", "terminal_cost", "horizon", "risk_bound", "initial_state"):
        if key not in spec:
            raise ProblemValidationError(f"missing required field '{key}'")

    states = [str(s) for s in _listing(spec["states"], "states")]
    if not states:
        raise ProblemValidationError("states: the safe set must not be empty")
    per_state = _as_action_lists(states, spec["actions"])
    actions: list[str] = []
    for lst in per_state.values():
        for a in lst:
            if a not in actions:
                actions.append(a)

    n, m = len(states), len(actions)
    s_idx = {s: i for i, s in enumerate(states)}
    a_idx = {a: j for j, a in enumerate(actions)}
    admissible = np.zeros((n, m), dtype=bool)
    for s, lst in per_state.items():
        admissible[s_idx[s], [a_idx[a] for a in lst]] = True

    fail = str(spec.get("fail", DEFAULT_FAIL_STATE))
    kernel = np.zeros((n, m, n))
    seen = np.zeros((n, m), dtype=bool)
    for i, entry in enumerate(_listing(spec["kernel"], "kernel")):
        try:
            s, a, probs = str(entry["state"]), str(entry["action"]), entry["probs"]
        except (KeyError, TypeError):
            raise ProblemValidationError(f"kernel[{i}] must have 'state', 'action' and 'probs'") from None
        if s not in s_idx:
            raise ProblemValidationError(f"kernel[{i}]: unknown state '{s}'")
        if a not in a_idx or not admissible[s_idx[s], a_idx[a]]:
            raise ProblemValidationError(f"kernel row ({s}, {a}): action is not admissible at this state")
        if seen[s_idx[s], a_idx[a]]:
            raise ProblemValidationError(f"kernel row ({s}, {a}) is listed twice")
        seen[s_idx[s], a_idx[a]] = True
        for target, p in _mapping(probs, f"kernel[{i}].probs").items():
            if str(target) == fail:
                continue
            if str(target) not in s_idx:
                raise ProblemValidationError(f"kernel row ({s}, {a}): unknown target state '{target}'")
            kernel[s_idx[s], a_idx[a], s_idx[str(target)]] = as_number(p, f"kernel[{i}].probs.{target}")
    missing = admissible & ~seen
    if missing.any():
        s, a = (int(x) for x in np.argwhere(missing)[0])
        raise ProblemValidationError(f"kernel row ({states[s]}, {actions[a]}) is missing")

    stage_cost = np.zeros((n, m))
    for s, row in _mapping(spec["stage_cost"], "stage_cost").items():
        if str(s) not in s_idx:
            raise ProblemValidationError(f"stage_cost: unknown state '{s}'")
        for a, value in _mapping(row, f"stage_cost.{s}").items():
            if str(a) not in a_idx or not admissible[s_idx[str(s)], a_idx[str(a)]]:
                raise ProblemValidationError(f"stage_cost ({s}, {a}): action is not admissible at this state")
            stage_cost[s_idx[str(s)], a_idx[str(a)]] = as_number(value, f"stage_cost.{s}.{a}")

    terminal_cost = np.zeros(n)
    for s, value in _mapping(spec["terminal_cost"], "terminal_cost").items():
        if str(s) not in s_idx:
            raise ProblemValidationError(f"terminal_cost: unknown state '{s}'")
        terminal_cost[s_idx[str(s)]] = as_number(value, f"terminal_cost.{s}")

    initial = str(spec["initial_state"])
    if initial not in s_idx:
        raise ProblemValidationError(f"initial_state: '{initial}' is not a safe state")

    return Problem(
        states=tuple(states),
        actions=tuple(actions),
        admissible=admissible,
        kernel=kernel,
        stage_cost=stage_cost,
        terminal_cost=terminal_cost,
        horizon=spec["horizon"],
        risk_bound=spec["risk_bound"],
        initial_state=s_idx[initial],
        fail=fail,
        name=str(spec.get("name", "problem")),
    )


def discretize(cspec: ContinuousSpec, grid: GridSpec) -> Problem:
    """Discretize a one-dimensional Gaussian-affine system on a uniform grid.

    The safe interval is split into ``grid.n_state_cells`` equal cells
    represented by their midpoints; actions are ``grid.n_actions`` equispaced
    points of the action interval. The kernel entry for (cell i, action a,
    cell j) is the Gaussian measure of cell j around the image of midpoint i.
    Mass outside the safe interval goes to fail.
    """
    lo, hi = cspec.safe_interval
    edges = np.linspace(lo, hi, grid.n_state_cells + 1)
    midpoints = 0.5 * (edges[:-1] + edges[1:])
    action_values = np.linspace(cspec.action_interval[0], cspec.action_interval[1], grid.n_actions)

    means = cspec.mean_next(midpoints[:, np.newaxis], action_values[np.newaxis, :])
    z = (edges[np.newaxis, np.newaxis, :] - means[:, :, np.newaxis]) / cspec.noise_std
    kernel = np.clip(_gaussian_cell_mass(z[:, :, :-1], z[:, :, 1:]), 0.0, 1.0)

    geometry = Discretization(cspec, grid, _frozen(edges), _frozen(midpoints), _frozen(action_values))
    states = tuple(f"s{i}" for i in range(grid.n_state_cells))
    actions = tuple(f"a{j}" for j in range(grid.n_actions))
    initial = int(geometry.cell_of(np.asarray(cspec.initial_state)))

    logger.debug("discretized %d cells x %d actions, initial cell %d", grid.n_state_cells, grid.n_actions, initial)
    return Problem(
        states=states,
        actions=actions,
        admissible=np.ones((grid.n_state_cells, grid.n_actions), dtype=bool),
        kernel=kernel,
        stage_cost=cspec.stage_cost(midpoints[:, np.newaxis], action_values[np.newaxis, :]),
        terminal_cost=cspec.terminal_cost(midpoints),
        horizon=cspec.horizon,
        risk_bound=cspec.risk_bound,
        initial_state=initial,
        name="discretized",
        discretization=geometry,
    )


def _gaussian_cell_mass(z_lo: np.ndarray, z_hi: np.ndarray) -> np.ndarray:
    """Standard normal measure of ``[z_lo, z_hi]``.

    Cells entirely above the mean are measured with survival functions so the
    far upper tail keeps its precision.
    """
    above = z_lo >= 0
    return np.where(above, norm.sf(z_lo) - norm.sf(z_hi), norm.cdf(z_hi) - norm.cdf(z_lo))
