"""State-space dynamic programming for penalized mission-wide problems.

The penalized problem adds ``zeta(MWPS)`` to the expected cost. When zeta is
affine, ``zeta(x) = lam * x + delta``, it commutes with the one-step
expectation and the problem is solved by ordinary backward induction on the
safe states:

    J_N(s) = l_N(s) + lam + delta
    J_k(s) = min_a l(s, a) + sum_s' J_{k+1}(s') P[s' | s, a] + P[fail | s, a] * delta

A trajectory absorbed in the fail state pays ``zeta(0) = delta`` once; a
surviving one pays ``lam + delta`` at the horizon. The exact 0/inf penalty of a
hard constraint does not commute (see ``check_commutation``) and is handled by
``mwcc_tools.augmented`` instead.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from .augmented import terminal_penalty
from .model import MwccError, Policy, Problem
from .safety import mwps_backward

logger = logging.getLogger(__name__)

COMMUTATION_TOLERANCE = 1e-12


class PenaltyError(MwccError):
    """A penalty cannot be used with the requested solver."""

    code = "penalty"


class PenaltyKind(Enum):
    """Supported penalty shapes.

    Attributes:
        AFFINE: zeta(x) = lam * x + delta
        EXACT: zeta(x) = 0 if x >= 1 - epsilon, inf otherwise
    """

    AFFINE = "affine"
    EXACT = "exact"


@dataclass(frozen=True)
class PenaltySpec:
    """A penalty on the mission-wide probability of safety."""

    kind: PenaltyKind
    lam: float = 0.0
    delta: float = 0.0
    epsilon: float = 0.0

    def __post_init__(self) -> None:
        if self.kind is PenaltyKind.AFFINE and not (math.isfinite(self.lam) and math.isfinite(self.delta)):
            raise PenaltyError(f"affine penalty parameters must be finite, got lam={self.lam}, delta={self.delta}")
        if self.kind is PenaltyKind.EXACT and not 0.0 <= self.epsilon <= 1.0:
            raise PenaltyError(f"exact penalty risk bound must lie in [0, 1], got {self.epsilon}")

    @classmethod
    def affine(cls, lam: float, delta: float | None = None) -> PenaltySpec:
        """Affine penalty; ``delta`` defaults to ``-lam`` so that zeta(1) = 0."""
        return cls(PenaltyKind.AFFINE, lam=lam, delta=-lam if delta is None else delta)

    @classmethod
    def exact(cls, epsilon: float) -> PenaltySpec:
        return cls(PenaltyKind.EXACT, epsilon=epsilon)

    def __call__(self, x: float) -> float:
        if self.kind is PenaltyKind.AFFINE:
            return self.lam * x + self.delta
        return terminal_penalty(x, self.epsilon)

    def to_dict(self) -> dict[str, Any]:
        if self.kind is PenaltyKind.AFFINE:
            return {"kind": self.kind.value, "lambda": self.lam, "delta": self.delta}
        return {"kind": self.kind.value, "epsilon": self.epsilon}


@dataclass(frozen=True, eq=False)
class ValueTable:
    """Penalized cost-to-go ``values[k, s]`` for stages 0..N and the greedy policy."""

    values: np.ndarray
    policy: Policy
    initial_state: int

    @property
    def value(self) -> float:
        return float(self.values[0, self.initial_state])

    def records(self, problem: Problem) -> list[dict[str, Any]]:
        return [{"stage": k, "state": problem.states[s], "value": float(v)} for k, row in enumerate(self.values) for s, v in enumerate(row)]


@dataclass(frozen=True)
class CommutationReport:
    """Outcome of comparing zeta(E[V]) with E[zeta(V)]."""

    lhs: float
    rhs: float
    commutes: bool

    def to_dict(self) -> dict[str, Any]:
        return {"lhs": self.lhs, "rhs": self.rhs, "commutes": self.commutes}


@dataclass(frozen=True, eq=False)
class SweepRow:
    lam: float
    delta: float
    cost: float
    mwps: float
    objective: float
    policy: Policy

    def to_record(self) -> dict[str, Any]:
        return {"lambda": self.lam, "delta": self.delta, "cost": self.cost, "mwps": self.mwps, "policy_id": self.policy.digest()}


def _backward(problem: Problem, terminal: np.ndarray, stage_cost: np.ndarray, fail_value: float) -> ValueTable:
    values = np.empty((problem.horizon + 1, problem.n_states))
    values[problem.horizon] = terminal
    rules: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * problem.horizon
    for k in reversed(range(problem.horizon)):
        q = stage_cost + problem.kernel @ values[k + 1] + problem.fail_mass * fail_value
        q = np.where(problem.admissible, q, np.inf)
        # argmin keeps the lowest action index on ties
        rules[k] = np.argmin(q, axis=1)
        values[k] = q[np.arange(problem.n_states), rules[k]]
    return ValueTable(values, Policy(tuple(rules)), problem.initial_state)


def solve_penalized(problem: Problem, penalty: PenaltySpec) -> ValueTable:
    """Solve the penalized problem for an affine penalty by state-space DP."""
    if penalty.kind is not PenaltyKind.AFFINE:
        raise PenaltyError("the exact 0/inf penalty does not commute with the one-step expectation, so state-space DP does not apply; use the augmented solver")
    table = _backward(problem, problem.terminal_cost + penalty.lam + penalty.delta, problem.stage_cost, penalty.delta)
    logger.info("penalized DP (lam=%g, delta=%g): value %.12g", penalty.lam, penalty.delta, table.value)
    return table


def solve_affine_penalty(problem: Problem, lam: float, delta: float | None = None) -> tuple[Policy, ValueTable]:
    """Optimal policy and value table for zeta(x) = lam * x + delta (delta defaults to -lam)."""
    table = solve_penalized(problem, PenaltySpec.affine(lam, delta))
    return table.policy, table


def solve_min_risk(problem: Problem) -> tuple[Policy, float, ValueTable]:
    """Policy minimizing the mission risk 1 - MWPS, costs ignored.

    This is the penalized problem with zero running and terminal costs and
    zeta(x) = 1 - x. Values are per state; ``risk`` is the one at s0.
    """
    zeros = np.zeros_like(problem.stage_cost)
    table = _backward(problem, np.zeros(problem.n_states), zeros, 1.0)
    return table.policy, table.value, table


def policy_cost_table(problem: Problem, policy: Policy) -> np.ndarray:
    """Expected cost-to-go ``[k, s]`` of a Markov policy under zero-cost absorption."""
    policy.validate(problem)
    states = np.arange(problem.n_states)
    values = np.empty((problem.horizon + 1, problem.n_states))
    values[problem.horizon] = problem.terminal_cost
    for k in reversed(range(problem.horizon)):
        rule = policy.rules[k]
        values[k] = problem.stage_cost[states, rule] + problem.kernel[states, rule] @ values[k + 1]
    return values


def policy_cost(problem: Problem, policy: Policy) -> float:
    """Expected total cost of a Markov policy from s0."""
    return float(policy_cost_table(problem, policy)[0, problem.initial_state])


def check_commutation(penalty: PenaltySpec, values: Sequence[float], probabilities: Sequence[float]) -> CommutationReport:
    """Compare zeta(E[V]) with E[zeta(V)] on a finite distribution of safety values."""
    v = np.asarray(values, dtype=np.float64)
    p = np.asarray(probabilities, dtype=np.float64)
    if v.shape != p.shape:
        raise PenaltyError("values and probabilities must have the same length")
    lhs = penalty(float(v @ p))
    rhs = math.fsum(pi * penalty(float(vi)) for vi, pi in zip(v, p) if pi > 0)
    if math.isinf(lhs) or math.isinf(rhs):
        commutes = lhs == rhs
    else:
        commutes = abs(lhs - rhs) <= COMMUTATION_TOLERANCE
    return CommutationReport(lhs, rhs, commutes)


def sweep_lambda(problem: Problem, lambdas: Iterable[float], delta: float | None = None) -> list[SweepRow]:
    """Solve the affine-penalized problem for each price and evaluate the greedy policy.

    ``delta`` defaults to ``-lam`` for each row. Rows are sorted by lambda.
    """
    rows = []
    for lam in sorted(lambdas):
        d = -lam if delta is None else delta
        policy, table = solve_affine_penalty(problem, lam, d)
        rows.append(
            SweepRow(
                lam=lam,
                delta=d,
                cost=policy_cost(problem, policy),
                mwps=mwps_backward(problem, policy).mwps,
                objective=table.value,
                policy=policy,
            )
        )
        logger.debug("lambda=%g: cost %.6g, mwps %.6g", lam, rows[-1].cost, rows[-1].mwps)
    return rows
