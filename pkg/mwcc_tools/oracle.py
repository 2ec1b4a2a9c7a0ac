"""Ground truth on tiny instances.

Everything here is deliberately independent of the dynamic-programming
solvers: Markov policies are enumerated exhaustively and each one is scored by
expanding its full trajectory tree over the safe states plus fail.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .model import BudgetExceededError, Policy, Problem
from .penalty import PenaltySpec
from .rollouts import Controller, RolloutSummary, simulate_controller

logger = logging.getLogger(__name__)

DEFAULT_ENUMERATION_BUDGET = 10**7
FEASIBILITY_SLACK = 1e-12


@dataclass(frozen=True)
class PolicyStats:
    expected_cost: float
    mwps: float


@dataclass(frozen=True, eq=False)
class OracleRow:
    """One enumerated policy with its exact statistics."""

    index: int
    policy: Policy
    expected_cost: float
    mwps: float
    feasible: bool

    def to_record(self, problem: Problem) -> dict[str, Any]:
        return {
            "policy": ";".join(",".join(problem.actions[a] for a in rule) for rule in self.policy.rules),
            "cost": self.expected_cost,
            "mwps": self.mwps,
            "feasible": self.feasible,
        }


@dataclass(eq=False)
class OracleResult:
    """Exhaustive table over Markov policies and the optima read off it.

    ``constrained`` is ``None`` when no policy meets the mission-wide
    constraint. ``penalized`` holds ``(penalty, row, objective)`` per
    requested affine penalty.
    """

    rows: list[OracleRow]
    constrained: OracleRow | None
    penalized: list[tuple[PenaltySpec, OracleRow, float]] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.constrained is not None

    @property
    def verdict(self) -> str:
        return "feasible" if self.feasible else "infeasible"


def policy_count(problem: Problem) -> int:
    per_stage = math.prod(int(problem.admissible[s].sum()) for s in range(problem.n_states))
    return per_stage**problem.horizon


def enumerate_policies(problem: Problem, budget: int = DEFAULT_ENUMERATION_BUDGET) -> Iterator[Policy]:
    """All deterministic Markov policies, in lexicographic order of (stage, state) actions.

    Raises:
        BudgetExceededError: there are more than ``budget`` policies.
    """
    count = policy_count(problem)
    if count > budget:
        raise BudgetExceededError(f"{count} Markov policies exceed the enumeration budget of {budget}")
    slots = [problem.admissible_actions(s) for _ in range(problem.horizon) for s in range(problem.n_states)]
    n = problem.n_states
    for combo in itertools.product(*slots):
        yield Policy(tuple(np.array(combo[k * n : (k + 1) * n], dtype=np.int64) for k in range(problem.horizon)))


def exact_policy_stats(problem: Problem, policy: Policy, budget: int = DEFAULT_ENUMERATION_BUDGET) -> PolicyStats:
    """Expected cost and MWPS of ``policy`` by expanding every trajectory.

    A branch into the fail state ends there with zero further cost.

    Raises:
        BudgetExceededError: ``(|S| + 1) ** N`` exceeds ``budget``.
    """
    size = (problem.n_states + 1) ** problem.horizon
    if size > budget:
        raise BudgetExceededError(f"trajectory tree of {size} leaves exceeds the enumeration budget of {budget}")
    policy.validate(problem)
    cost_terms: list[float] = []
    safe_terms: list[float] = []
    stack = [(0, problem.initial_state, 1.0)]
    while stack:
        k, s, prob = stack.pop()
        if k == problem.horizon:
            cost_terms.append(prob * problem.terminal_cost[s])
            safe_terms.append(prob)
            continue
        a = policy.rules[k][s]
        cost_terms.append(prob * problem.stage_cost[s, a])
        for nxt in np.flatnonzero(problem.kernel[s, a] > 0):
            stack.append((k + 1, int(nxt), prob * problem.kernel[s, a, nxt]))
    return PolicyStats(math.fsum(cost_terms), math.fsum(safe_terms))


def brute_force_constrained(problem: Problem, penalties: Iterable[PenaltySpec] = (), budget: int = DEFAULT_ENUMERATION_BUDGET) -> OracleResult:
    """Score every Markov policy and pick the constrained and penalized optima.

    The constrained optimum is the cheapest policy with MWPS >= 1 - epsilon
    (with slack); ties go to the lexicographically first policy.
    """
    threshold = 1.0 - problem.risk_bound - FEASIBILITY_SLACK
    rows = []
    for i, policy in enumerate(enumerate_policies(problem, budget)):
        stats = exact_policy_stats(problem, policy, budget)
        rows.append(OracleRow(i, policy, stats.expected_cost, stats.mwps, stats.mwps >= threshold))

    constrained = None
    for row in rows:
        if row.feasible and (constrained is None or row.expected_cost < constrained.expected_cost):
            constrained = row

    penalized = []
    for penalty in penalties:
        best = min(rows, key=lambda r: (r.expected_cost + penalty(r.mwps), r.index))
        penalized.append((penalty, best, best.expected_cost + penalty(best.mwps)))

    logger.info("oracle: %d policies, verdict %s", len(rows), "feasible" if constrained else "infeasible")
    return OracleResult(rows, constrained, penalized)


def simulate_rollouts(problem: Problem, policy: Controller, n: int, seed: int, workers: int = 1) -> RolloutSummary:
    """Seeded closed-loop rollouts of a Markov or augmented policy.

    Raises:
        ValueError: ``n < 1``.
    """
    if n < 1:
        raise ValueError(f"rollout count must be at least 1, got {n}")
    if isinstance(policy, Policy):
        policy.validate(problem)
    return simulate_controller(problem, policy, n, seed, workers=workers)
