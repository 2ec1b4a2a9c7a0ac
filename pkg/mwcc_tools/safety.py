"""Mission-wide probability of safety (MWPS) of a fixed Markov policy.

Three independent routes are provided:

- ``mwps_backward``: backward recursion of safety values, V_N = 1 on the safe
  set and V_k(s) = sum_s' V_{k+1}(s') P[s' | s, pi_k(s)].
- ``mwps_forward``: forward propagation of the functional state F_k, the
  sub-probability of having stayed safe and being at s at stage k; the MWPS
  is the total mass of F_N.
- ``monte_carlo_mwps``: seeded closed-loop rollouts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from .model import PolicyError, Policy, Problem
from .rollouts import simulate_controller

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SafetyValueTable:
    """Safety values ``values[k, s]`` for stages 0..N."""

    values: np.ndarray
    initial_state: int

    @property
    def mwps(self) -> float:
        return float(self.values[0, self.initial_state])

    def records(self, problem: Problem) -> list[dict[str, Any]]:
        return [{"stage": k, "state": problem.states[s], "value": float(v)} for k, row in enumerate(self.values) for s, v in enumerate(row)]

    def to_dict(self, problem: Problem) -> dict[str, Any]:
        return {
            "mwps": self.mwps,
            "initial_state": problem.states[self.initial_state],
            "values": [{problem.states[s]: float(v) for s, v in enumerate(row)} for row in self.values],
        }


@dataclass(frozen=True, eq=False)
class FunctionalState:
    """Sub-probability vector over the safe states at stage ``stage``."""

    mass: np.ndarray
    stage: int = 0

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    @classmethod
    def initial(cls, problem: Problem) -> FunctionalState:
        mass = np.zeros(problem.n_states)
        mass[problem.initial_state] = 1.0
        return cls(mass, 0)


def mwps_backward(problem: Problem, policy: Policy) -> SafetyValueTable:
    """Safety values of ``policy`` by backward recursion; ``table.mwps`` is V_0(s0)."""
    policy.validate(problem)
    states = np.arange(problem.n_states)
    values = np.ones((problem.horizon + 1, problem.n_states))
    for k in reversed(range(problem.horizon)):
        rows = problem.kernel[states, policy.rules[k]]
        values[k] = np.clip(rows @ values[k + 1], 0.0, 1.0)
    return SafetyValueTable(values, problem.initial_state)


def propagate_F(problem: Problem, belief: FunctionalState, rule: np.ndarray) -> FunctionalState:
    """Advance a functional state one stage under a decision rule.

    ``rule`` must assign an admissible action to every state carrying mass;
    entries elsewhere are ignored and may be negative.
    """
    if belief.stage >= problem.horizon:
        raise PolicyError(f"functional state is already at the horizon (stage {belief.stage})")
    rule = np.asarray(rule, dtype=np.int64)
    support = np.flatnonzero(belief.mass > 0)
    actions = rule[support]
    valid = (actions >= 0) & (actions < problem.n_actions)
    valid[valid] = problem.admissible[support[valid], actions[valid]]
    if not valid.all():
        s = int(support[np.flatnonzero(~valid)[0]])
        raise PolicyError(f"decision rule has no admissible action for supported state '{problem.states[s]}' at stage {belief.stage}")
    mass = belief.mass[support] @ problem.kernel[support, actions] if len(support) else np.zeros(problem.n_states)
    return FunctionalState(mass, belief.stage + 1)


def functional_states(problem: Problem, policy: Policy) -> list[FunctionalState]:
    """F_0, ..., F_N under ``policy``."""
    policy.validate(problem)
    trajectory = [FunctionalState.initial(problem)]
    for rule in policy.rules:
        trajectory.append(propagate_F(problem, trajectory[-1], rule))
    return trajectory


def mwps_forward(problem: Problem, policy: Policy) -> float:
    """MWPS as the total mass of F_N."""
    return functional_states(problem, policy)[-1].total


def monte_carlo_mwps(problem: Problem, policy: Policy, n: int, seed: int, workers: int = 1) -> tuple[float, float]:
    """Monte Carlo estimate of the MWPS and its binomial standard error."""
    policy.validate(problem)
    summary = simulate_controller(problem, policy, n, seed, workers=workers)
    return summary.safety_fraction, summary.safety_stderr
