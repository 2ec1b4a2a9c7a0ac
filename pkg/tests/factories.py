"""Problem builders shared by the test suite."""

import copy
from collections.abc import Iterator
from typing import Any

import numpy as np

from mwcc_tools.model import Policy, Problem, build_problem

CHAIN_V1: dict[str, Any] = {
    "name": "chain-v1",
    "states": ["A"],
    "fail": "X",
    "actions": ["a1", "a2"],
    "kernel": [
        {"state": "A", "action": "a1", "probs": {"A": 0.9, "X": 0.1}},
        {"state": "A", "action": "a2", "probs": {"A": 0.99, "X": 0.01}},
    ],
    "stage_cost": {"A": {"a1": 0.0, "a2": 1.0}},
    "terminal_cost": {"A": 0.0},
    "horizon": 2,
    "risk_bound": 0.15,
    "initial_state": "A",
}

# (states, actions, horizon) with at most 729 Markov policies
TINY_SHAPES = [(1, 2, 2), (2, 2, 2), (2, 3, 2), (3, 2, 2), (2, 2, 3), (1, 3, 4), (3, 2, 3), (4, 2, 2), (3, 3, 2), (2, 3, 3)]


def chain_v1_data() -> dict[str, Any]:
    return copy.deepcopy(CHAIN_V1)


def chain_v1(risk_bound: float = 0.15) -> Problem:
    data = chain_v1_data()
    data["risk_bound"] = risk_bound
    return build_problem(data)


def two_state_data() -> dict[str, Any]:
    """Two safe states where the cheap action at B is risky and the safe one at A is expensive."""
    return {
        "name": "two-state",
        "states": ["A", "B"],
        "actions": ["go", "stay"],
        "kernel": [
            {"state": "A", "action": "go", "probs": {"A": 0.3, "B": 0.6}},
            {"state": "A", "action": "stay", "probs": {"A": 0.95}},
            {"state": "B", "action": "go", "probs": {"A": 0.5, "B": 0.2}},
            {"state": "B", "action": "stay", "probs": {"B": 0.98}},
        ],
        "stage_cost": {"A": {"go": 0.0, "stay": 2.0}, "B": {"go": 0.5, "stay": 1.5}},
        "terminal_cost": {"A": 1.0, "B": 0.0},
        "horizon": 3,
        "risk_bound": 0.2,
        "initial_state": "A",
    }


def random_problem(
    rng: np.random.Generator, n_states: int, n_actions: int, horizon: int, risk_bound: float | None = None, restrict: bool = False
) -> Problem:
    """Random tabular problem with sparse rows, positive fail mass and uniform costs.

    With ``restrict`` each state loses a random subset of its actions (at
    least one action stays admissible).
    """
    admissible = np.ones((n_states, n_actions), dtype=bool)
    if restrict:
        admissible = rng.random((n_states, n_actions)) < 0.7
        admissible[np.arange(n_states), rng.integers(0, n_actions, size=n_states)] = True
    kernel = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            weights = rng.random(n_states + 1) * (rng.random(n_states + 1) < 0.7)
            weights[-1] += 0.05 * rng.random()
            if weights.sum() == 0:
                weights[-1] = 1.0
            kernel[s, a] = (weights / weights.sum())[:n_states]
    return Problem(
        states=tuple(f"s{i}" for i in range(n_states)),
        actions=tuple(f"a{j}" for j in range(n_actions)),
        admissible=admissible,
        kernel=kernel,
        stage_cost=rng.random((n_states, n_actions)) * 3.0,
        terminal_cost=rng.random(n_states),
        horizon=horizon,
        risk_bound=float(rng.uniform(0.0, 0.6)) if risk_bound is None else risk_bound,
        initial_state=int(rng.integers(0, n_states)),
        name="random",
    )


def random_policy(rng: np.random.Generator, problem: Problem) -> Policy:
    rules = []
    for _ in range(problem.horizon):
        rules.append(np.array([rng.choice(problem.admissible_actions(s)) for s in range(problem.n_states)], dtype=np.int64))
    return Policy(tuple(rules))


def tiny_problems(seed: int, count: int, restrict: bool = False) -> Iterator[Problem]:
    """Seeded stream of random problems small enough for the brute-force oracle."""
    rng = np.random.default_rng(seed)
    for i in range(count):
        n_states, n_actions, horizon = TINY_SHAPES[i % len(TINY_SHAPES)]
        yield random_problem(rng, n_states, n_actions, horizon, restrict=restrict)
