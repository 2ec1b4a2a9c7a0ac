"""Seeded closed-loop rollouts on tabular problems.

Rollouts are simulated in fixed-size blocks. Block ``b`` draws from its own
generator seeded with ``(seed, b)``, so a run is fully determined by
``(seed, n)`` and does not depend on how many workers share the blocks.
Streams are keyed by block rather than by rollout index: rollout ``i`` is
reproduced only together with its block, ``i // BLOCK_SIZE``.

A controller is given as two per-stage tables indexed ``[node, state]``: the
action to apply and the controller node to move to. A Markov policy is the
one-node special case; augmented policies route through their belief tree.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .model import PolicyError, Problem

logger = logging.getLogger(__name__)

BLOCK_SIZE = 8192
DEFAULT_SEED = 2024


class Controller(Protocol):
    def action_tables(self) -> list[np.ndarray]: ...

    def successor_tables(self) -> list[np.ndarray]: ...


@dataclass(frozen=True)
class BlockResult:
    safe: int
    cost_sum: float
    cost_sq_sum: float
    count: int


@dataclass(frozen=True)
class RolloutSummary:
    """Sample statistics of ``n`` closed-loop rollouts."""

    n: int
    seed: int
    safety_fraction: float
    safety_stderr: float
    mean_cost: float
    cost_stderr: float

    def covers(self, value: float, sigmas: float = 3.0) -> bool:
        """Whether ``value`` lies inside the ``sigmas``-wide interval around the safety fraction."""
        return abs(self.safety_fraction - value) <= sigmas * self.safety_stderr + 1e-12

    def to_dict(self) -> dict[str, float | int]:
        return {
            "n": self.n,
            "seed": self.seed,
            "safety_fraction": self.safety_fraction,
            "safety_stderr": self.safety_stderr,
            "mean_cost": self.mean_cost,
            "cost_stderr": self.cost_stderr,
        }


def block_sizes(n: int) -> list[int]:
    full, rest = divmod(n, BLOCK_SIZE)
    return [BLOCK_SIZE] * full + ([rest] if rest else [])


def run_blocks(n: int, seed: int, simulate_block: Callable[[np.random.Generator, int], BlockResult], workers: int = 1) -> RolloutSummary:
    """Run ``simulate_block`` over the fixed block partition of ``n`` rollouts and pool the results."""
    if n < 1:
        raise ValueError(f"rollout count must be at least 1, got {n}")
    sizes = block_sizes(n)

    def job(b: int) -> BlockResult:
        return simulate_block(np.random.default_rng([seed, b]), sizes[b])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(len(sizes))))
    else:
        results = [job(b) for b in range(len(sizes))]

    safe = sum(r.safe for r in results)
    cost_sum = math.fsum(r.cost_sum for r in results)
    cost_sq_sum = math.fsum(r.cost_sq_sum for r in results)
    p = safe / n
    mean = cost_sum / n
    if n > 1:
        var = max(cost_sq_sum - n * mean * mean, 0.0) / (n - 1)
        cost_stderr = math.sqrt(var / n)
    else:
        cost_stderr = 0.0
    return RolloutSummary(
        n=n,
        seed=seed,
        safety_fraction=p,
        safety_stderr=math.sqrt(p * (1.0 - p) / n),
        mean_cost=mean,
        cost_stderr=cost_stderr,
    )


def _sample_next(rng: np.random.Generator, rows: np.ndarray) -> np.ndarray:
    """Draw one successor per row; index ``rows.shape[1]`` means fail."""
    u = rng.random(rows.shape[0])
    cumulative = np.cumsum(rows, axis=1)
    return np.sum(cumulative <= u[:, np.newaxis], axis=1)


def simulate_controller(problem: Problem, controller: Controller, n: int, seed: int, workers: int = 1) -> RolloutSummary:
    """Simulate ``n`` rollouts of a tabular controller from the initial state."""
    actions = controller.action_tables()
    successors = controller.successor_tables()
    if len(actions) != problem.horizon:
        raise PolicyError(f"controller has {len(actions)} stages, horizon is {problem.horizon}")

    def simulate_block(rng: np.random.Generator, size: int) -> BlockResult:
        state = np.full(size, problem.initial_state, dtype=np.int64)
        node = np.zeros(size, dtype=np.int64)
        alive = np.ones(size, dtype=bool)
        cost = np.zeros(size)
        for k in range(problem.horizon):
            idx = np.flatnonzero(alive)
            s, q = state[idx], node[idx]
            a = actions[k][q, s]
            if (a < 0).any():
                raise PolicyError(f"controller has no action at stage {k} for a reachable state")
            cost[idx] += problem.stage_cost[s, a]
            nxt = _sample_next(rng, problem.kernel[s, a])
            node[idx] = successors[k][q, s]
            failed = nxt == problem.n_states
            alive[idx[failed]] = False
            state[idx[~failed]] = nxt[~failed]
        cost[alive] += problem.terminal_cost[state[alive]]
        return BlockResult(int(alive.sum()), float(cost.sum()), float(np.dot(cost, cost)), size)

    summary = run_blocks(n, seed, simulate_block, workers=workers)
    logger.debug("simulated %d rollouts: safety %.6f +- %.6f", n, summary.safety_fraction, summary.safety_stderr)
    return summary
