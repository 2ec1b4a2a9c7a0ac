"""One-dimensional Gaussian-affine case study.

The system is ``s+ = s + a + w`` on the safe set [-1, 1] with
``a in [-0.1, 0.1]``, ``w ~ N(0, 0.01**2)``, two stages, running cost
``s**2 + a**2``, terminal cost ``s**2`` and risk bound 0.1. With that noise level
the mission-wide constraint never binds, so a risk-active variant with
``w ~ N(0, 0.05**2)`` started at 0.9 is shipped as well: there the cheapest
policy drives the state out of the safe set (failed missions stop paying
cost) and only the constraint keeps it inside.

The pipeline discretizes the system, solves the augmented DP, evaluates the
policy in closed loop on the grid, checks that the unconstrained optimum
violates the constraint, and cross-checks the grid MWPS with rollouts of the
continuous system.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Mapping
from dataclasses import dataclass, replace
from typing import Any

import numpy as np

from .augmented import DEFAULT_RULE_BUDGET, SCHEMA_VERSION, AugmentedPolicy, PropagationMode, SolveReport, augmented_safety_table, solve_augmented
from .model import ContinuousSpec, GridSpec, PolicyError, Problem, SchemaError, discretize
from .penalty import solve_affine_penalty
from .problem_io import continuous_spec_from_data, grid_spec_from_data, load_document, override_grid, scenario_path
from .rollouts import DEFAULT_SEED, BlockResult, RolloutSummary, run_blocks
from .safety import mwps_backward

logger = logging.getLogger(__name__)

DEFAULT_GRID = GridSpec(n_state_cells=401, n_actions=21)
DEFAULT_MODE = PropagationMode.SHARED
VARIANT_SCENARIOS = {"nominal": "casestudy.json", "risk-active": "casestudy-risk-active.json"}


def nominal_spec(risk_bound: float = 0.1, initial_state: float = 0.0) -> ContinuousSpec:
    return ContinuousSpec(
        noise_std=0.01,
        action_interval=(-0.1, 0.1),
        safe_interval=(-1.0, 1.0),
        horizon=2,
        risk_bound=risk_bound,
        initial_state=initial_state,
    )


def risk_active_spec(risk_bound: float = 0.1) -> ContinuousSpec:
    return ContinuousSpec(
        noise_std=0.05,
        action_interval=(-0.1, 0.1),
        safe_interval=(-1.0, 1.0),
        horizon=2,
        risk_bound=risk_bound,
        initial_state=0.9,
    )


def variant_document(variant: str) -> dict[str, Any]:
    """Parsed scenario file shipped for a case-study variant."""
    try:
        name = VARIANT_SCENARIOS[variant]
    except KeyError:
        raise ValueError(f"unknown case-study variant '{variant}', expected one of {sorted(VARIANT_SCENARIOS)}") from None
    return load_document(scenario_path(name))


def case_from_document(
    data: Mapping[str, Any], risk_bound: float | None = None, n_state_cells: int | None = None, n_actions: int | None = None
) -> tuple[ContinuousSpec, GridSpec]:
    """Continuous system and grid of a case-study document, with optional overrides."""
    if "continuous" not in data:
        raise SchemaError("a case study needs a problem with a 'continuous' block")
    cspec = continuous_spec_from_data(data["continuous"])
    if risk_bound is not None:
        cspec = replace(cspec, risk_bound=risk_bound)
    grid = override_grid(data, n_state_cells, n_actions)
    if grid is None:
        grid = grid_spec_from_data(data["grid"]) if "grid" in data else DEFAULT_GRID
    return cspec, grid


@dataclass(eq=False)
class CaseStudyReport:
    variant: str
    problem: Problem
    solve: SolveReport
    grid_mwps: float | None
    unconstrained_mwps: float
    continuous: RolloutSummary | None
    elapsed_seconds: float

    @property
    def constraint_active(self) -> bool:
        return self.unconstrained_mwps < 1.0 - self.problem.risk_bound

    @property
    def monte_carlo_agrees(self) -> bool | None:
        if self.continuous is None or self.grid_mwps is None:
            return None
        return self.continuous.covers(self.grid_mwps)

    def to_dict(self) -> dict[str, Any]:
        geometry = self.problem.discretization
        assert geometry is not None
        return {
            "schema_version": SCHEMA_VERSION,
            "variant": self.variant,
            "grid": {"n_state_cells": geometry.grid.n_state_cells, "n_actions": geometry.grid.n_actions},
            "noise_std": geometry.continuous.noise_std,
            "initial_state": geometry.continuous.initial_state,
            "solve": self.solve.to_dict(self.problem),
            "grid_mwps": self.grid_mwps,
            "unconstrained_mwps": self.unconstrained_mwps,
            "constraint_active": self.constraint_active,
            "monte_carlo": self.continuous.to_dict() if self.continuous is not None else None,
            "monte_carlo_agrees": self.monte_carlo_agrees,
        }


def _fill_nearest(table: np.ndarray) -> np.ndarray:
    """Copy of a ``[node, cell]`` table where undefined cells take the value of the nearest defined cell."""
    filled = table.copy()
    cells = np.arange(table.shape[1])
    for row in filled:
        defined = np.flatnonzero(row >= 0)
        if len(defined) == 0 or len(defined) == len(row):
            continue
        nearest = defined[np.abs(cells[:, np.newaxis] - defined[np.newaxis, :]).argmin(axis=1)]
        row[:] = row[nearest]
    return filled


def simulate_continuous(problem: Problem, policy: AugmentedPolicy, n: int, seed: int, workers: int = 1) -> RolloutSummary:
    """Roll the augmented policy out on the continuous system behind a discretized problem.

    The state evolves on the real line; actions and belief-node moves are read
    from the grid cell containing the current state, and safety is checked
    against the continuous safe interval. A cell the grid model never reaches
    borrows the entry of the nearest cell that it does reach.
    """
    geometry = problem.discretization
    if geometry is None:
        raise PolicyError("continuous rollouts need a discretized problem")
    cspec = geometry.continuous
    lo, hi = cspec.safe_interval
    actions = [_fill_nearest(t) for t in policy.action_tables()]
    successors = [_fill_nearest(t) for t in policy.successor_tables()]

    def simulate_block(rng: np.random.Generator, size: int) -> BlockResult:
        s = np.full(size, float(cspec.initial_state))
        node = np.zeros(size, dtype=np.int64)
        alive = np.ones(size, dtype=bool)
        cost = np.zeros(size)
        for k in range(problem.horizon):
            idx = np.flatnonzero(alive)
            cell = geometry.cell_of(s[idx])
            a_value = geometry.action_values[actions[k][node[idx], cell]]
            cost[idx] += cspec.stage_cost(s[idx], a_value)
            noise = rng.normal(0.0, cspec.noise_std, size=len(idx))
            node[idx] = successors[k][node[idx], cell]
            s[idx] = cspec.mean_next(s[idx], a_value) + noise
            alive[idx] = (s[idx] >= lo) & (s[idx] <= hi)
        cost[alive] += cspec.terminal_cost(s[alive])
        return BlockResult(int(alive.sum()), float(cost.sum()), float(np.dot(cost, cost)), size)

    return run_blocks(n, seed, simulate_block, workers=workers)


def run_case_study(
    cspec: ContinuousSpec,
    grid: GridSpec = DEFAULT_GRID,
    mode: PropagationMode | str = DEFAULT_MODE,
    rollouts: int = 100_000,
    seed: int = DEFAULT_SEED,
    budget: int = DEFAULT_RULE_BUDGET,
    workers: int = 1,
    variant: str = "custom",
) -> CaseStudyReport:
    """Discretize, solve, evaluate and cross-check one case-study configuration."""
    started = time.perf_counter()
    problem = discretize(cspec, grid)
    solve = solve_augmented(problem, mode, budget)

    unconstrained, _ = solve_affine_penalty(problem, 0.0, 0.0)
    unconstrained_mwps = mwps_backward(problem, unconstrained).mwps

    grid_mwps = None
    continuous = None
    if solve.feasible and solve.policy is not None:
        table = augmented_safety_table(problem, solve.policy)
        grid_mwps = float(table[0][0][problem.initial_state])
        if rollouts > 0:
            continuous = simulate_continuous(problem, solve.policy, rollouts, seed, workers=workers)

    report = CaseStudyReport(variant, problem, solve, grid_mwps, unconstrained_mwps, continuous, time.perf_counter() - started)
    logger.info(
        "case study %s: verdict %s, grid MWPS %s, unconstrained MWPS %.6f, %.1fs",
        variant,
        solve.verdict,
        grid_mwps,
        unconstrained_mwps,
        report.elapsed_seconds,
    )
    return report
