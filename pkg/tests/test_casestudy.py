"""Tests for the casestudy module."""

import numpy as np
import pytest

from mwcc_tools.augmented import PropagationMode, solve_augmented
from mwcc_tools.casestudy import (
    DEFAULT_GRID,
    _fill_nearest,
    case_from_document,
    nominal_spec,
    risk_active_spec,
    run_case_study,
    simulate_continuous,
    variant_document,
)
from mwcc_tools.model import GridSpec, PolicyError, Problem, SchemaError, discretize

from .factories import chain_v1_data


class TestScenarios:
    """Test cases for the packaged case-study scenarios."""

    def test_nominal_variant(self) -> None:
        """Test that the packaged scenario is the documented system on a 401 x 21 grid."""
        cspec, grid = case_from_document(variant_document("nominal"))

        assert cspec == nominal_spec()
        assert grid == DEFAULT_GRID == GridSpec(401, 21)

    def test_risk_active_variant(self) -> None:
        """Test the risk-active scenario: noise 0.05 started at 0.9."""
        cspec, grid = case_from_document(variant_document("risk-active"))

        assert cspec == risk_active_spec()
        assert cspec.noise_std == 0.05
        assert cspec.initial_state == 0.9
        assert grid == DEFAULT_GRID

    def test_unknown_variant(self) -> None:
        """Test that an unknown variant name is rejected."""
        with pytest.raises(ValueError, match="unknown case-study variant"):
            variant_document("windy")


class TestCaseFromDocument:
    """Test cases for case-study overrides."""

    def test_overrides(self) -> None:
        """Test replacing the risk bound and the grid."""
        cspec, grid = case_from_document(variant_document("nominal"), risk_bound=0.05, n_state_cells=51)

        assert cspec.risk_bound == 0.05
        assert grid == GridSpec(51, 21)

    def test_default_grid(self) -> None:
        """Test that a document without a grid uses the 401 x 21 grid."""
        data = {"continuous": variant_document("nominal")["continuous"]}

        _, grid = case_from_document(data)

        assert grid == DEFAULT_GRID

    def test_tabular_document(self) -> None:
        """Test that a tabular document is refused."""
        with pytest.raises(SchemaError, match="continuous"):
            case_from_document(chain_v1_data())


class TestFillNearest:
    """Test cases for filling cells the grid model never reaches."""

    def test_nearest_defined_cell(self) -> None:
        """Test that undefined entries copy the closest defined cell, lower index on ties."""
        table = np.array([[-1, 3, -1, -1, 7], [-1, -1, -1, -1, -1]])

        filled = _fill_nearest(table)

        assert filled.tolist() == [[3, 3, 3, 7, 7], [-1, -1, -1, -1, -1]]
        assert table[0, 0] == -1


class TestSimulateContinuous:
    """Test cases for rollouts on the continuous system."""

    def test_needs_discretized_problem(self, chain: Problem) -> None:
        """Test that tabular problems cannot be rolled out on a continuous system."""
        policy = solve_augmented(chain).policy
        assert policy is not None

        with pytest.raises(PolicyError, match="discretized"):
            simulate_continuous(chain, policy, 100, seed=1)

    def test_deterministic(self) -> None:
        """Test that rollouts are fixed by the seed and independent of workers."""
        problem = discretize(nominal_spec(), GridSpec(21, 3))
        policy = solve_augmented(problem, PropagationMode.SHARED).policy
        assert policy is not None

        first = simulate_continuous(problem, policy, 20_000, seed=4)
        second = simulate_continuous(problem, policy, 20_000, seed=4, workers=3)

        assert first == second
        assert first.safety_fraction == pytest.approx(1.0, abs=1e-3)


class TestRunCaseStudy:
    """Test cases for the case-study pipeline on coarse grids."""

    def test_nominal_coarse_grid(self) -> None:
        """Test that the constraint is inactive and the policy is safe on a coarse grid."""
        report = run_case_study(nominal_spec(), GridSpec(41, 5), rollouts=10_000, seed=3, variant="nominal")

        assert report.solve.feasible
        assert report.grid_mwps is not None
        assert report.grid_mwps >= 0.9
        assert report.grid_mwps == pytest.approx(report.solve.closed_loop_mwps, abs=1e-12)
        assert not report.constraint_active
        assert report.continuous is not None
        assert report.continuous.n == 10_000

    def test_risk_active_coarse_grid(self) -> None:
        """Test that the unconstrained optimum violates the bound in the risk-active variant."""
        report = run_case_study(risk_active_spec(), GridSpec(81, 5), rollouts=0, variant="risk-active")

        assert report.constraint_active
        assert report.unconstrained_mwps < 0.9
        assert report.solve.feasible
        assert report.grid_mwps is not None
        assert 0.9 - 1e-9 <= report.grid_mwps < 1.0
        assert report.continuous is None
        assert report.monte_carlo_agrees is None

    def test_report_dict(self) -> None:
        """Test the case-study report keys."""
        report = run_case_study(nominal_spec(), GridSpec(21, 3), rollouts=1_000, seed=5, variant="nominal").to_dict()

        assert report["schema_version"] == "1"
        assert report["variant"] == "nominal"
        assert report["grid"] == {"n_state_cells": 21, "n_actions": 3}
        assert report["noise_std"] == 0.01
        assert report["solve"]["mode"] == "shared"
        assert report["monte_carlo"]["n"] == 1_000
        assert isinstance(report["monte_carlo_agrees"], bool)

    def test_infeasible_bound(self) -> None:
        """Test that a zero risk bound in the risk-active variant has no solution."""
        report = run_case_study(risk_active_spec(risk_bound=0.0), GridSpec(41, 3), rollouts=1_000)

        assert not report.solve.feasible
        assert report.grid_mwps is None
        assert report.continuous is None


@pytest.mark.slow
class TestFullGrid:
    """Test cases for the case study on the 401 x 21 grid."""

    def test_nominal(self) -> None:
        """Test that the grid MWPS meets the bound and Monte Carlo agrees with it."""
        report = run_case_study(nominal_spec(), DEFAULT_GRID, rollouts=100_000, variant="nominal")

        assert report.solve.feasible
        assert report.grid_mwps is not None
        assert report.grid_mwps >= 0.9
        assert report.monte_carlo_agrees

    def test_risk_active(self) -> None:
        """Test that the constraint binds and the grid MWPS lies in [0.9, 1)."""
        report = run_case_study(risk_active_spec(), DEFAULT_GRID, rollouts=0, variant="risk-active")

        assert report.constraint_active
        assert report.grid_mwps is not None
        assert 0.9 - 1e-9 <= report.grid_mwps < 1.0
