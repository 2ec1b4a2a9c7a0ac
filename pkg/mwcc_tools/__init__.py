"""
MWCC Tools - Finite-horizon solvers for mission-wide chance-constrained control.

This package works with finite-horizon Markov decision processes over a safe
set with an absorbing fail state, and with one-dimensional Gaussian-affine
systems discretized onto such processes. The mission-wide constraint asks that
the whole trajectory stays safe with probability at least 1 - epsilon.

Key Features:
    - Mission-wide probability of safety by backward recursion, forward propagation and Monte Carlo
    - Affine-penalty dynamic programming and the cost/safety frontier it traces
    - Exact chance-constrained solutions on the state augmented with its functional state
    - Exhaustive Markov-policy oracle and seeded rollouts for tiny instances
    - Command-line interface with reproducible JSON reports and CSV tables

Main Modules:
    model: Problem data model, schema builder and grid discretization
    safety: MWPS routes and functional-state propagation
    penalty: Affine-penalty DP, penalty commutation check and lambda sweeps
    augmented: Belief-tree enumeration and the augmented-state DP
    oracle: Brute-force enumeration and rollout simulation
    problem_io: Problem files, reports and tables
    casestudy: Gaussian-affine case study
    cli: Command-line interface

Example:
    >>> from mwcc_tools.problem_io import load_problem, scenario_path
    >>> from mwcc_tools.augmented import solve_augmented
    >>> problem = load_problem(scenario_path("chain-v1.json"))
    >>> solve_augmented(problem, "joint").value
    0.9
"""

from . import augmented, model, penalty, safety

__all__ = ["augmented", "model", "penalty", "safety"]
