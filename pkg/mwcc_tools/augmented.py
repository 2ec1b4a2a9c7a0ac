"""Exact dynamic programming on the augmented state (s_k, F_k).

From a fixed initial state the functional state F_k evolves deterministically
once a decision rule is fixed, so every reachable F_k is a node of a belief
tree rooted at the unit mass on s0. The solver enumerates that tree and runs a
backward recursion over ``(node, state)`` pairs with the exact penalty at the
horizon:

    J_N(node, s) = l_N(s) + zeta(total mass of F_N(node))

with ``zeta(x) = 0`` if ``x >= 1 - epsilon`` and ``inf`` otherwise.

Three propagation modes are available:

- ``joint``: a node branches on every decision rule over its belief support
  and picks, for the whole node, the rule minimizing the belief-weighted
  continuation. Exact; the rule count is ``|A| ** |support|``.
- ``literal``: a node branches on single actions shared by the whole support;
  each ``(node, state)`` picks its own action and moves to that action's
  child. Its internal MWPS may differ from the closed-loop one.
- ``shared``: the literal tree with the joint node-level choice, i.e. the best
  sequence of constant rules. Internal and closed-loop MWPS coincide.
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from collections.abc import Iterator
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np

from .model import BudgetExceededError, PolicyError, Problem
from .safety import FunctionalState

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
DEFAULT_RULE_BUDGET = 10**6
DEDUP_TOLERANCE = 1e-12
FEASIBILITY_SLACK = 1e-12
DISCREPANCY_TOLERANCE = 1e-9
INFEASIBLE = math.inf


class PropagationMode(Enum):
    """How a belief node branches and how its actions are chosen."""

    JOINT = "joint"
    LITERAL = "literal"
    SHARED = "shared"


def terminal_penalty(total_mass: float, epsilon: float) -> float:
    """Exact penalty: 0 when ``total_mass >= 1 - epsilon`` (with slack), else ``INFEASIBLE``."""
    return 0.0 if total_mass >= 1.0 - epsilon - FEASIBILITY_SLACK else INFEASIBLE


Rule = tuple[int, ...]


@dataclass(eq=False)
class BeliefNode:
    """A reachable functional state.

    ``support`` marks the states reachable with positive probability; it is
    tracked structurally so mass that underflows to zero keeps its actions.
    ``children`` maps each generating decision rule (action per state, -1 off
    the support) to the index of the child node at the next stage.
    """

    stage: int
    index: int
    belief: np.ndarray
    support: np.ndarray
    parent: int | None = None
    parent_rule: Rule | None = None
    children: dict[Rule, int] = field(default_factory=dict)

    @property
    def node_id(self) -> str:
        return f"{self.stage}:{self.index}"

    @property
    def total_mass(self) -> float:
        return float(self.belief.sum())

    @property
    def support_states(self) -> np.ndarray:
        return np.flatnonzero(self.support)

    def functional_state(self) -> FunctionalState:
        return FunctionalState(self.belief, self.stage)


@dataclass(frozen=True, eq=False)
class AugmentedState:
    """The pair (s_k, F_k) an augmented policy acts on."""

    state: int
    belief: FunctionalState
    stage: int


@dataclass(eq=False)
class BeliefTree:
    mode: PropagationMode
    stages: list[list[BeliefNode]]

    @property
    def root(self) -> BeliefNode:
        return self.stages[0][0]

    def node_counts(self) -> list[int]:
        return [len(nodes) for nodes in self.stages]

    def edges(self) -> Iterator[tuple[BeliefNode, Rule, BeliefNode]]:
        for k, nodes in enumerate(self.stages[:-1]):
            for node in nodes:
                for rule, child in node.children.items():
                    yield node, rule, self.stages[k + 1][child]


def _rule_candidates(problem: Problem, node: BeliefNode, mode: PropagationMode, budget: int) -> Iterator[Rule]:
    support = node.support_states
    if mode is PropagationMode.JOINT:
        choices = [problem.admissible_actions(int(s)) for s in support]
        count = math.prod(len(c) for c in choices)
        if count > budget:
            raise BudgetExceededError(
                f"belief node {node.node_id} has {len(support)} supported states and needs {count} decision-rule candidates; budget is {budget}"
            )
        for combo in itertools.product(*choices):
            rule = [-1] * problem.n_states
            for s, a in zip(support, combo):
                rule[s] = a
            yield tuple(rule)
    else:
        shared = problem.admissible[support].all(axis=0)
        for a in np.flatnonzero(shared):
            yield tuple(int(a) if node.support[s] else -1 for s in range(problem.n_states))


def _advance(problem: Problem, node: BeliefNode, rule: Rule) -> tuple[np.ndarray, np.ndarray]:
    support = node.support_states
    if len(support) == 0:
        return np.zeros(problem.n_states), np.zeros(problem.n_states, dtype=bool)
    rows = problem.kernel[support, np.asarray(rule)[support]]
    return node.belief[support] @ rows, (rows > 0).any(axis=0)


def enumerate_reachable_beliefs(problem: Problem, mode: PropagationMode | str = PropagationMode.JOINT, budget: int = DEFAULT_RULE_BUDGET) -> BeliefTree:
    """Enumerate the belief tree reachable from s0, stage by stage.

    Sibling children that are numerically identical (same support, beliefs
    within ``DEDUP_TOLERANCE``) are merged, so every node keeps one parent.

    Raises:
        BudgetExceededError: a joint-mode node needs more rule candidates than ``budget``.
    """
    mode = PropagationMode(mode)
    root_belief = np.zeros(problem.n_states)
    root_belief[problem.initial_state] = 1.0
    stages = [[BeliefNode(0, 0, root_belief, root_belief > 0)]]

    for k in range(problem.horizon):
        next_nodes: list[BeliefNode] = []
        for node in stages[k]:
            index: dict[tuple[bytes, bytes], int] = {}
            for rule in _rule_candidates(problem, node, mode, budget):
                belief, support = _advance(problem, node, rule)
                key = (support.tobytes(), np.round(belief / DEDUP_TOLERANCE).tobytes())
                child = index.get(key)
                if child is None or np.max(np.abs(next_nodes[child].belief - belief), initial=0.0) > DEDUP_TOLERANCE:
                    child = len(next_nodes)
                    index[key] = child
                    next_nodes.append(BeliefNode(k + 1, child, belief, support, node.index, rule))
                node.children[rule] = child
        stages.append(next_nodes)
        logger.debug("stage %d: %d belief nodes (%s mode)", k + 1, len(next_nodes), mode.value)
    return BeliefTree(mode, stages)


@dataclass(eq=False)
class AugmentedPolicy:
    """Per-stage map from ``(node index, state)`` to action, with the node each pair moves to."""

    tree: BeliefTree
    actions: list[dict[tuple[int, int], int]]
    successors: list[dict[tuple[int, int], int]]

    def action_at(self, stage: int, node: int, state: int) -> int:
        try:
            return self.actions[stage][(node, state)]
        except KeyError:
            raise PolicyError(f"augmented policy is undefined at stage {stage}, node {stage}:{node}, state index {state}") from None

    def states(self, stage: int) -> Iterator[AugmentedState]:
        for node, s in sorted(self.actions[stage]):
            yield AugmentedState(s, self.tree.stages[stage][node].functional_state(), stage)

    def action_tables(self) -> list[np.ndarray]:
        return self._tables(self.actions)

    def successor_tables(self) -> list[np.ndarray]:
        return self._tables(self.successors)

    def _tables(self, maps: list[dict[tuple[int, int], int]]) -> list[np.ndarray]:
        n_states = len(self.tree.root.belief)
        tables = []
        for k, mapping in enumerate(maps):
            table = np.full((len(self.tree.stages[k]), n_states), -1, dtype=np.int64)
            for (node, s), value in mapping.items():
                table[node, s] = value
            tables.append(table)
        return tables

    def records(self, problem: Problem) -> list[dict[str, Any]]:
        rows = []
        for k in range(len(self.actions)):
            for node, s in sorted(self.actions[k]):
                rows.append(
                    {
                        "stage": k,
                        "node_id": f"{k}:{node}",
                        "state": problem.states[s],
                        "action": problem.actions[self.actions[k][(node, s)]],
                        "next_node_id": f"{k + 1}:{self.successors[k][(node, s)]}",
                    }
                )
        return rows


@dataclass(frozen=True)
class AugmentedEvaluation:
    """Closed-loop expected cost and MWPS of an augmented policy."""

    expected_cost: float
    mwps: float
    leaf_mass: dict[int, float]


@dataclass(eq=False)
class SolveReport:
    """Outcome of ``solve_augmented``.

    ``value`` is ``INFEASIBLE`` when no policy meets the mission-wide
    constraint from s0; policy and MWPS fields are then ``None``.
    """

    mode: PropagationMode
    risk_bound: float
    value: float
    policy: AugmentedPolicy | None
    internal_mwps: float | None
    closed_loop_mwps: float | None
    expected_cost: float | None
    nodes_per_stage: list[int]
    n_states: int
    elapsed_seconds: float

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.value)

    @property
    def verdict(self) -> str:
        return "feasible" if self.feasible else "infeasible"

    @property
    def mwps_discrepancy(self) -> bool:
        if self.internal_mwps is None or self.closed_loop_mwps is None:
            return False
        return abs(self.internal_mwps - self.closed_loop_mwps) > DISCREPANCY_TOLERANCE

    def to_dict(self, problem: Problem, include_timing: bool = False) -> dict[str, Any]:
        """JSON-ready report; timing is left out unless asked for so reports stay reproducible."""
        report: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "problem": problem.name,
            "mode": self.mode.value,
            "risk_bound": self.risk_bound,
            "verdict": self.verdict,
            "value": self.value if self.feasible else None,
            "expected_cost": self.expected_cost,
            "internal_mwps": self.internal_mwps,
            "closed_loop_mwps": self.closed_loop_mwps,
            "mwps_discrepancy": self.mwps_discrepancy,
            "nodes_per_stage": self.nodes_per_stage,
            "n_states": self.n_states,
            "policy": self.policy.records(problem) if self.policy is not None else [],
        }
        if include_timing:
            report["elapsed_seconds"] = self.elapsed_seconds
        return report


def _expect(rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``rows @ values`` where any positive weight on an infinite value gives ``INFEASIBLE``."""
    finite = np.isfinite(values)
    out = rows @ np.where(finite, values, 0.0)
    if not finite.all():
        out[(rows[:, ~finite] > 0).any(axis=1)] = INFEASIBLE
    return out


def _backup_node(
    problem: Problem, node: BeliefNode, next_values: list[np.ndarray], next_feasible: list[bool], actions: dict[tuple[int, int], int], successors: dict[tuple[int, int], int]
) -> tuple[np.ndarray, bool]:
    support = node.support_states
    values = np.full(problem.n_states, INFEASIBLE)
    best: tuple[float, Rule, int, np.ndarray] | None = None
    for rule, child in node.children.items():
        if not next_feasible[child]:
            continue
        acts = np.asarray(rule)[support]
        continuation = problem.stage_cost[support, acts] + _expect(problem.kernel[support, acts], next_values[child])
        objective = float(node.belief[support] @ continuation)
        if best is None or objective < best[0]:
            best = (objective, rule, child, continuation)
    if best is None:
        return values, False
    _, rule, child, continuation = best
    values[support] = continuation
    for s in support:
        actions[(node.index, int(s))] = rule[s]
        successors[(node.index, int(s))] = child
    return values, True


def _backup_literal(
    problem: Problem, node: BeliefNode, next_values: list[np.ndarray], next_feasible: list[bool], actions: dict[tuple[int, int], int], successors: dict[tuple[int, int], int]
) -> tuple[np.ndarray, bool]:
    values = np.full(problem.n_states, INFEASIBLE)
    candidates = [(rule, child) for rule, child in node.children.items() if next_feasible[child]]
    if not candidates:
        return values, False
    for s in node.support_states:
        best: tuple[float, int, int] | None = None
        for rule, child in candidates:
            a = rule[s]
            v = problem.stage_cost[s, a] + _expect(problem.kernel[s, a][np.newaxis, :], next_values[child])[0]
            if best is None or v < best[0]:
                best = (float(v), a, child)
        assert best is not None
        values[s] = best[0]
        actions[(node.index, int(s))] = best[1]
        successors[(node.index, int(s))] = best[2]
    return values, True


def _reachable_policy(problem: Problem, tree: BeliefTree, actions: list[dict[tuple[int, int], int]], successors: list[dict[tuple[int, int], int]]) -> AugmentedPolicy:
    """Restrict the per-node argmin tables to pairs reachable from (root, s0)."""
    kept_actions: list[dict[tuple[int, int], int]] = [{} for _ in range(problem.horizon)]
    kept_successors: list[dict[tuple[int, int], int]] = [{} for _ in range(problem.horizon)]
    frontier = {(0, problem.initial_state)}
    for k in range(problem.horizon):
        reached = set()
        for key in sorted(frontier):
            a, child = actions[k][key], successors[k][key]
            kept_actions[k][key] = a
            kept_successors[k][key] = child
            reached.update((child, int(s)) for s in np.flatnonzero(problem.kernel[key[1], a] > 0))
        frontier = reached
    return AugmentedPolicy(tree, kept_actions, kept_successors)


def solve_augmented(problem: Problem, mode: PropagationMode | str = PropagationMode.JOINT, budget: int = DEFAULT_RULE_BUDGET) -> SolveReport:
    """Solve the mission-wide chance-constrained problem on the augmented state.

    Returns a report whose ``value`` is J_0(root, s0), or ``INFEASIBLE`` with
    verdict ``"infeasible"`` when no policy meets the constraint.

    Raises:
        BudgetExceededError: the joint-mode belief tree does not fit ``budget``.
    """
    started = time.perf_counter()
    mode = PropagationMode(mode)
    tree = enumerate_reachable_beliefs(problem, mode, budget)
    horizon = problem.horizon

    values: list[list[np.ndarray]] = [[] for _ in range(horizon + 1)]
    feasible: list[list[bool]] = [[] for _ in range(horizon + 1)]
    for node in tree.stages[horizon]:
        penalty = terminal_penalty(node.total_mass, problem.risk_bound)
        leaf = np.full(problem.n_states, INFEASIBLE)
        leaf[node.support] = problem.terminal_cost[node.support] + penalty
        values[horizon].append(leaf)
        feasible[horizon].append(math.isfinite(penalty))

    actions: list[dict[tuple[int, int], int]] = [{} for _ in range(horizon)]
    successors: list[dict[tuple[int, int], int]] = [{} for _ in range(horizon)]
    backup = _backup_literal if mode is PropagationMode.LITERAL else _backup_node
    for k in reversed(range(horizon)):
        for node in tree.stages[k]:
            node_values, ok = backup(problem, node, values[k + 1], feasible[k + 1], actions[k], successors[k])
            values[k].append(node_values)
            feasible[k].append(ok)

    value = float(values[0][0][problem.initial_state]) if feasible[0][0] else INFEASIBLE
    report = SolveReport(
        mode=mode,
        risk_bound=problem.risk_bound,
        value=value,
        policy=None,
        internal_mwps=None,
        closed_loop_mwps=None,
        expected_cost=None,
        nodes_per_stage=tree.node_counts(),
        n_states=problem.n_states,
        elapsed_seconds=0.0,
    )
    if report.feasible:
        policy = _reachable_policy(problem, tree, actions, successors)
        evaluation = evaluate_augmented_policy(problem, policy)
        report.policy = policy
        report.closed_loop_mwps = evaluation.mwps
        report.expected_cost = evaluation.expected_cost
        report.internal_mwps = _internal_mwps(tree, evaluation)
    report.elapsed_seconds = time.perf_counter() - started
    logger.info("augmented DP (%s): verdict %s, value %s, nodes %s", mode.value, report.verdict, value, report.nodes_per_stage)
    return report


def _internal_mwps(tree: BeliefTree, evaluation: AugmentedEvaluation) -> float:
    """MWPS read off the leaf beliefs, weighted by the surviving mass routed to each leaf."""
    surviving = math.fsum(evaluation.leaf_mass.values())
    if surviving <= 0.0:
        return 0.0
    leaves = tree.stages[-1]
    return math.fsum(mass / surviving * leaves[leaf].total_mass for leaf, mass in sorted(evaluation.leaf_mass.items()))


def evaluate_augmented_policy(problem: Problem, policy: AugmentedPolicy) -> AugmentedEvaluation:
    """Exact closed-loop expected cost and MWPS by a forward sweep over ``(node, state)`` mass.

    Raises:
        PolicyError: a pair carrying positive mass has no action.
    """
    current: dict[int, np.ndarray] = {0: np.zeros(problem.n_states)}
    current[0][problem.initial_state] = 1.0
    cost_terms: list[float] = []
    for k in range(problem.horizon):
        following: dict[int, np.ndarray] = {}
        for node in sorted(current):
            mass = current[node]
            support = np.flatnonzero(mass > 0)
            if len(support) == 0:
                continue
            acts = np.array([policy.action_at(k, node, int(s)) for s in support], dtype=np.int64)
            children = np.array([policy.successors[k][(node, int(s))] for s in support], dtype=np.int64)
            cost_terms.append(float(mass[support] @ problem.stage_cost[support, acts]))
            for child in (int(c) for c in np.unique(children)):
                sel = children == child
                flow = mass[support[sel]] @ problem.kernel[support[sel], acts[sel]]
                following[child] = following[child] + flow if child in following else flow
        current = following
    cost_terms.extend(float(mass @ problem.terminal_cost) for _, mass in sorted(current.items()))
    leaf_mass = {node: float(mass.sum()) for node, mass in sorted(current.items())}
    return AugmentedEvaluation(math.fsum(cost_terms), math.fsum(leaf_mass.values()), leaf_mass)


def augmented_safety_table(problem: Problem, policy: AugmentedPolicy) -> list[dict[int, np.ndarray]]:
    """Backward safety values ``V_k(node, s)`` of an augmented policy on its reachable pairs.

    ``table[0][0][s0]`` equals the closed-loop MWPS of ``evaluate_augmented_policy``.
    """
    horizon = problem.horizon
    table: list[dict[int, np.ndarray]] = [{} for _ in range(horizon + 1)]
    for node in policy.tree.stages[horizon]:
        table[horizon][node.index] = np.ones(problem.n_states)
    for k in reversed(range(horizon)):
        for (node, s), a in sorted(policy.actions[k].items()):
            child = policy.successors[k][(node, s)]
            row = table[k].setdefault(node, np.zeros(problem.n_states))
            row[s] = float(problem.kernel[s, a] @ table[k + 1].get(child, np.zeros(problem.n_states)))
    return table
