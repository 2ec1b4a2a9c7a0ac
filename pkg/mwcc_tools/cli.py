"""Command line interface for mwcc-tools.

This module provides the command-line interface for mwcc-tools, running the
solvers on problem files and writing reproducible reports.

Commands:
- eval-mwps: MWPS of a Markov policy by backward recursion, forward propagation and Monte Carlo
- solve-penalty: optimal policy of an affine-penalized problem, or the minimum mission risk
- sweep-lambda: affine-penalty frontier over a list of prices
- solve-augmented: chance-constrained solve on the augmented state
- oracle: exhaustive Markov-policy enumeration for tiny instances
- simulate: seeded closed-loop rollouts
- casestudy: discretize, solve and cross-check the Gaussian-affine case study

Every command prints its report as JSON on stdout, or with ``--out`` writes
``report.json``, CSV tables and ``metadata.json`` (version, timestamp and
timing) into a directory. The exit status is 0 on success, 2 when the verdict
is infeasible and 1 on any error; errors are printed to stderr as one JSON
line carrying a machine-readable code.

Example usage:
    $ mwcc-tools solve-augmented chain-v1.json --mode joint
    $ mwcc-tools casestudy --variant risk-active --out results/
"""

import json
import logging
import sys
import time
from collections.abc import Callable, Iterable, Iterator, Mapping
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, NoReturn

import click
from dunamai import Style, get_version

from mwcc_tools.augmented import DEFAULT_RULE_BUDGET, FEASIBILITY_SLACK, SCHEMA_VERSION, PropagationMode, solve_augmented
from mwcc_tools.casestudy import DEFAULT_MODE, VARIANT_SCENARIOS, case_from_document, run_case_study, variant_document
from mwcc_tools.model import MwccError, Policy, Problem
from mwcc_tools.oracle import DEFAULT_ENUMERATION_BUDGET, brute_force_constrained, policy_count, simulate_rollouts
from mwcc_tools.penalty import PenaltySpec, policy_cost, solve_affine_penalty, solve_min_risk, sweep_lambda
from mwcc_tools.problem_io import dumps_json, load_document, load_policy_file, override_grid, problem_from_data, write_csv, write_json
from mwcc_tools.rollouts import DEFAULT_SEED
from mwcc_tools.safety import monte_carlo_mwps, mwps_backward, mwps_forward

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
ROUTE_TOLERANCE = 1e-12
MODE_CHOICES = [mode.value for mode in PropagationMode]

Table = tuple[list[str], Iterable[Mapping[str, Any]]]


class _UsageErrorsExitOne:
    """Usage errors exit with status 1; status 2 is reserved for infeasible verdicts."""

    def parse_args(self, ctx: click.Context, args: list[str]) -> list[str]:
        try:
            return super().parse_args(ctx, args)  # type: ignore[misc]
        except click.UsageError as e:
            e.exit_code = EXIT_ERROR
            raise


class MwccCommand(_UsageErrorsExitOne, click.Command):
    pass


class MwccGroup(_UsageErrorsExitOne, click.Group):
    command_class = MwccCommand

    def resolve_command(self, ctx: click.Context, args: list[str]) -> tuple[str | None, click.Command | None, list[str]]:
        try:
            return super().resolve_command(ctx, args)
        except click.UsageError as e:
            e.exit_code = EXIT_ERROR
            raise


def tool_version() -> str:
    """Installed package version, or ``0.0.0-dev`` when it cannot be determined."""
    try:
        return get_version("mwcc-tools").serialize(style=Style.Pep440)
    except Exception:
        return "0.0.0-dev"


def _fail(code: str, message: str) -> NoReturn:
    click.echo(json.dumps({"error": code, "message": message}), err=True)
    sys.exit(EXIT_ERROR)


@contextmanager
def _errors_to_stderr() -> Iterator[None]:
    try:
        yield
    except FileNotFoundError as e:
        _fail("not_found", str(e))
    except MwccError as e:
        _fail(e.code, str(e))
    except ValueError as e:
        _fail("validation", str(e))
    except Exception as e:
        _fail("error", str(e))


def _emit(command: str, out: Path | None, report: dict[str, Any], tables: Mapping[str, Table], started: float) -> None:
    """Print the report, or write report, tables and run metadata into ``out``."""
    if out is None:
        click.echo(dumps_json(report), nl=False)
        return
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "report.json", report)
    for name, (fieldnames, records) in tables.items():
        write_csv(out / name, records, fieldnames)
    metadata = {
        "tool": "mwcc-tools",
        "version": tool_version(),
        "command": command,
        "created_at": datetime.now(timezone.utc).isoformat(),
        "elapsed_seconds": time.perf_counter() - started,
    }
    write_json(out / "metadata.json", metadata)
    click.echo(f"Report written to: {out / 'report.json'}", err=True)


def _load(problem_file: Path, epsilon: float | None, grid_cells: int | None, n_actions: int | None) -> Problem:
    data = load_document(problem_file)
    problem = problem_from_data(data, override_grid(data, grid_cells, n_actions))
    return problem if epsilon is None else problem.with_risk_bound(epsilon)


def _markov_policy(problem: Problem, policy_file: Path | None, lam: float) -> Policy:
    if policy_file is not None:
        return load_policy_file(policy_file, problem)
    policy, _ = solve_affine_penalty(problem, lam)
    return policy


def _policy_records(problem: Problem, policy: Policy) -> list[dict[str, Any]]:
    return [{"stage": k, "state": s, "action": a} for k, rule in enumerate(policy.describe(problem)) for s, a in rule.items()]


def _problem_options(f: Callable[..., Any]) -> Callable[..., Any]:
    f = click.option(
        "--actions",
        "n_actions",
        type=click.IntRange(min=2),
        default=None,
        help="Number of grid actions for continuous problems (default: from the problem file)",
    )(f)
    f = click.option(
        "--grid-cells",
        type=click.IntRange(min=2),
        default=None,
        help="Number of grid state cells for continuous problems (default: from the problem file)",
    )(f)
    f = click.option(
        "--epsilon",
        "-e",
        type=float,
        default=None,
        help="Risk bound, replacing the one in the problem file (default: from the problem file)",
    )(f)
    f = click.argument("problem_file", type=click.Path(path_type=Path))(f)
    return f


def _out_option(f: Callable[..., Any]) -> Callable[..., Any]:
    return click.option(
        "--out",
        "-o",
        type=click.Path(file_okay=False, path_type=Path),
        default=None,
        help="Directory for report.json, CSV tables and metadata.json; created if absent (default: print the report)",
    )(f)


def _rollout_options(f: Callable[..., Any]) -> Callable[..., Any]:
    f = click.option("--workers", "-w", type=click.IntRange(min=1), default=1, help="Threads simulating rollout blocks (default: 1)")(f)
    f = click.option("--seed", "-s", type=int, default=DEFAULT_SEED, help=f"Random seed (default: {DEFAULT_SEED})")(f)
    return f


def _policy_options(f: Callable[..., Any]) -> Callable[..., Any]:
    f = click.option(
        "--lambda",
        "-l",
        "lam",
        type=float,
        default=0.0,
        help="Without --policy, use the optimal policy for the affine penalty lambda*(x - 1) (default: 0)",
    )(f)
    f = click.option(
        "--policy",
        "-p",
        "policy_file",
        type=click.Path(path_type=Path),
        default=None,
        help="Markov policy file: a list of per-stage {state: action} mappings",
    )(f)
    return f


@click.version_option(prog_name="mwcc-tools")
@click.group(cls=MwccGroup)
@click.option("--verbose", "-v", count=True, help="Log solver progress to stderr; repeat for debug output")
def cli(verbose: int) -> None:
    """MWCC Tools - Finite-horizon solvers for mission-wide chance-constrained control."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("mwcc_tools").setLevel(level)


@cli.command(name="eval-mwps")
@_problem_options
@_policy_options
@click.option("--rollouts", "-n", type=click.IntRange(min=0), default=10_000, help="Monte Carlo rollouts, 0 to skip (default: 10000)")
@_rollout_options
@_out_option
def eval_mwps(
    problem_file: Path,
    epsilon: float | None,
    grid_cells: int | None,
    n_actions: int | None,
    policy_file: Path | None,
    lam: float,
    rollouts: int,
    seed: int,
    workers: int,
    out: Path | None,
) -> None:
    """Evaluate the MWPS of a Markov policy by three independent routes."""
    started = time.perf_counter()
    with _errors_to_stderr():
        problem = _load(problem_file, epsilon, grid_cells, n_actions)
        policy = _markov_policy(problem, policy_file, lam)
        backward = mwps_backward(problem, policy)
        forward = mwps_forward(problem, policy)
        report: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "problem": problem.name,
            "policy_id": policy.digest(),
            "policy": policy.describe(problem),
            "expected_cost": policy_cost(problem, policy),
            "backward_mwps": backward.mwps,
            "forward_mwps": forward,
            "routes_agree": abs(backward.mwps - forward) <= ROUTE_TOLERANCE,
            "monte_carlo": None,
        }
        if rollouts > 0:
            estimate, stderr = monte_carlo_mwps(problem, policy, rollouts, seed, workers=workers)
            report["monte_carlo"] = {
                "n": rollouts,
                "seed": seed,
                "estimate": estimate,
                "stderr": stderr,
                "covers_exact": abs(estimate - backward.mwps) <= 3.0 * stderr + 1e-9,
            }
        _emit("eval-mwps", out, report, {"safety_values.csv": (["stage", "state", "value"], backward.records(problem))}, started)


@cli.command(name="solve-penalty")
@_problem_options
@click.option("--lambda", "-l", "lam", type=float, default=0.0, help="Price lambda of the affine penalty lambda*x + delta (default: 0)")
@click.option("--delta", "-d", type=float, default=None, help="Offset delta of the affine penalty (default: -lambda)")
@click.option("--risk-only", is_flag=True, default=False, help="Ignore costs and minimize the mission risk 1 - MWPS")
@_out_option
def solve_penalty(
    problem_file: Path,
    epsilon: float | None,
    grid_cells: int | None,
    n_actions: int | None,
    lam: float,
    delta: float | None,
    risk_only: bool,
    out: Path | None,
) -> None:
    """Solve the affine-penalized problem by state-space dynamic programming."""
    started = time.perf_counter()
    with _errors_to_stderr():
        problem = _load(problem_file, epsilon, grid_cells, n_actions)
        if risk_only:
            policy, value, table = solve_min_risk(problem)
            penalty: dict[str, Any] = {"kind": "min_risk"}
        else:
            policy, table = solve_affine_penalty(problem, lam, delta)
            penalty = PenaltySpec.affine(lam, delta).to_dict()
            value = table.value
        report = {
            "schema_version": SCHEMA_VERSION,
            "problem": problem.name,
            "penalty": penalty,
            "value": value,
            "expected_cost": policy_cost(problem, policy),
            "mwps": mwps_backward(problem, policy).mwps,
            "policy_id": policy.digest(),
            "policy": policy.describe(problem),
        }
        tables = {
            "values.csv": (["stage", "state", "value"], table.records(problem)),
            "policy.csv": (["stage", "state", "action"], _policy_records(problem, policy)),
        }
        _emit("solve-penalty", out, report, tables, started)


@cli.command(name="sweep-lambda")
@_problem_options
@click.option("--lambda", "-l", "lambdas", type=float, multiple=True, required=True, help="Penalty price; repeat for each point of the frontier")
@click.option("--delta", "-d", type=float, default=None, help="Offset delta shared by all prices (default: -lambda for each price)")
@_out_option
def sweep_lambda_command(
    problem_file: Path,
    epsilon: float | None,
    grid_cells: int | None,
    n_actions: int | None,
    lambdas: tuple[float, ...],
    delta: float | None,
    out: Path | None,
) -> None:
    """Trace the cost/MWPS frontier of affine-penalty optima."""
    started = time.perf_counter()
    with _errors_to_stderr():
        problem = _load(problem_file, epsilon, grid_cells, n_actions)
        threshold = 1.0 - problem.risk_bound - FEASIBILITY_SLACK
        records = [{**row.to_record(), "feasible": row.mwps >= threshold} for row in sweep_lambda(problem, lambdas, delta)]
        report = {"schema_version": SCHEMA_VERSION, "problem": problem.name, "risk_bound": problem.risk_bound, "rows": records}
        tables = {"sweep.csv": (["lambda", "delta", "cost", "mwps", "policy_id", "feasible"], records)}
        _emit("sweep-lambda", out, report, tables, started)


@cli.command(name="solve-augmented")
@_problem_options
@click.option("--mode", "-m", type=click.Choice(MODE_CHOICES), default=PropagationMode.JOINT.value, help="Belief propagation mode (default: joint)")
@click.option("--budget", "-b", type=click.IntRange(min=1), default=DEFAULT_RULE_BUDGET, help=f"Decision-rule candidates allowed per belief node (default: {DEFAULT_RULE_BUDGET})")
@_out_option
def solve_augmented_command(
    problem_file: Path,
    epsilon: float | None,
    grid_cells: int | None,
    n_actions: int | None,
    mode: str,
    budget: int,
    out: Path | None,
) -> None:
    """Solve the chance-constrained problem exactly on the augmented state."""
    started = time.perf_counter()
    with _errors_to_stderr():
        problem = _load(problem_file, epsilon, grid_cells, n_actions)
        solve = solve_augmented(problem, mode, budget)
        records = solve.policy.records(problem) if solve.policy is not None else []
        tables = {"policy.csv": (["stage", "node_id", "state", "action", "next_node_id"], records)}
        _emit("solve-augmented", out, solve.to_dict(problem), tables, started)
    if not solve.feasible:
        sys.exit(EXIT_INFEASIBLE)


@cli.command()
@_problem_options
@click.option("--lambda", "-l", "lambdas", type=float, multiple=True, help="Also report the affine-penalty optimum at this price; repeatable")
@click.option("--budget", "-b", type=click.IntRange(min=1), default=DEFAULT_ENUMERATION_BUDGET, help=f"Maximum number of policies and trajectories (default: {DEFAULT_ENUMERATION_BUDGET})")
@_out_option
def oracle(
    problem_file: Path,
    epsilon: float | None,
    grid_cells: int | None,
    n_actions: int | None,
    lambdas: tuple[float, ...],
    budget: int,
    out: Path | None,
) -> None:
    """Enumerate every Markov policy of a tiny instance and report the exact optima."""
    started = time.perf_counter()
    with _errors_to_stderr():
        problem = _load(problem_file, epsilon, grid_cells, n_actions)
        result = brute_force_constrained(problem, [PenaltySpec.affine(lam) for lam in lambdas], budget)
        constrained = result.constrained
        report = {
            "schema_version": SCHEMA_VERSION,
            "problem": problem.name,
            "risk_bound": problem.risk_bound,
            "verdict": result.verdict,
            "n_policies": policy_count(problem),
            "constrained": constrained.to_record(problem) if constrained is not None else None,
            "penalized": [{"penalty": penalty.to_dict(), "objective": objective, **row.to_record(problem)} for penalty, row, objective in result.penalized],
        }
        tables = {"oracle.csv": (["policy", "cost", "mwps", "feasible"], (row.to_record(problem) for row in result.rows))}
        _emit("oracle", out, report, tables, started)
    if not result.feasible:
        sys.exit(EXIT_INFEASIBLE)


@cli.command()
@_problem_options
@_policy_options
@click.option("--augmented", "-a", type=click.Choice(MODE_CHOICES), default=None, help="Simulate the augmented solution in this mode instead of a Markov policy")
@click.option("--budget", "-b", type=click.IntRange(min=1), default=DEFAULT_RULE_BUDGET, help=f"Decision-rule candidates allowed per belief node with --augmented (default: {DEFAULT_RULE_BUDGET})")
@click.option("--rollouts", "-n", type=click.IntRange(min=1), default=100_000, help="Number of rollouts (default: 100000)")
@_rollout_options
@_out_option
def simulate(
    problem_file: Path,
    epsilon: float | None,
    grid_cells: int | None,
    n_actions: int | None,
    policy_file: Path | None,
    lam: float,
    augmented: str | None,
    budget: int,
    rollouts: int,
    seed: int,
    workers: int,
    out: Path | None,
) -> None:
    """Run seeded closed-loop rollouts and compare them with the exact statistics."""
    started = time.perf_counter()
    infeasible = False
    with _errors_to_stderr():
        problem = _load(problem_file, epsilon, grid_cells, n_actions)
        report: dict[str, Any] = {"schema_version": SCHEMA_VERSION, "problem": problem.name}
        if augmented is not None:
            solve = solve_augmented(problem, augmented, budget)
            report.update(controller=f"augmented:{augmented}", verdict=solve.verdict, exact_mwps=solve.closed_loop_mwps, exact_cost=solve.expected_cost)
            controller: Any = solve.policy
            infeasible = not solve.feasible
        else:
            policy = _markov_policy(problem, policy_file, lam)
            report.update(controller="markov", policy_id=policy.digest(), exact_mwps=mwps_backward(problem, policy).mwps, exact_cost=policy_cost(problem, policy))
            controller = policy
        if controller is not None:
            summary = simulate_rollouts(problem, controller, rollouts, seed, workers=workers)
            report.update(rollouts=summary.to_dict(), covers_exact=summary.covers(report["exact_mwps"]))
        _emit("simulate", out, report, {}, started)
    if infeasible:
        sys.exit(EXIT_INFEASIBLE)


@cli.command()
@click.argument("problem_file", type=click.Path(path_type=Path), required=False)
@click.option("--variant", type=click.Choice(sorted(VARIANT_SCENARIOS)), default="nominal", help="Packaged scenario used when no problem file is given (default: nominal)")
@click.option("--risk", "--epsilon", "risk", type=float, default=None, help="Risk bound (default: from the scenario, 0.1)")
@click.option("--grid-cells", type=click.IntRange(min=2), default=None, help="Number of state cells (default: from the scenario, 401)")
@click.option("--actions", "n_actions", type=click.IntRange(min=2), default=None, help="Number of grid actions (default: from the scenario, 21)")
@click.option("--mode", "-m", type=click.Choice(MODE_CHOICES), default=DEFAULT_MODE.value, help=f"Belief propagation mode (default: {DEFAULT_MODE.value})")
@click.option("--budget", "-b", type=click.IntRange(min=1), default=DEFAULT_RULE_BUDGET, help=f"Decision-rule candidates allowed per belief node (default: {DEFAULT_RULE_BUDGET})")
@click.option("--rollouts", "-n", type=click.IntRange(min=0), default=100_000, help="Monte Carlo rollouts on the continuous system, 0 to skip (default: 100000)")
@_rollout_options
@_out_option
def casestudy(
    problem_file: Path | None,
    variant: str,
    risk: float | None,
    grid_cells: int | None,
    n_actions: int | None,
    mode: str,
    budget: int,
    rollouts: int,
    seed: int,
    workers: int,
    out: Path | None,
) -> None:
    """Run the Gaussian-affine case study: discretize, solve, evaluate, cross-check."""
    started = time.perf_counter()
    with _errors_to_stderr():
        data = load_document(problem_file) if problem_file is not None else variant_document(variant)
        cspec, grid = case_from_document(data, risk, grid_cells, n_actions)
        name = variant if problem_file is None else str(data.get("name", problem_file.stem))
        result = run_case_study(cspec, grid, mode, rollouts=rollouts, seed=seed, budget=budget, workers=workers, variant=name)
        geometry = result.problem.discretization
        assert geometry is not None
        records = []
        if result.solve.policy is not None:
            for record in result.solve.policy.records(result.problem):
                cell = result.problem.state_index(record["state"])
                action = result.problem.action_index(record["action"])
                records.append({**record, "cell_midpoint": float(geometry.midpoints[cell]), "action_value": float(geometry.action_values[action])})
        tables = {"policy.csv": (["stage", "node_id", "state", "action", "next_node_id", "cell_midpoint", "action_value"], records)}
        _emit("casestudy", out, result.to_dict(), tables, started)
    if not result.solve.feasible:
        sys.exit(EXIT_INFEASIBLE)


if __name__ == "__main__":
    cli()
