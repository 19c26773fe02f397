"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 invalid input or failed checks.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checks import run_checks
from .erlang import build_cost_table, write_cost_csv
from .experiment import DEFAULT_STATE_CAP, ExperimentSpec, make_instance, run_experiment
from .graph import load_instance, save_instance
from .heuristics import OsiaConfig, osi_policy, osia_policy, write_osia_diagnostics
from .mdp import (Model, closest_first_policy, evaluate_policy, policy_iteration,
                  write_evaluation_csv, write_policy_csv)
from .sim import simulate_replications, write_sim_csv

METHODS = ("cf", "opt", "osi", "osia")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--out", help=out_help)
    p.add_argument("--correlated", action=argparse.BooleanOptionalAction, default=None,
                   help="travel-time correlation mode (default: taken from the input)")


def _add_osia(p: argparse.ArgumentParser) -> None:
    p.add_argument("--osia-T", type=float, default=None, help="horizon of the cost approximation")
    p.add_argument("--osia-eps", type=float, default=1e-6, help="relative convergence tolerance")


def build_parser() -> Parser:
    parser = Parser(prog="firedispatch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen", help="generate a random instance file")
    p.add_argument("--d", type=int, default=6, help="grid side")
    p.add_argument("--stations", type=int, default=4)
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.6)
    p.add_argument("--sparseness", type=float, default=None,
                   help="fraction of lattice edges to remove (default: drawn from U(0.4, 1))")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p, "instance JSON path (default: stdout)")

    p = sub.add_parser("cost", help="dump both cost tables as CSV")
    p.add_argument("instance")
    p.add_argument("--out", required=True)

    p = sub.add_parser("solve", help="compute and evaluate a policy")
    p.add_argument("instance")
    p.add_argument("--method", choices=METHODS, default="opt")
    p.add_argument("--state-cap", type=int, default=DEFAULT_STATE_CAP)
    _add_common(p, "directory for policy.csv and evaluation.csv")
    _add_osia(p)

    p = sub.add_parser("simulate", help="estimate a policy's FLAR by simulation")
    p.add_argument("instance")
    p.add_argument("--method", choices=METHODS, default="cf")
    p.add_argument("--incidents", type=int, default=1_000_000)
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--state-cap", type=int, default=DEFAULT_STATE_CAP)
    _add_common(p, "CSV path for the replication rows")
    _add_osia(p)

    p = sub.add_parser("experiment", help="run a batch described by a JSON file")
    p.add_argument("spec")
    p.add_argument("--out", default=None, help="report directory (overrides the file)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--state-cap", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--osia-T", type=float, default=None)
    p.add_argument("--osia-eps", type=float, default=None)

    p = sub.add_parser("validate", help="run the invariant checks on an instance")
    p.add_argument("instance")
    p.add_argument("--state-cap", type=int, default=DEFAULT_STATE_CAP)
    _add_osia(p)
    return parser


def _load(path: str, correlated: bool | None):
    inst = load_instance(path)
    return inst if correlated is None else inst.with_correlation(correlated)


def _policy(inst, method: str, state_cap: int, cfg: OsiaConfig):
    model = Model(inst)
    if method in ("opt", "osi") and model.space.size > state_cap:
        raise UsageError(f"{model.space.size} states exceed --state-cap {state_cap} for method {method}")
    costs = build_cost_table(inst)
    cf = closest_first_policy(inst, model)
    if method == "cf":
        pol = cf
    elif method == "opt":
        pol, _ = policy_iteration(inst, costs, cf, model=model)
    elif method == "osi":
        pol = osi_policy(inst, costs, evaluate_policy(inst, costs, cf, model), cf, model)
    else:
        pol = osia_policy(inst, costs, cfg, model, cf)
    return pol, costs, model


def cmd_gen(a) -> int:
    inst = make_instance(a.d, a.stations, a.rho, a.gamma, bool(a.correlated), a.seed, a.sparseness)
    if a.out:
        save_instance(inst, a.out)
    else:
        sys.stdout.write(json.dumps(inst.to_dict(), indent=2) + "\n")
    return 0


def cmd_cost(a) -> int:
    write_cost_csv(load_instance(a.instance), a.out)
    return 0


def cmd_solve(a) -> int:
    inst = _load(a.instance, a.correlated)
    cfg = OsiaConfig(a.osia_T, a.osia_eps)
    pol, costs, model = _policy(inst, a.method, a.state_cap, cfg)
    ev = evaluate_policy(inst, costs, pol, model)
    if a.method == "opt":
        ev.iterations = len(pol.meta["g_history"])
    print(f"method={a.method} correlated={inst.correlated} g={ev.g:.12g} flar={ev.flar:.12g}")
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        write_policy_csv(inst, pol, out / "policy.csv")
        write_evaluation_csv(ev, out / "evaluation.csv")
        if a.method == "osia":
            write_osia_diagnostics(pol.meta["estimates"], out / "osia_diagnostics.csv")
    return 0


def cmd_simulate(a) -> int:
    inst = _load(a.instance, a.correlated)
    if a.incidents < 1 or a.replications < 1:
        raise UsageError("--incidents and --replications must be positive")
    pol, costs, model = _policy(inst, a.method, a.state_cap, OsiaConfig(a.osia_T, a.osia_eps))
    analytic = evaluate_policy(inst, costs, pol, model).flar
    results = simulate_replications(inst, pol, a.incidents, a.seed, a.replications, workers=a.workers)
    for r in results:
        print(f"seed={r.seed} flar_hat={r.flar_hat:.6g} +- {r.ci_halfwidth:.3g} "
              f"analytic={analytic:.6g} covered={r.covers(analytic)}")
    if a.out:
        write_sim_csv(results, a.out)
    return 0


def cmd_experiment(a) -> int:
    data = json.loads(Path(a.spec).read_text())
    overrides = {"seed": a.seed, "state_cap": a.state_cap, "workers": a.workers,
                 "osia_T": a.osia_T, "osia_epsilon": a.osia_eps, "out": a.out}
    data.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(data) - set(ExperimentSpec.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
    spec = ExperimentSpec(**data)
    rows, _ = run_experiment(spec)
    print(f"{len(rows)} rows written to {spec.out}")
    return 0


def cmd_validate(a) -> int:
    inst = load_instance(a.instance)
    checks = run_checks(inst, a.state_cap, OsiaConfig(a.osia_T, a.osia_eps))
    for c in checks:
        print(c.line())
    return 0 if all(c.ok for c in checks) else 2


COMMANDS = {"gen": cmd_gen, "cost": cmd_cost, "solve": cmd_solve, "simulate": cmd_simulate,
            "experiment": cmd_experiment, "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except UsageError as exc:
        print(f"firedispatch: error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"firedispatch: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"firedispatch: invalid input: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
