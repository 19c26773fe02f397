"""Invariant checks run against a single instance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .erlang import build_cost_table
from .graph import Instance
from .heuristics import OsiaConfig, osi_policy, osia_policy
from .mdp import Model, closest_first_policy, evaluate_policy, policy_iteration

TOL = 1e-12


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}" + (f"  ({self.detail})" if self.detail else "")


def run_checks(inst: Instance, state_cap: int = 2 ** 14, osia: OsiaConfig | None = None) -> list[Check]:
    out: list[Check] = []
    try:
        inst.validate()
        out.append(Check("instance fields", True))
    except ValueError as exc:
        return [Check("instance fields", False, str(exc))]

    unc = build_cost_table(inst, correlated=False)
    cor = build_cost_table(inst, correlated=True)
    for tag, tab in (("uncorrelated", unc), ("correlated", cor)):
        v = tab.values
        out.append(Check(f"{tag} costs in [0, 1]", bool(((v >= 0) & (v <= 1)).all())))
        out.append(Check(f"{tag} costs symmetric", bool(np.array_equal(v, v.transpose(0, 2, 1)))))
    worst = float((unc.values - cor.values).max())
    out.append(Check("correlated cost >= uncorrelated", worst <= TOL, f"worst excess {worst:.3g}"))

    model = Model(inst)
    cf = closest_first_policy(inst, model)
    evals = {}
    for corr, tab in ((False, unc), (True, cor)):
        ev = evaluate_policy(inst, tab, cf, model)
        evals[corr] = ev
        out.append(Check(f"CF FLAR in [0, 1] ({'c' if corr else 'uc'})", 0 <= ev.flar <= 1 + TOL,
                         f"FLAR {ev.flar:.6g}"))
    out.append(Check("FLAR CF correlated >= uncorrelated",
                     evals[True].g >= evals[False].g - TOL * evals[True].tau,
                     f"{evals[True].flar:.6g} vs {evals[False].flar:.6g}"))

    if model.space.size > state_cap:
        out.append(Check("exact policies", True, f"skipped, {model.space.size} states above cap"))
        return out
    for corr, tab in ((False, unc), (True, cor)):
        tag = "c" if corr else "uc"
        g_cf = evals[corr].g
        _, opt = policy_iteration(inst, tab, cf, model=model)
        osi = evaluate_policy(inst, tab, osi_policy(inst, tab, evals[corr], cf, model), model)
        approx = evaluate_policy(inst, tab, osia_policy(inst, tab, osia, model, cf), model)
        out.append(Check(f"g OPT <= g CF ({tag})", opt.g <= g_cf + TOL, f"{opt.g:.6g} vs {g_cf:.6g}"))
        out.append(Check(f"g OSI <= g CF ({tag})", osi.g <= g_cf + TOL, f"{osi.g:.6g} vs {g_cf:.6g}"))
        out.append(Check(f"g OPT <= g OSI ({tag})", opt.g <= osi.g + TOL))
        out.append(Check(f"g OPT <= g OSIA ({tag})", opt.g <= approx.g + TOL))
    return out
