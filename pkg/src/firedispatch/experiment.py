"""Batch comparison of dispatch policies on random grid instances.

Seeds: graph ``g`` of an experiment with master seed ``m`` uses the
instance seed ``SeedSequence(m).spawn(graph_count)[g]`` (first 64-bit word
of its state). From an instance seed ``s`` the graph is built from
``SeedSequence(s).spawn(1)[0]``, which also draws the sparseness from
U(0.4, 1); stations and arrival rates come from ``s`` itself. Any single
row can therefore be rebuilt with ``make_instance(d, I, rho, gamma, corr, s)``.
"""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .erlang import build_cost_table
from .graph import Instance, generate_grid_graph, generate_instance
from .heuristics import OsiaConfig, osi_policy, osia_policy
from .mdp import Model, closest_first_policy, evaluate_policy, policy_iteration

POLICIES = ("CF", "OPT", "OSI", "OSIA")
MODES = {False: "uc", True: "c"}
DEFAULT_STATE_CAP = 2 ** 14
SPARSENESS_RANGE = (0.4, 1.0)


def _seed_word(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def graph_seeds(master: int, count: int) -> list[int]:
    return [_seed_word(c) for c in np.random.SeedSequence(master).spawn(count)]


def make_instance(d: int, station_count: int, rho: float, gamma: float, correlated: bool,
                  seed: int, sparseness: float | None = None) -> Instance:
    graph_seed = _seed_word(np.random.SeedSequence(seed).spawn(1)[0])
    if sparseness is None:
        sparseness = float(np.random.default_rng(graph_seed).uniform(*SPARSENESS_RANGE))
    graph = generate_grid_graph(d, sparseness, graph_seed)
    return generate_instance(graph, station_count, rho, gamma, correlated, seed)


@dataclass
class ExperimentSpec:
    d: int = 6
    I: int = 4
    rho: list[float] = field(default_factory=lambda: [0.1])
    gamma: float = 0.6
    graph_count: int = 30
    correlated: list[bool] = field(default_factory=lambda: [False, True])
    policies: list[str] = field(default_factory=lambda: list(POLICIES))
    seed: int = 0
    osia_T: float | None = None
    osia_epsilon: float = 1e-6
    osia_max_iterations: int = 10000
    state_cap: int = DEFAULT_STATE_CAP
    out: str = "results"
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.rho, (int, float)):
            self.rho = [float(self.rho)]
        if isinstance(self.correlated, bool):
            self.correlated = [self.correlated]
        self.policies = [p.upper() for p in self.policies]
        self.validate()

    def validate(self) -> None:
        if self.graph_count < 1:
            raise ValueError("graph_count: must be at least 1")
        if self.d < 2:
            raise ValueError("d: must be at least 2")
        if not 1 <= self.I <= self.d * self.d:
            raise ValueError("I: must lie in [1, d*d]")
        if not self.rho or min(self.rho) <= 0:
            raise ValueError("rho: need at least one positive load")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma: must lie in (0, 1]")
        unknown = set(self.policies) - set(POLICIES)
        if unknown:
            raise ValueError(f"policies: unknown {sorted(unknown)}")
        if "CF" not in self.policies:
            raise ValueError("policies: CF is the baseline and must be included")
        if not self.correlated:
            raise ValueError("correlated: list at least one mode")
        OsiaConfig(self.osia_T, self.osia_epsilon, self.osia_max_iterations)

    @property
    def osia(self) -> OsiaConfig:
        return OsiaConfig(self.osia_T, self.osia_epsilon, self.osia_max_iterations)

    @classmethod
    def from_json(cls, path) -> ExperimentSpec:
        data = json.loads(Path(path).read_text())
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown experiment fields: {sorted(extra)}")
        return cls(**data)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


def _pct(num: float, den: float) -> float:
    return 100.0 * num / den if den > 0 else math.nan


def run_graph(spec: ExperimentSpec, index: int, seed: int, rho: float) -> dict:
    """Every requested policy in every requested mode on one instance."""
    inst = make_instance(spec.d, spec.I, rho, spec.gamma, False, seed)
    model = Model(inst)
    exact = model.space.size <= spec.state_cap
    row: dict = {"graph": index, "seed": seed, "rho": rho, "edges": len(inst.graph.edges),
                 "max_phases": inst.max_phases, "states": model.space.size, "exact": int(exact)}
    opt_policies = {}
    tables = {}
    for corr in spec.correlated:
        tag = MODES[corr]
        costs = tables[corr] = build_cost_table(inst, corr)
        g = {}
        clock = time.perf_counter()
        cf = closest_first_policy(inst, model)
        cf_eval = evaluate_policy(inst, costs, cf, model)
        g["cf"] = cf_eval.g
        row[f"{tag}_time_cf"] = time.perf_counter() - clock
        if exact and "OPT" in spec.policies:
            clock = time.perf_counter()
            opt, ev = policy_iteration(inst, costs, cf, model=model)
            row[f"{tag}_time_opt"] = time.perf_counter() - clock
            g["opt"] = ev.g
            opt_policies[corr] = opt
        if exact and "OSI" in spec.policies:
            clock = time.perf_counter()
            pol = osi_policy(inst, costs, cf_eval, cf, model)
            row[f"{tag}_time_osi"] = time.perf_counter() - clock
            g["osi"] = evaluate_policy(inst, costs, pol, model).g
        if "OSIA" in spec.policies:
            clock = time.perf_counter()
            pol = osia_policy(inst, costs, spec.osia, model, cf)
            row[f"{tag}_time_osia"] = time.perf_counter() - clock
            row[f"{tag}_osia_damped"] = sum(e.damped for e in pol.meta["estimates"])
            g["osia"] = evaluate_policy(inst, costs, pol, model).g
        for name, value in g.items():
            row[f"{tag}_g_{name}"] = value
            row[f"{tag}_flar_{name}"] = value / inst.total_rate
        for name in ("opt", "osi", "osia"):
            if name in g:
                row[f"{tag}_delta_{name}"] = _pct(g["cf"] - g[name], g["cf"])
        if "opt" in g:
            for name in ("osi", "osia"):
                if name in g:
                    row[f"{tag}_gap_{name}"] = _pct(g[name] - g["opt"], g["opt"])
    if False in opt_policies and True in opt_policies:
        neglect = evaluate_policy(inst, tables[True], opt_policies[False], model).g
        best = row["c_g_opt"]
        row["neglect_penalty"] = _pct(neglect - best, best)
    return row


def row_columns(spec: ExperimentSpec) -> list[str]:
    cols = ["graph", "seed", "rho", "edges", "max_phases", "states", "exact"]
    names = [p.lower() for p in spec.policies]
    for corr in spec.correlated:
        tag = MODES[corr]
        cols += [f"{tag}_g_{n}" for n in names] + [f"{tag}_flar_{n}" for n in names]
        cols += [f"{tag}_delta_{n}" for n in names if n != "cf"]
        if "opt" in names:
            cols += [f"{tag}_gap_{n}" for n in names if n in ("osi", "osia")]
        cols += [f"{tag}_time_{n}" for n in names]
        if "osia" in names:
            cols.append(f"{tag}_osia_damped")
    if set(spec.correlated) == {False, True} and "OPT" in spec.policies:
        cols.append("neglect_penalty")
    return cols


SUMMARY_SKIP = {"graph", "seed", "rho"}
STATS = (("min", np.min), ("mean", np.mean), ("max", np.max))


def summarize(rows: list[dict], columns: list[str]) -> list[dict]:
    """Min, mean and max of every metric, three aggregate rows per load."""
    out = []
    for rho in sorted({r["rho"] for r in rows}):
        group = [r for r in rows if r["rho"] == rho]
        stats = {name: {"label": name, "rho": rho, "graph": len(group)} for name, _ in STATS}
        for col in columns:
            if col in SUMMARY_SKIP:
                continue
            vals = np.array([r[col] for r in group if r.get(col) is not None], dtype=float)
            vals = vals[~np.isnan(vals)]
            for name, fn in STATS:
                stats[name][col] = float(fn(vals)) if len(vals) else None
        out.extend(stats.values())
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return "" if math.isnan(value) else f"{value:.12g}"
    return str(value)


def write_csv(rows: list[dict], columns: list[str], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in rows:
            writer.writerow([_fmt(r.get(c)) for c in columns])


def run_experiment(spec: ExperimentSpec, out: str | Path | None = None) -> tuple[list[dict], list[dict]]:
    """Run the batch and write the reports to ``out`` (default ``spec.out``).

    ``rows.csv`` has one row per (graph, load). ``summary.csv`` repeats
    those rows with ``label=graph`` and appends ``min``, ``mean`` and
    ``max`` rows per load, where the ``graph`` column holds the number of
    graphs aggregated. Empty cells mark metrics that were not computed.
    """
    seeds = graph_seeds(spec.seed, spec.graph_count)
    jobs = [(spec, g, seeds[g], rho) for rho in spec.rho for g in range(spec.graph_count)]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            rows = list(pool.map(run_graph, *zip(*jobs)))
    else:
        rows = [run_graph(*job) for job in jobs]
    columns = row_columns(spec)
    aggregates = summarize(rows, columns)
    out_dir = Path(out if out is not None else spec.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(rows, columns, out_dir / "rows.csv")
    summary_cols = ["label"] + columns
    labelled = [{"label": "graph", **r} for r in rows]
    write_csv(labelled + aggregates, summary_cols, out_dir / "summary.csv")
    return rows, aggregates
