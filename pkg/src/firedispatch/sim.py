"""Discrete-event simulation of the dispatch system under a fixed policy.

The state trajectory is simulated as a jump chain (arrival or truck
return at each event). Response times do not influence the dynamics, so
they are sampled afterwards, grouped by (dispatch pair, location), from
per-edge exponential travel times. In correlated mode the two trucks
share the draw on every edge their routes have in common.
"""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .graph import Instance
from .mdp import Policy, StateSpace

WARMUP_FRACTION = 0.01
_CHUNK = 100_000


@dataclass
class SimResult:
    incidents: int
    late: int
    seed: int

    @property
    def flar_hat(self) -> float:
        return self.late / self.incidents if self.incidents else 0.0

    @property
    def ci_halfwidth(self) -> float:
        p = self.flar_hat
        return 1.959963984540054 * math.sqrt(p * (1 - p) / self.incidents) if self.incidents else 0.0

    def covers(self, value: float) -> bool:
        return abs(self.flar_hat - value) <= self.ci_halfwidth

    def row(self) -> list:
        return [self.seed, self.incidents, self.late, f"{self.flar_hat:.12g}", f"{self.ci_halfwidth:.12g}"]


SIM_HEADER = ["seed", "incidents", "late", "flar_hat", "ci_halfwidth"]


def write_sim_csv(results: list[SimResult], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SIM_HEADER)
        for r in results:
            writer.writerow(r.row())


def _trajectory(inst: Instance, pol: Policy, incident_budget: int, rng: np.random.Generator):
    """Dispatch pair and location for every incident, in arrival order."""
    space = StateSpace(inst.capacities)
    lam = np.asarray(inst.lambdas)
    total = lam.sum()
    locations = rng.choice(inst.node_count, size=incident_budget, p=lam / total)
    loc_list = locations.tolist()
    S = space.size
    n_st = inst.station_count
    strides = [0] + space.strides.tolist()
    next_state = (np.arange(S)[:, None] - np.take(strides, pol.actions[..., 0])
                  - np.take(strides, pol.actions[..., 1])).tolist()
    busy = (space.capacities[None, :] - space.states)
    busy_total = busy.sum(axis=1).tolist()
    # for a return event: cumulative busy counts per station
    busy_cum = np.cumsum(busy, axis=1).tolist()
    station_stride = space.strides.tolist()
    sent = [[[i - 1 for i in pair if i] for pair in row] for row in pol.actions.tolist()]
    mu = inst.mu
    dispatched = [0] * n_st
    returned = [0] * n_st
    states = np.empty(incident_budget, dtype=np.int64)
    s = space.reference
    n = 0
    while n < incident_budget:
        block = rng.random(4096).tolist()
        picks = rng.random(4096).tolist()
        for u, v in zip(block, picks):
            b = busy_total[s]
            if u * (total + mu * b) < total:
                states[n] = s
                j = loc_list[n]
                for k in sent[s][j]:
                    dispatched[k] += 1
                s = next_state[s][j]
                n += 1
                if n == incident_budget:
                    break
            else:
                target = v * b
                cum = busy_cum[s]
                k = 0
                while cum[k] <= target:
                    k += 1
                returned[k] += 1
                s += station_stride[k]
    for k in range(n_st):
        if dispatched[k] - returned[k] != int(space.capacities[k] - space.states[s][k]):
            raise AssertionError(f"busy-truck count out of balance at station {k}")
    pairs = np.sort(pol.actions[states, locations], axis=-1)
    return pairs, locations


def _truck_times(inst: Instance, pair: tuple[int, int], j: int, n: int, correlated: bool,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Travel times of both trucks for ``n`` incidents at ``j``."""
    i1, i2 = pair
    routes = [inst.paths[i - 1][j].edge_list if i else None for i in (i1, i2)]
    if correlated and i1 and i2:
        union = sorted(set(routes[0]) | set(routes[1]))
        col = {e: c for c, e in enumerate(union)}
        draws = rng.standard_exponential((n, len(union)))
        return tuple(draws[:, [col[e] for e in r]].sum(axis=1) for r in routes)
    out = []
    for r in routes:
        phases = inst.outside_phases if r is None else len(r)
        out.append(rng.standard_exponential((n, phases)).sum(axis=1))
    return tuple(out)


def simulate(inst: Instance, pol: Policy, incident_budget: int, seed: int,
             correlated: bool | None = None) -> SimResult:
    """Estimate the fraction of late arrivals of ``pol`` by simulation.

    The first ``WARMUP_FRACTION`` of incidents only drives the state and is
    not counted.
    """
    if incident_budget < 1:
        raise ValueError("incident_budget must be at least 1")
    if correlated is None:
        correlated = inst.correlated
    rng = np.random.default_rng(seed)
    space = StateSpace(inst.capacities)
    if pol.actions.shape[:2] != (space.size, inst.node_count):
        raise ValueError("policy does not cover every state and location")
    pairs, locations = _trajectory(inst, pol, incident_budget, rng)
    start = int(incident_budget * WARMUP_FRACTION)
    if start >= incident_budget:
        start = 0
    pairs, locations = pairs[start:], locations[start:]
    groups = Counter(zip(pairs[:, 0].tolist(), pairs[:, 1].tolist(), locations.tolist()))
    late = 0
    for (i1, i2, j) in sorted(groups):
        remaining = groups[(i1, i2, j)]
        while remaining:
            n = min(remaining, _CHUNK)
            t1, t2 = _truck_times(inst, (i1, i2), j, n, correlated, rng)
            late += int(np.count_nonzero(np.minimum(t1, t2) > inst.t_star))
            remaining -= n
    return SimResult(incidents=len(locations), late=late, seed=int(seed))


def replication_seeds(seed: int, count: int) -> list[int]:
    """Independent 64-bit seeds for ``count`` replications from one master seed."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def simulate_replications(inst: Instance, pol: Policy, incident_budget: int, seed: int,
                          count: int, correlated: bool | None = None, workers: int = 1) -> list[SimResult]:
    seeds = replication_seeds(seed, count)
    if workers <= 1:
        return [simulate(inst, pol, incident_budget, s, correlated) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(workers) as pool:
        futures = [pool.submit(simulate, inst, pol, incident_budget, s, correlated) for s in seeds]
        return [f.result() for f in futures]
