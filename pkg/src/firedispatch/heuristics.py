"""One-step improvement of closest-first, exact (OSI) and approximate (OSIA).

OSIA replaces the relative costs of closest-first by a queueing estimate of
the cost incurred over a horizon ``T``: every truck is treated as its own
M/M/1/1 station, busy probabilities and per-station request rates are
iterated to a fixed point, and the expected penalty over the horizon is
assembled from them. Multi-truck stations are handled by treating each
truck as a separate station at the same node.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .erlang import CostTable
from .graph import Instance
from .mdp import Evaluation, Model, Policy, closest_first_policy, greedy_policy

log = logging.getLogger(__name__)

DAMPING_AFTER = 1000


class ConvergenceError(RuntimeError):
    pass


def osi_policy(inst: Instance, costs: CostTable, cf_eval: Evaluation,
               cf_policy: Policy | None = None, model: Model | None = None) -> Policy:
    """Greedy step on the exact closest-first relative costs."""
    model = model or Model(inst)
    cf_policy = cf_policy or closest_first_policy(inst, model)
    return greedy_policy(inst, costs, cf_eval.h, cf_policy, "OSI", model)


def busy_fraction(rho: float) -> float:
    """Blocking probability of an M/M/1/1 queue with offered load ``rho``."""
    return rho / (1.0 + rho)


def mm11_relative_costs(D: float, mu: float) -> tuple[float, float]:
    """Relative rejection costs of an M/M/1/1 station starting busy (h0) or idle (h1).

    Solves the two Bellman equations of the rejection-cost chain together
    with the normalisation that the stationary mean of ``h`` is zero.
    """
    if not (D > 0 and mu > 0):
        raise ValueError(f"rates must be positive, got D={D}, mu={mu}")
    rho = D / mu
    blocking = busy_fraction(rho)
    # h1 = h0 - B and (h0 + rho * h1) / (1 + rho) = 0
    h0 = rho * blocking / (1.0 + rho)
    return h0, h0 - blocking


@dataclass
class OsiaConfig:
    T: float | None = None
    epsilon: float = 1e-6
    max_iterations: int = 10000

    def horizon(self, mu: float) -> float:
        return self.T if self.T is not None else 10.0 / mu

    def __post_init__(self):
        if self.T is not None and not self.T > 0:
            raise ValueError("T must be positive")
        if not 0 < self.epsilon <= 0.1:
            raise ValueError("epsilon must lie in (0, 0.1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")


@dataclass
class OsiaIterate:
    """Fixed-point state; ``p[0]`` and ``D[0]`` belong to the outside region."""
    D_pair: np.ndarray
    D: np.ndarray
    p: np.ndarray


@dataclass
class OsiaEstimate:
    value: float
    iterations: int
    converged: bool
    damped: bool
    iterate: OsiaIterate


@dataclass
class OsiaModel:
    """Truck-level view of an instance used by the cost approximation.

    Trucks are numbered 1..K, truck 0 is the outside region. ``order[j]``
    lists trucks by closest-first rank for location ``j``.
    """
    inst: Instance
    costs: CostTable
    truck_station: np.ndarray = field(init=False)
    order: np.ndarray = field(init=False)
    pair_cost: np.ndarray = field(init=False)

    def __post_init__(self):
        inst = self.inst
        station = np.repeat(np.arange(1, inst.station_count + 1), inst.capacities)
        self.truck_station = np.concatenate([[0], station])
        K = len(station)
        phases = inst.phases
        trucks = np.arange(1, K + 1)
        # stable sort on hop count keeps station index and copy order for ties
        key = phases[station - 1, :].T  # (J, K)
        self.order = trucks[np.argsort(key, axis=1, kind="stable")]
        ts = self.truck_station
        self.pair_cost = self.costs.values[:, ts[:, None], ts[None, :]]  # (J, K+1, K+1)
        self.lambdas = np.asarray(inst.lambdas)

    @property
    def truck_count(self) -> int:
        return len(self.truck_station) - 1

    def idle_trucks(self, f) -> np.ndarray:
        """Split station idle counts into per-truck flags (first copies idle)."""
        flags = [0]
        for k, cap in enumerate(self.inst.capacities):
            flags.extend([1] * int(f[k]) + [0] * (cap - int(f[k])))
        return np.array(flags)

    def pair_probabilities(self, p: np.ndarray) -> np.ndarray:
        """Probability that an incident at ``j`` requests each truck pair, (J, K+1, K+1)."""
        J = self.inst.node_count
        K = self.truck_count
        prob = np.zeros((J, K + 1, K + 1))
        ranked = p[self.order]  # busy probabilities in rank order, (J, K)
        rows = np.arange(J)
        prefix = np.ones((J, K + 1))
        prefix[:, 1:] = np.cumprod(ranked, axis=1)
        suffix = np.ones((J, K + 1))
        suffix[:, :-1] = np.cumprod(ranked[:, ::-1], axis=1)[:, ::-1]
        for ra in range(K):
            a = self.order[:, ra]
            between = np.ones(J)
            for rb in range(ra + 1, K):
                b = self.order[:, rb]
                # all trucks ranked above rb other than the one at ra are busy
                val = np.ones(J) if (ra, rb) == (0, 1) else prefix[:, ra] * between
                prob[rows, a, b] = val
                prob[rows, b, a] = val
                between = between * ranked[:, rb]
            # truck at ra plus one outside truck: all other trucks busy
            val = prefix[:, ra] * suffix[:, ra + 1]
            prob[rows, a, 0] = val
            prob[rows, 0, a] = val
        prob[:, 0, 0] = prefix[:, K]
        return prob

    def initial_pair_probabilities(self) -> np.ndarray:
        J = self.inst.node_count
        K = self.truck_count
        prob = np.zeros((J, K + 1, K + 1))
        rows = np.arange(J)
        first = self.order[:, 0]
        second = self.order[:, 1] if K > 1 else np.zeros(J, dtype=int)
        prob[rows, first, second] = 1.0
        prob[rows, second, first] = 1.0
        return prob

    def demand(self, prob: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pair demand rates and per-truck request rates.

        A truck's request rate counts only pairs with another inside truck;
        ``D[0]`` collects the pairs that involve the outside region.
        """
        D_pair = np.einsum("j,jab->ab", self.lambdas, prob)
        np.fill_diagonal(D_pair, 0.0)
        D = D_pair[:, 1:].sum(axis=1)
        D[0] = D_pair[0].sum()
        return D_pair, D

    def busy_probabilities(self, D: np.ndarray, idle: np.ndarray, T: float) -> np.ndarray:
        mu = self.inst.mu
        p = np.zeros_like(D)
        for i in range(1, len(D)):
            if D[i] <= 0:
                continue
            h = mm11_relative_costs(D[i], mu)
            p[i] = min(1.0, max(0.0, busy_fraction(D[i] / mu) + h[idle[i]] / (D[i] * T)))
        return p

    def estimate(self, f, cfg: OsiaConfig) -> OsiaEstimate:
        """Approximate closest-first cost over ``[0, T]`` starting from idle counts ``f``."""
        T = cfg.horizon(self.inst.mu)
        idle = self.idle_trucks(f)
        prob = self.initial_pair_probabilities()
        D_pair, D = self.demand(prob)
        converged = damped = False
        it = 0
        p = np.zeros_like(D)
        while it < cfg.max_iterations:
            it += 1
            p = self.busy_probabilities(D, idle, T)
            prob = self.pair_probabilities(p)
            D_pair, D_new = self.demand(prob)
            inside = D[1:]
            change = np.abs(inside - D_new[1:])
            ok = np.where(inside > 0, change < cfg.epsilon * np.where(inside > 0, inside, 1.0), True)
            if ok.all():
                D = D_new
                converged = True
                break
            if it >= DAMPING_AFTER:
                damped = True
                D = 0.5 * (D + D_new)
            else:
                D = D_new
        if not converged:
            raise ConvergenceError(f"cost approximation did not converge in {cfg.max_iterations} sweeps")
        avail = 1.0 - p
        weight = prob * avail[None, :, None] * avail[None, None, :]
        # each unordered pair once
        upper = np.triu(np.ones_like(D_pair, dtype=bool), k=1)
        upper[0, 0] = True
        per_location = (weight * self.pair_cost)[:, upper].sum(axis=1)
        value = T * float(self.lambdas @ per_location)
        return OsiaEstimate(value, it, converged, damped, OsiaIterate(D_pair, D, p))


def osia_cost_estimate(inst: Instance, costs: CostTable, f, cfg: OsiaConfig | None = None,
                       osia_model: OsiaModel | None = None) -> float:
    osia_model = osia_model or OsiaModel(inst, costs)
    return osia_model.estimate(f, cfg or OsiaConfig()).value


def osia_future_costs(inst: Instance, costs: CostTable, cfg: OsiaConfig | None = None,
                      model: Model | None = None) -> tuple[np.ndarray, list[OsiaEstimate]]:
    cfg = cfg or OsiaConfig()
    model = model or Model(inst)
    om = OsiaModel(inst, costs)
    estimates = [om.estimate(f, cfg) for f in model.space.states]
    damped = sum(e.damped for e in estimates)
    if damped:
        log.warning("cost approximation needed damping in %d states", damped)
    return np.array([e.value for e in estimates]), estimates


def osia_policy(inst: Instance, costs: CostTable, cfg: OsiaConfig | None = None,
                model: Model | None = None, cf_policy: Policy | None = None) -> Policy:
    """Greedy step on the queueing approximation of closest-first costs."""
    model = model or Model(inst)
    cf_policy = cf_policy or closest_first_policy(inst, model)
    future, estimates = osia_future_costs(inst, costs, cfg, model)
    pol = greedy_policy(inst, costs, future, cf_policy, "OSIA", model)
    pol.meta["estimates"] = estimates
    return pol


def write_osia_diagnostics(estimates: list[OsiaEstimate], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state_index", "iterations", "converged", "damped", "J", "D"])
        for s, e in enumerate(estimates):
            writer.writerow([s, e.iterations, int(e.converged), int(e.damped), f"{e.value:.12g}",
                             " ".join(f"{x:.12g}" for x in e.iterate.D[1:])])
