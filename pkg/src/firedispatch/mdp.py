"""Exact average-cost MDP machinery for two-truck dispatching.

A state is the vector of idle trucks per station. An action is stored as
the unordered pair of cost-table indices the two trucks come from (0 is
the outside region, ``k + 1`` is station ``k``), which is in one-to-one
correspondence with the dispatch-count vector ``a`` with ``|a| <= 2``.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .erlang import CostTable
from .graph import Instance

log = logging.getLogger(__name__)

DENSE_LIMIT = 4096
ITERATIVE_RTOL = 1e-10
DEFAULT_MAX_ITERATIONS = 1000
TIE_TOL = 1e-11

Pair = tuple[int, int]


class SolverError(RuntimeError):
    pass


class StateSpace:
    """Dense mixed-radix indexing of the idle-count vectors."""

    def __init__(self, capacities):
        self.capacities = np.asarray(capacities, dtype=int)
        radix = self.capacities + 1
        self.strides = np.concatenate([[1], np.cumprod(radix[:-1])]).astype(int)
        self.size = int(np.prod(radix))
        idx = np.arange(self.size)
        self.states = (idx[:, None] // self.strides[None, :]) % radix[None, :]
        self.reference = self.index(self.capacities)

    def index(self, f) -> int:
        return int(np.dot(np.asarray(f, dtype=int), self.strides))

    def __len__(self):
        return self.size

    def __iter__(self):
        return iter(self.states)


def pair_to_vector(pair: Pair, station_count: int) -> tuple[np.ndarray, int]:
    """Dispatch counts per station and the number of outside trucks."""
    a = np.zeros(station_count, dtype=int)
    for i in pair:
        if i:
            a[i - 1] += 1
    return a, 2 - int(a.sum())


def action_set(f) -> list[Pair]:
    """Feasible dispatches from idle counts ``f``, in lexicographic pair order.

    Two inside trucks are sent whenever two are idle; outside trucks only
    make up a shortfall.
    """
    f = np.asarray(f, dtype=int)
    idle = int(f.sum())
    if idle == 0:
        return [(0, 0)]
    stations = [k + 1 for k in range(len(f)) if f[k] > 0]
    if idle == 1:
        return [(0, stations[0])]
    out = []
    for x, i1 in enumerate(stations):
        if f[i1 - 1] >= 2:
            out.append((i1, i1))
        for i2 in stations[x + 1:]:
            out.append((i1, i2))
    return sorted(out)


@dataclass
class Policy:
    """Deterministic dispatch rule, ``actions[s, j]`` is the pair for state ``s``."""
    kind: str
    actions: np.ndarray
    orders: list[list[int]] | None = None
    meta: dict = field(default_factory=dict)

    def pair(self, s: int, j: int) -> Pair:
        return tuple(int(x) for x in self.actions[s, j])

    def same_actions(self, other: Policy) -> bool:
        return bool(np.array_equal(self.actions, other.actions))


@dataclass
class Evaluation:
    g: float
    h: np.ndarray
    tau: float
    total_rate: float
    residual: float = 0.0
    iterations: int = 0

    @property
    def flar(self) -> float:
        return flar(self)


def flar(e: Evaluation, inst: Instance | None = None) -> float:
    """Fraction of late arrivals, the late-arrival rate over the arrival rate."""
    total = inst.total_rate if inst is not None else e.total_rate
    if total <= 0:
        raise ValueError("total arrival rate must be positive")
    return e.g / total


class Model:
    """Per-instance precomputation: states, feasible actions, successors."""

    def __init__(self, inst: Instance):
        self.inst = inst
        self.space = StateSpace(inst.capacities)
        self.lambdas = np.asarray(inst.lambdas)
        self.mu = inst.mu
        self.tau = float(self.lambdas.sum() + inst.mu * sum(inst.capacities))

    @cached_property
    def candidates(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Padded per-state action lists: pairs (S, A, 2), successors (S, A), valid mask."""
        lists = [action_set(f) for f in self.space.states]
        width = max(len(x) for x in lists)
        pairs = np.zeros((self.space.size, width, 2), dtype=int)
        valid = np.zeros((self.space.size, width), dtype=bool)
        for s, acts in enumerate(lists):
            pairs[s, :len(acts)] = acts
            pairs[s, len(acts):] = acts[-1]
            valid[s, :len(acts)] = True
        succ = self.successor(np.arange(self.space.size)[:, None], pairs)
        return pairs, succ, valid

    def successor(self, s, pairs) -> np.ndarray:
        """State index after dispatching ``pairs`` (shape (..., 2)) from ``s``."""
        strides = np.concatenate([[0], self.space.strides])
        return s - strides[pairs[..., 0]] - strides[pairs[..., 1]]

    def check_policy(self, pol: Policy) -> None:
        S, J = self.space.size, self.inst.node_count
        if pol.actions.shape != (S, J, 2):
            raise ValueError(f"policy shape {pol.actions.shape}, expected {(S, J, 2)}")
        pairs, _, valid = self.candidates
        a = np.sort(pol.actions, axis=-1)
        match = (pairs[:, None, :, :] == a[:, :, None, :]).all(-1) & valid[:, None, :]
        bad = np.argwhere(~match.any(-1))
        if len(bad):
            s, j = bad[0]
            raise ValueError(
                f"infeasible action {tuple(pol.actions[s, j])} in state "
                f"{tuple(self.space.states[s])} at location {j}"
            )


def closest_first_orders(inst: Instance) -> list[list[int]]:
    """Per location, station indices sorted by hop count, ties by index."""
    phases = inst.phases
    return [sorted(range(inst.station_count), key=lambda k: (phases[k, j], k))
            for j in range(inst.node_count)]


def closest_first_policy(inst: Instance, model: Model | None = None) -> Policy:
    """Send the nearest idle truck and then the next nearest idle truck."""
    model = model or Model(inst)
    orders = closest_first_orders(inst)
    states = model.space.states
    actions = np.zeros((model.space.size, inst.node_count, 2), dtype=int)
    for s, f in enumerate(states):
        for j, order in enumerate(orders):
            picked = []
            for k in order:
                take = min(int(f[k]), 2 - len(picked))
                picked.extend([k + 1] * take)
                if len(picked) == 2:
                    break
            picked.extend([0] * (2 - len(picked)))
            actions[s, j] = sorted(picked)
    return Policy("CF", actions, orders=orders)


def _system(model: Model, costs: CostTable, pol: Policy):
    """Sparse coefficient matrix over ``h`` and the right-hand side."""
    S = model.space.size
    J = model.inst.node_count
    lam = model.lambdas
    space = model.space
    pairs = pol.actions
    s_idx = np.repeat(np.arange(S), J)
    j_idx = np.tile(np.arange(J), S)
    flat = pairs.reshape(-1, 2)
    cost = costs.values[j_idx, flat[:, 0], flat[:, 1]].reshape(S, J)
    nxt = model.successor(s_idx, flat)
    rhs = cost @ lam

    idle = space.states.sum(axis=1)
    rows = [np.arange(S)]
    cols = [np.arange(S)]
    vals = [model.tau - model.mu * idle]
    rows.append(s_idx)
    cols.append(nxt)
    vals.append(-np.tile(lam, S))
    for k, cap in enumerate(space.capacities):
        f_k = space.states[:, k]
        src = np.flatnonzero(f_k < cap)
        rows.append(src)
        cols.append(src + space.strides[k])
        vals.append(-model.mu * (cap - f_k[src]))
    A = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(S, S)
    )
    return A, rhs, cost, nxt


def evaluate_policy(inst: Instance, costs: CostTable, pol: Policy, model: Model | None = None) -> Evaluation:
    """Average cost ``g`` and relative costs ``h`` of a fixed policy.

    Solves the uniformized Bellman equations of the policy with ``h`` pinned
    to zero in the all-idle state.
    """
    model = model or Model(inst)
    A, rhs, _, _ = _system(model, costs, pol)
    S = model.space.size
    ref = model.space.reference
    # unknowns: h with the reference column replaced by g
    M = A.tolil()
    M[:, ref] = np.ones((S, 1))
    M = M.tocsc()
    if S <= DENSE_LIMIT:
        try:
            x = scipy.linalg.solve(M.toarray(), rhs)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning) as exc:
            raise SolverError(f"singular policy-evaluation system: {exc}") from exc
    else:
        ilu = scipy.sparse.linalg.spilu(M, drop_tol=1e-6)
        precond = scipy.sparse.linalg.LinearOperator(M.shape, ilu.solve)
        x, info = scipy.sparse.linalg.gmres(M, rhs, rtol=ITERATIVE_RTOL, atol=0.0, M=precond,
                                            restart=100, maxiter=1000)
        if info != 0:
            raise SolverError(f"iterative solver did not converge (info={info})")
    g = float(x[ref])
    h = x.copy()
    h[ref] = 0.0
    residual = float(np.max(np.abs(A @ h + g - rhs)))
    if residual > 1e-9 * model.tau:
        raise SolverError(f"policy-evaluation residual {residual:.3e} too large")
    return Evaluation(g=g, h=h, tau=model.tau, total_rate=inst.total_rate, residual=residual)


def greedy_policy(inst: Instance, costs: CostTable, future: np.ndarray, incumbent: Policy,
                  kind: str, model: Model | None = None) -> Policy:
    """One improvement step: argmin over feasible actions of cost plus ``future``.

    Ties within ``TIE_TOL`` keep the incumbent action, otherwise the
    lexicographically smallest pair wins.
    """
    model = model or Model(inst)
    pairs, succ, valid = model.candidates
    S, width = succ.shape
    tol = TIE_TOL * max(1.0, float(np.max(np.abs(future))))
    out = np.empty_like(incumbent.actions)
    inc_sorted = np.sort(incumbent.actions, axis=-1)
    for lo in range(0, S, 256):
        hi = min(S, lo + 256)
        p = pairs[lo:hi]
        # values[s, a, j]
        values = costs.values[:, p[..., 0], p[..., 1]].transpose(1, 2, 0) + future[succ[lo:hi]][..., None]
        values = np.where(valid[lo:hi, :, None], values, np.inf)
        best = values.min(axis=1, keepdims=True)
        near = values <= best + tol
        first = near.argmax(axis=1)  # lexicographic among near-ties
        chosen = p[np.arange(hi - lo)[:, None], first]
        is_inc = (p[:, :, None, :] == inc_sorted[lo:hi, None, :, :]).all(-1)  # (s, a, j)
        keep = (is_inc & near).any(axis=1)
        out[lo:hi] = np.where(keep[..., None], inc_sorted[lo:hi], chosen)
    return Policy(kind, out, orders=incumbent.orders)


def policy_iteration(inst: Instance, costs: CostTable, initial: Policy | None = None,
                     max_iterations: int = DEFAULT_MAX_ITERATIONS,
                     model: Model | None = None) -> tuple[Policy, Evaluation]:
    """Optimal deterministic policy by Howard's policy iteration."""
    model = model or Model(inst)
    pol = initial if initial is not None else closest_first_policy(inst, model)
    history = []
    for it in range(1, max_iterations + 1):
        ev = evaluate_policy(inst, costs, pol, model)
        history.append(ev.g)
        improved = greedy_policy(inst, costs, ev.h, pol, "OPT", model)
        if improved.same_actions(pol):
            ev.iterations = it
            out = Policy("OPT", pol.actions.copy(), orders=pol.orders,
                         meta={"initial": initial.kind if initial is not None else "CF",
                               "g_history": history})
            return out, ev
        pol = improved
    raise SolverError(f"policy iteration did not converge in {max_iterations} iterations")


def write_policy_csv(inst: Instance, pol: Policy, path) -> None:
    space = StateSpace(inst.capacities)
    n = inst.station_count
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state_index", "j", *[f"a_{k + 1}" for k in range(n)], "outside_count"])
        for s in range(space.size):
            for j in range(inst.node_count):
                a, outside = pair_to_vector(pol.pair(s, j), n)
                writer.writerow([s, j, *a.tolist(), outside])


def write_evaluation_csv(ev: Evaluation, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["g", "flar", "tau", "iteration_count"])
        writer.writerow([f"{ev.g:.12g}", f"{ev.flar:.12g}", f"{ev.tau:.12g}", ev.iterations])
