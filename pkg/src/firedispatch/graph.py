"""City graphs, shortest routes and problem instances.

Nodes of a ``d x d`` grid are numbered row-major, ``node = row * d + col``.
Stations are referred to by their position in ``Instance.stations``; the
outside region gets index 0 in cost tables, station ``k`` gets ``k + 1``.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path as FsPath

import numpy as np

RETRY_BUDGET = 100

Edge = tuple[int, int]


def _edge(u: int, v: int) -> Edge:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class Graph:
    d: int
    edges: tuple[Edge, ...]

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be positive")
        normalized = tuple(sorted({_edge(int(u), int(v)) for u, v in self.edges}))
        if len(normalized) != len(self.edges):
            raise ValueError("duplicate edges")
        for u, v in normalized:
            if u == v:
                raise ValueError(f"self-loop at node {u}")
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise ValueError(f"edge ({u}, {v}) references a node outside the grid")
            (ru, cu), (rv, cv) = divmod(u, self.d), divmod(v, self.d)
            if abs(ru - rv) + abs(cu - cv) != 1:
                raise ValueError(f"edge ({u}, {v}) does not join lattice neighbours")
        object.__setattr__(self, "edges", normalized)

    @property
    def node_count(self) -> int:
        return self.d * self.d

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        nbrs: list[list[int]] = [[] for _ in range(self.node_count)]
        for u, v in self.edges:
            nbrs[u].append(v)
            nbrs[v].append(u)
        return tuple(tuple(sorted(n)) for n in nbrs)

    @cached_property
    def distances(self) -> np.ndarray:
        """All-pairs hop counts; -1 marks unreachable pairs."""
        return np.array([bfs_distances(self.adjacency, s) for s in range(self.node_count)])

    def is_connected(self) -> bool:
        return is_connected(self.node_count, self.edges)


def bfs_distances(adjacency, source: int) -> list[int]:
    dist = [-1] * len(adjacency)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in adjacency[u]:
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def is_connected(node_count: int, edges) -> bool:
    adjacency: list[list[int]] = [[] for _ in range(node_count)]
    for u, v in edges:
        adjacency[u].append(v)
        adjacency[v].append(u)
    return min(bfs_distances(adjacency, 0)) >= 0


def lattice_edges(d: int) -> list[Edge]:
    edges = []
    for r in range(d):
        for c in range(d):
            u = r * d + c
            if c + 1 < d:
                edges.append((u, u + 1))
            if r + 1 < d:
                edges.append((u, u + d))
    return edges


def generate_grid_graph(d: int, sparseness: float, seed: int) -> Graph:
    """Random connected subgraph of the ``d x d`` lattice.

    Edges are removed uniformly at random, skipping removals that would
    disconnect the graph, until ``round(2 d (d-1) * sparseness)`` edges are
    gone or ``RETRY_BUDGET`` consecutive picks failed.
    """
    if d < 2:
        raise ValueError(f"d must be at least 2, got {d}")
    if not 0.0 < sparseness < 1.0:
        raise ValueError(f"sparseness must lie in (0, 1), got {sparseness}")
    rng = np.random.default_rng(seed)
    edges = lattice_edges(d)
    target = math.floor(len(edges) * sparseness + 0.5)
    removed = failures = 0
    while removed < target and failures < RETRY_BUDGET:
        k = int(rng.integers(len(edges)))
        candidate = edges[:k] + edges[k + 1:]
        if is_connected(d * d, candidate):
            edges = candidate
            removed += 1
            failures = 0
        else:
            failures += 1
    return Graph(d, tuple(edges))


@dataclass(frozen=True)
class Path:
    nodes: tuple[int, ...]

    @property
    def phases(self) -> int:
        return len(self.nodes) - 1

    @property
    def edge_list(self) -> list[Edge]:
        return [_edge(u, v) for u, v in zip(self.nodes, self.nodes[1:])]

    @property
    def edge_set(self) -> frozenset[Edge]:
        return frozenset(self.edge_list)


def shortest_path(g: Graph, src: int, dst: int, rng: np.random.Generator | None = None) -> Path:
    """Minimum-hop path from ``src`` to ``dst``.

    Without ``rng`` the lexicographically smallest node sequence among all
    shortest paths is returned. With ``rng`` a shortest path is drawn
    uniformly at random.
    """
    n = g.node_count
    if not (0 <= src < n and 0 <= dst < n):
        raise ValueError(f"nodes {src}, {dst} not in graph")
    dist = g.distances[dst]
    if dist[src] < 0:
        raise ValueError(f"node {dst} unreachable from {src}: graph is malformed")
    if rng is not None:
        # number of shortest paths from each node to dst
        order = np.argsort(dist, kind="stable")
        count = np.zeros(n)
        for u in order:
            if dist[u] == 0:
                count[u] = 1.0
            elif dist[u] > 0:
                count[u] = sum(count[v] for v in g.adjacency[u] if dist[v] == dist[u] - 1)
    nodes = [src]
    u = src
    while u != dst:
        steps = [v for v in g.adjacency[u] if dist[v] == dist[u] - 1]
        if rng is None:
            u = steps[0]
        else:
            w = np.array([count[v] for v in steps])
            u = steps[int(rng.choice(len(steps), p=w / w.sum()))]
        nodes.append(u)
    return Path(tuple(nodes))


@dataclass(frozen=True)
class Instance:
    graph: Graph
    stations: tuple[int, ...]
    lambdas: tuple[float, ...]
    mu: float
    gamma: float
    t_star: float
    rho: float
    correlated: bool
    outside_phases: int
    seed: int
    capacities: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "stations", tuple(int(s) for s in self.stations))
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if not self.capacities:
            object.__setattr__(self, "capacities", (1,) * len(self.stations))
        else:
            object.__setattr__(self, "capacities", tuple(int(c) for c in self.capacities))

    @property
    def station_count(self) -> int:
        return len(self.stations)

    @property
    def node_count(self) -> int:
        return self.graph.node_count

    @property
    def total_rate(self) -> float:
        return float(sum(self.lambdas))

    @cached_property
    def paths(self) -> tuple[tuple[Path, ...], ...]:
        """``paths[k][j]``: route from station ``k`` to node ``j``."""
        return tuple(
            tuple(shortest_path(self.graph, s, j) for j in range(self.node_count))
            for s in self.stations
        )

    @cached_property
    def phases(self) -> np.ndarray:
        """Hop counts, shape (I, J)."""
        return self.graph.distances[list(self.stations)].copy()

    @property
    def max_phases(self) -> int:
        return int(self.phases.max())

    def with_correlation(self, correlated: bool) -> Instance:
        return Instance(
            self.graph, self.stations, self.lambdas, self.mu, self.gamma, self.t_star,
            self.rho, correlated, self.outside_phases, self.seed, self.capacities,
        )

    def validate(self) -> None:
        """Raise ``ValueError`` naming the first field that breaks an invariant."""
        g = self.graph
        if not g.is_connected():
            raise ValueError("edges: graph is not connected")
        if not self.stations:
            raise ValueError("stations: at least one station required")
        if len(set(self.stations)) != len(self.stations):
            raise ValueError("stations: duplicate station nodes")
        for s in self.stations:
            if not 0 <= s < g.node_count:
                raise ValueError(f"stations: node {s} not in graph")
        if len(self.capacities) != len(self.stations) or min(self.capacities) < 1:
            raise ValueError("capacities: one positive count per station required")
        if len(self.lambdas) != g.node_count:
            raise ValueError(f"lambdas: expected {g.node_count} rates, got {len(self.lambdas)}")
        if min(self.lambdas) < 0:
            raise ValueError("lambdas: rates must be nonnegative")
        if not self.mu > 0:
            raise ValueError("mu: must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma: must lie in (0, 1]")
        if not self.rho > 0:
            raise ValueError("rho: must be positive")
        if not math.isclose(self.t_star, self.gamma * self.max_phases, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError(f"t_star: expected gamma * max phases = {self.gamma * self.max_phases}")
        if self.outside_phases != 2 * self.max_phases:
            raise ValueError(f"outside_phases: expected {2 * self.max_phases}")
        load = self.total_rate / (self.mu * sum(self.capacities))
        if not math.isclose(load, self.rho, rel_tol=1e-9):
            raise ValueError(f"rho: arrival rates give load {load}, not {self.rho}")

    def to_dict(self) -> dict:
        out = {
            "d": self.graph.d,
            "edges": [list(e) for e in self.graph.edges],
            "stations": list(self.stations),
            "lambdas": list(self.lambdas),
            "mu": self.mu,
            "gamma": self.gamma,
            "t_star": self.t_star,
            "rho": self.rho,
            "correlated": self.correlated,
            "outside_phases": self.outside_phases,
            "seed": self.seed,
        }
        if any(c != 1 for c in self.capacities):
            out["capacities"] = list(self.capacities)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> Instance:
        required = ["d", "edges", "stations", "lambdas", "mu", "gamma", "t_star", "rho",
                    "correlated", "outside_phases", "seed"]
        missing = [k for k in required if k not in data]
        if missing:
            raise ValueError(f"instance file missing fields: {', '.join(missing)}")
        try:
            graph = Graph(int(data["d"]), tuple(tuple(e) for e in data["edges"]))
        except (TypeError, ValueError) as exc:
            raise ValueError(f"edges: {exc}") from exc
        inst = cls(
            graph=graph,
            stations=tuple(data["stations"]),
            lambdas=tuple(data["lambdas"]),
            mu=float(data["mu"]),
            gamma=float(data["gamma"]),
            t_star=float(data["t_star"]),
            rho=float(data["rho"]),
            correlated=bool(data["correlated"]),
            outside_phases=int(data["outside_phases"]),
            seed=int(data["seed"]),
            capacities=tuple(data.get("capacities", ())),
        )
        inst.validate()
        return inst


def generate_instance(g: Graph, station_count: int, rho: float, gamma: float,
                      correlated: bool, seed: int) -> Instance:
    """Place single-truck stations and arrival rates on ``g``.

    Stations go to distinct nodes drawn uniformly at random. Per-node rates
    are i.i.d. uniform weights rescaled so that the load per truck is ``rho``
    with ``mu = 1``.
    """
    if station_count < 1 or station_count > g.node_count:
        raise ValueError(f"station_count must lie in [1, {g.node_count}], got {station_count}")
    if not rho > 0:
        raise ValueError("rho must be positive")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    stations = tuple(int(s) for s in rng.choice(g.node_count, size=station_count, replace=False))
    weights = rng.uniform(0.0, 1.0, size=g.node_count)
    mu = 1.0
    lambdas = weights * (rho * mu * station_count / weights.sum())
    max_phases = int(g.distances[list(stations)].max())
    return Instance(
        graph=g,
        stations=stations,
        lambdas=tuple(lambdas.tolist()),
        mu=mu,
        gamma=gamma,
        t_star=gamma * max_phases,
        rho=rho,
        correlated=correlated,
        outside_phases=2 * max_phases,
        seed=int(seed),
    )


def save_instance(inst: Instance, path) -> None:
    FsPath(path).write_text(json.dumps(inst.to_dict(), indent=2) + "\n")


def load_instance(path) -> Instance:
    try:
        data = json.loads(FsPath(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from exc
    return Instance.from_dict(data)
