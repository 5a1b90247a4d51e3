"""Dynamic weighted social network: tie lifecycle under constraints,
positions, structural metrics, power-law fitting, and Louvain communities.

The graph is undirected with strengths in (0, 1]. All mutation is
single-writer (the engine applies updates in sorted order after the
parallel decision phase); everything else here is read-only.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .agents import Action, ActionKind

TIE_INITIAL_STRENGTH = 0.3
TIE_REINFORCEMENT = 0.1

_SCIPY_PATH_THRESHOLD = 600  # switch to csgraph BFS above this component size
_POWERLAW_MIN_TAIL = 10


class InsufficientDataError(ValueError):
    """Too few observations above xmin for a meaningful power-law fit."""


@dataclass
class Tie:
    strength: float
    created_at: int
    last_interaction: int

    def __post_init__(self) -> None:
        if not (0.0 < self.strength <= 1.0):
            raise ValueError(f"tie strength {self.strength} outside (0, 1]")


@dataclass(frozen=True, slots=True)
class NetworkPosition:
    degree: int
    degree_centrality: float
    local_clustering: float
    community: int  # -1 when unknown


@dataclass(frozen=True, slots=True)
class NetworkConstraints:
    max_degree: int = 150
    centrality_exponent: float = 1.0  # kappa
    decay_rate: float = 0.01
    severance_threshold: float = 0.05

    def __post_init__(self) -> None:
        if self.max_degree < 1:
            raise ValueError("max_degree must be >= 1")
        if self.centrality_exponent < 0:
            raise ValueError("centrality exponent must be >= 0")


@dataclass(frozen=True, slots=True)
class MetricsReport:
    clustering_coefficient: float
    avg_path_length: float
    density: float
    powerlaw_alpha: float | None
    powerlaw_xmin: int | None
    n_nodes: int
    n_edges: int
    empty: bool = False


def _pair(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


class SocialGraph:
    """Undirected weighted graph with adjacency kept alongside the tie map."""

    def __init__(self) -> None:
        self.nodes: set[int] = set()
        self.ties: dict[tuple[int, int], Tie] = {}
        self.adj: dict[int, set[int]] = {}

    def add_node(self, node: int) -> None:
        if node not in self.nodes:
            self.nodes.add(node)
            self.adj[node] = set()

    def add_tie(self, u: int, v: int, strength: float, now: int) -> None:
        if u == v:
            raise ValueError("self-ties are not allowed")
        self.add_node(u)
        self.add_node(v)
        key = _pair(u, v)
        if key in self.ties:
            raise ValueError(f"tie {key} already exists")
        self.ties[key] = Tie(strength=strength, created_at=now, last_interaction=now)
        self.adj[u].add(v)
        self.adj[v].add(u)

    def remove_tie(self, u: int, v: int) -> None:
        key = _pair(u, v)
        if key in self.ties:
            del self.ties[key]
            self.adj[u].discard(v)
            self.adj[v].discard(u)

    def has_tie(self, u: int, v: int) -> bool:
        return _pair(u, v) in self.ties

    def strength(self, u: int, v: int) -> float:
        tie = self.ties.get(_pair(u, v))
        return tie.strength if tie else 0.0

    def neighbors(self, node: int) -> set[int]:
        return self.adj.get(node, set())

    def degree(self, node: int) -> int:
        return len(self.adj.get(node, ()))

    def degrees(self) -> list[int]:
        return [len(self.adj[n]) for n in sorted(self.nodes)]

    def copy(self) -> "SocialGraph":
        g = SocialGraph()
        g.nodes = set(self.nodes)
        g.adj = {n: set(s) for n, s in self.adj.items()}
        g.ties = {
            k: Tie(t.strength, t.created_at, t.last_interaction) for k, t in self.ties.items()
        }
        return g


def validate_action(
    action: Action, graph: SocialGraph, constraints: NetworkConstraints, actor: int
) -> tuple[bool, str]:
    """Check an action against the current graph and network constraints."""
    if actor not in graph.nodes:
        raise ValueError(f"unknown actor id {actor}")
    target = action.target
    if target is not None and target not in graph.nodes:
        raise ValueError(f"unknown target id {target}")
    kind = action.kind
    if kind in (ActionKind.POST, ActionKind.IDLE):
        return True, "ok"
    if target == actor:
        return False, "self-target"
    if kind is ActionKind.FORM_TIE:
        if graph.has_tie(actor, target):
            return False, "existing tie"
        if graph.degree(actor) >= constraints.max_degree:
            return False, "actor at max degree"
        if graph.degree(target) >= constraints.max_degree:
            return False, "target at max degree"
        return True, "ok"
    if kind in (ActionKind.STRENGTHEN_TIE, ActionKind.SEVER_TIE):
        if not graph.has_tie(actor, target):
            return False, "no tie"
        return True, "ok"
    # Greet / Reply / ShareInfo only need the target to exist
    return True, "ok"


def target_weight(position: NetworkPosition, kappa: float) -> float:
    """(1 + degree centrality)^kappa, the position bias for target selection."""
    return (1.0 + position.degree_centrality) ** kappa


def apply_tie_dynamics(
    graph: SocialGraph,
    interactions: list[tuple[int, Action]],
    constraints: NetworkConstraints,
    now: int,
) -> SocialGraph:
    """Apply one step of tie formation, reinforcement, decay, and severance.

    Approved actions are applied in sorted (actor, target) order; every
    tie not touched this step decays multiplicatively and drops out below
    the severance threshold. Degree limits are re-checked at application
    time so same-step formations cannot overshoot max_degree.
    """
    touched: set[tuple[int, int]] = set()
    ordered = sorted(
        (item for item in interactions if item[1].target is not None),
        key=lambda item: (item[0], item[1].target),
    )
    for actor, action in ordered:
        target = action.target
        key = _pair(actor, target)
        if action.kind is ActionKind.FORM_TIE:
            if (
                key not in graph.ties
                and graph.degree(actor) < constraints.max_degree
                and graph.degree(target) < constraints.max_degree
            ):
                graph.add_tie(actor, target, TIE_INITIAL_STRENGTH, now)
                touched.add(key)
        elif action.kind is ActionKind.STRENGTHEN_TIE:
            tie = graph.ties.get(key)
            if tie is not None:
                tie.strength = min(1.0, tie.strength + TIE_REINFORCEMENT)
                tie.last_interaction = now
                touched.add(key)
        elif action.kind is ActionKind.SEVER_TIE:
            graph.remove_tie(actor, target)
        else:  # Greet / ShareInfo / Reply across an existing tie keep it warm
            tie = graph.ties.get(key)
            if tie is not None:
                tie.last_interaction = now
                touched.add(key)

    for key in sorted(graph.ties):
        if key in touched:
            continue
        tie = graph.ties[key]
        tie.strength *= 1.0 - constraints.decay_rate
        if tie.strength < constraints.severance_threshold:
            graph.remove_tie(*key)
    return graph


def local_clustering(graph: SocialGraph, node: int) -> float:
    nbrs = graph.adj.get(node, set())
    d = len(nbrs)
    if d < 2:
        return 0.0
    links = sum(len(graph.adj[u] & nbrs) for u in nbrs) // 2
    return 2.0 * links / (d * (d - 1))


def positions(
    graph: SocialGraph,
    communities: dict[int, int] | None = None,
    with_clustering: bool = True,
) -> dict[int, NetworkPosition]:
    """Derive every node's network position from the graph."""
    n = len(graph.nodes)
    comm = communities or {}
    out = {}
    for node in graph.nodes:
        d = graph.degree(node)
        out[node] = NetworkPosition(
            degree=d,
            degree_centrality=d / (n - 1) if n > 1 else 0.0,
            local_clustering=local_clustering(graph, node) if with_clustering else 0.0,
            community=comm.get(node, -1),
        )
    return out


def _components(graph: SocialGraph) -> list[list[int]]:
    seen: set[int] = set()
    comps = []
    for start in sorted(graph.nodes):
        if start in seen:
            continue
        comp = []
        queue = deque([start])
        seen.add(start)
        while queue:
            u = queue.popleft()
            comp.append(u)
            for v in graph.adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        comps.append(comp)
    return comps


def _avg_path_bfs(graph: SocialGraph, comp: list[int]) -> float:
    total = 0
    pairs = 0
    comp_set = set(comp)
    for src in comp:
        dist = {src: 0}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            du = dist[u]
            for v in graph.adj[u]:
                if v in comp_set and v not in dist:
                    dist[v] = du + 1
                    queue.append(v)
        total += sum(dist.values())
        pairs += len(dist) - 1
    return total / pairs if pairs else 0.0


def _avg_path_scipy(graph: SocialGraph, comp: list[int]) -> float:
    from scipy.sparse import csr_matrix
    from scipy.sparse.csgraph import dijkstra

    index = {n: i for i, n in enumerate(comp)}
    rows, cols = [], []
    for u in comp:
        for v in graph.adj[u]:
            if v in index:
                rows.append(index[u])
                cols.append(index[v])
    m = len(comp)
    mat = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(m, m))
    total = 0.0
    chunk = 512
    for start in range(0, m, chunk):
        idx = list(range(start, min(start + chunk, m)))
        dist = dijkstra(mat, indices=idx, unweighted=True)
        total += float(dist[np.isfinite(dist)].sum())
    return total / (m * (m - 1)) if m > 1 else 0.0


def compute_metrics(graph: SocialGraph) -> MetricsReport:
    """Exact global clustering, mean path length of the largest component,
    density, and a power-law tail fit of the degree sequence."""
    n = len(graph.nodes)
    e = len(graph.ties)
    if n == 0:
        return MetricsReport(0.0, 0.0, 0.0, None, None, 0, 0, empty=True)
    density = 2.0 * e / (n * (n - 1)) if n > 1 else 0.0

    eligible = [node for node in graph.nodes if graph.degree(node) >= 2]
    clustering = (
        sum(local_clustering(graph, node) for node in eligible) / len(eligible) if eligible else 0.0
    )

    comps = _components(graph)
    largest = max(comps, key=lambda c: (len(c), -min(c)))
    if len(largest) < 2:
        avg_path = 0.0
    elif len(largest) > _SCIPY_PATH_THRESHOLD:
        avg_path = _avg_path_scipy(graph, largest)
    else:
        avg_path = _avg_path_bfs(graph, largest)

    alpha: float | None = None
    xmin: int | None = None
    try:
        fit = fit_power_law(graph.degrees())
        alpha, xmin = fit.alpha, fit.xmin
    except InsufficientDataError:
        pass
    return MetricsReport(clustering, avg_path, density, alpha, xmin, n, e)


@dataclass(frozen=True, slots=True)
class PowerLawFit:
    alpha: float
    xmin: int
    n_tail: int
    ks_distance: float


def fit_power_law(degrees: list[int]) -> PowerLawFit:
    """Discrete MLE with KS-selected xmin (continuous approximation).

    alpha = 1 + n / sum(ln(d_i / (xmin - 0.5))) over the tail d >= xmin;
    xmin minimizes the KS distance between the tail's empirical CDF and
    the fitted CDF.
    """
    data = np.array(sorted(d for d in degrees if d >= 1), dtype=float)
    if data.size < _POWERLAW_MIN_TAIL:
        raise InsufficientDataError(f"need >= {_POWERLAW_MIN_TAIL} positive degrees, got {data.size}")
    uniques = np.unique(data)
    if uniques.size < 2:
        raise InsufficientDataError("degenerate degree sequence: all degrees equal")

    best: tuple[float, float, int, int] | None = None  # (ks, alpha, xmin, n)
    for xmin in uniques[:-1]:
        tail = data[data >= xmin]
        n = tail.size
        if n < _POWERLAW_MIN_TAIL:
            continue
        shift = xmin - 0.5
        denom = float(np.sum(np.log(tail / shift)))
        if denom <= 0:
            continue
        alpha = 1.0 + n / denom
        model_cdf = 1.0 - np.power(shift / tail, alpha - 1.0)
        below = np.arange(n) / n
        above = np.arange(1, n + 1) / n
        ks = float(np.max(np.maximum(np.abs(model_cdf - below), np.abs(model_cdf - above))))
        if best is None or ks < best[0]:
            best = (ks, alpha, int(xmin), n)
    if best is None:
        raise InsufficientDataError("no candidate xmin leaves a usable tail")
    ks, alpha, xmin, n = best
    return PowerLawFit(alpha=alpha, xmin=xmin, n_tail=n, ks_distance=ks)


# -- Louvain communities -------------------------------------------------------


def modularity(graph: SocialGraph, labels: dict[int, int], resolution: float = 1.0) -> float:
    """Weighted modularity of a partition at the given resolution."""
    two_m = 2.0 * sum(t.strength for t in graph.ties.values())
    if two_m == 0.0:
        return 0.0
    internal: dict[int, float] = {}
    degree_sum: dict[int, float] = {}
    strengths = {n: 0.0 for n in graph.nodes}
    for (u, v), tie in graph.ties.items():
        strengths[u] += tie.strength
        strengths[v] += tie.strength
        if labels[u] == labels[v]:
            internal[labels[u]] = internal.get(labels[u], 0.0) + tie.strength
    for node, s in strengths.items():
        c = labels[node]
        degree_sum[c] = degree_sum.get(c, 0.0) + s
    q = 0.0
    for c, tot in degree_sum.items():
        q += 2.0 * internal.get(c, 0.0) / two_m - resolution * (tot / two_m) ** 2
    return q


def _louvain_pass(
    adj: dict[int, dict[int, float]], resolution: float
) -> tuple[dict[int, int], bool]:
    """One local-moving phase over nodes in sorted order."""
    nodes = sorted(adj)
    two_m = sum(sum(w.values()) for w in adj.values())  # already counts both ends
    if two_m == 0.0:
        return {n: i for i, n in enumerate(nodes)}, False
    strength = {n: sum(adj[n].values()) for n in nodes}
    community = {n: n for n in nodes}
    comm_total = dict(strength)
    improved = False
    moved = True
    while moved:
        moved = False
        for node in nodes:
            own = community[node]
            k_i = strength[node]
            comm_total[own] -= k_i
            neigh_weights: dict[int, float] = {}
            for other, w in adj[node].items():
                if other != node:
                    neigh_weights[community[other]] = neigh_weights.get(community[other], 0.0) + w
            best_comm = own
            best_gain = neigh_weights.get(own, 0.0) - resolution * comm_total[own] * k_i / two_m
            for c in sorted(neigh_weights):
                gain = neigh_weights[c] - resolution * comm_total[c] * k_i / two_m
                if gain > best_gain + 1e-12:
                    best_gain = gain
                    best_comm = c
            comm_total[best_comm] = comm_total.get(best_comm, 0.0) + k_i
            if best_comm != own:
                community[node] = best_comm
                moved = True
                improved = True
    return community, improved


def detect_communities(
    graph: SocialGraph, resolution: float = 1.0
) -> tuple[dict[int, int], float]:
    """Louvain modularity maximization, deterministic via sorted visit order.

    Returns (node -> community label, achieved modularity); labels are
    renumbered 0..C-1 by each community's smallest member.
    """
    if not graph.nodes:
        return {}, 0.0
    adj: dict[int, dict[int, float]] = {n: {} for n in graph.nodes}
    for (u, v), tie in graph.ties.items():
        adj[u][v] = adj[u].get(v, 0.0) + tie.strength
        adj[v][u] = adj[v].get(u, 0.0) + tie.strength

    membership = {n: n for n in graph.nodes}  # original node -> current supernode
    while True:
        community, improved = _louvain_pass(adj, resolution)
        if not improved:
            break
        membership = {n: community[s] for n, s in membership.items()}
        # aggregate the graph: communities become supernodes
        new_adj: dict[int, dict[int, float]] = {}
        for u, nbrs in adj.items():
            cu = community[u]
            row = new_adj.setdefault(cu, {})
            for v, w in nbrs.items():
                cv = community[v]
                row[cv] = row.get(cv, 0.0) + w
            if u in nbrs:  # self-loop already counted above
                pass
        adj = new_adj
        if len(adj) <= 1:
            break

    groups: dict[int, list[int]] = {}
    for node, c in membership.items():
        groups.setdefault(c, []).append(node)
    ordered = sorted(groups.values(), key=min)
    labels = {}
    for idx, members in enumerate(ordered):
        for node in members:
            labels[node] = idx
    return labels, modularity(graph, labels, resolution)
