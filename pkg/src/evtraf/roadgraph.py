"""Directed road graphs, receptive-field masks, and degree selection.

A road graph is a set of uniform-length segments (one sensor per
segment) joined by directed edges that follow travel direction.  The
receptive field of a forecasting layer is picked from wave physics: a
disturbance travelling at wave speed c covers c * dt per sampling
interval, so the smallest hop count k whose covered length k * dx
strictly exceeds c * dt, while staying below 2 * c * dt, both captures
the wave and avoids an oversized neighborhood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegreeSelectionError, GraphFormatError, ValidationError


@dataclass(frozen=True)
class RoadNode:
    id: str
    length_km: float
    lanes: int


class RoadGraph:
    """Immutable directed graph of uniform road segments.

    Construction validates: unique node ids, edges over known ids, no
    self-loops, uniform segment length (== delta_x), and weak
    connectivity.
    """

    def __init__(self, nodes, edges, delta_t=2.0):
        self.nodes = tuple(nodes)
        self.edges = tuple((str(a), str(b)) for a, b in edges)
        self.delta_t = float(delta_t)
        if not self.nodes:
            raise ValidationError("graph needs at least one node")
        if self.delta_t <= 0.0:
            raise ValidationError(f"delta_t must be positive, got {delta_t}")
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValidationError(f"duplicate node id {dup!r}")
        self.index = {n.id: i for i, n in enumerate(self.nodes)}
        lengths = {n.length_km for n in self.nodes}
        if len(lengths) != 1:
            raise ValidationError(
                f"segment lengths must be uniform, got {sorted(lengths)}"
            )
        self.delta_x = self.nodes[0].length_km
        if self.delta_x <= 0.0:
            raise ValidationError(f"segment length must be positive, got {self.delta_x}")
        for n in self.nodes:
            if n.lanes < 1:
                raise ValidationError(f"node {n.id!r} has invalid lane count {n.lanes}")
        n = len(self.nodes)
        adj = np.zeros((n, n), dtype=bool)
        for a, b in self.edges:
            if a not in self.index:
                raise ValidationError(f"edge references unknown node {a!r}")
            if b not in self.index:
                raise ValidationError(f"edge references unknown node {b!r}")
            if a == b:
                raise ValidationError(f"self-loop on node {a!r}")
            adj[self.index[a], self.index[b]] = True
        self.adjacency = adj
        self.adjacency.setflags(write=False)
        if n > 1 and not self._weakly_connected():
            raise ValidationError("graph is not weakly connected")

    def _weakly_connected(self):
        undirected = self.adjacency | self.adjacency.T
        seen = np.zeros(len(self.nodes), dtype=bool)
        frontier = [0]
        seen[0] = True
        while frontier:
            i = frontier.pop()
            for j in np.nonzero(undirected[i])[0]:
                if not seen[j]:
                    seen[j] = True
                    frontier.append(int(j))
        return bool(seen.all())

    def __len__(self):
        return len(self.nodes)

    @property
    def node_ids(self):
        return [n.id for n in self.nodes]

    @property
    def lanes(self):
        return np.array([n.lanes for n in self.nodes], dtype=np.float64)

    def successors(self, i):
        return np.nonzero(self.adjacency[i])[0]

    def predecessors(self, i):
        return np.nonzero(self.adjacency[:, i])[0]


def chain_graph(n, delta_x=0.4, lanes=1, delta_t=2.0):
    """A one-way corridor of n segments."""
    nodes = [RoadNode(f"s{i}", delta_x, lanes) for i in range(n)]
    edges = [(f"s{i}", f"s{i+1}") for i in range(n - 1)]
    return RoadGraph(nodes, edges, delta_t=delta_t)


def ring_graph(n, delta_x=0.4, lanes=1, delta_t=2.0):
    """A closed loop of n segments; no boundaries, conserves vehicles."""
    nodes = [RoadNode(f"s{i}", delta_x, lanes) for i in range(n)]
    edges = [(f"s{i}", f"s{(i+1) % n}") for i in range(n)]
    return RoadGraph(nodes, edges, delta_t=delta_t)


def load_graph(path, delta_t=2.0):
    """Parse a road-graph text file.

    Format: a ``[nodes]`` section with ``id length_km lanes`` rows, then
    an ``[edges]`` section with ``from to`` rows.  ``#`` starts a
    comment.  The first violation is reported with its line number.
    """
    nodes = []
    edges = []
    node_lines = {}
    section = None
    section_line = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("["):
                if line not in ("[nodes]", "[edges]"):
                    raise GraphFormatError(f"unknown section {line!r}", lineno)
                section = line
                section_line[line] = lineno
                continue
            if section == "[nodes]":
                parts = line.split()
                if len(parts) != 3:
                    raise GraphFormatError(
                        f"node row needs 'id length_km lanes', got {line!r}", lineno
                    )
                nid = parts[0]
                try:
                    length = float(parts[1])
                    lanes = int(parts[2])
                except ValueError:
                    raise GraphFormatError(
                        f"cannot parse node row {line!r}", lineno
                    ) from None
                if nid in node_lines:
                    raise GraphFormatError(f"duplicate node id {nid!r}", lineno)
                if length <= 0.0:
                    raise GraphFormatError(
                        f"node {nid!r} has non-positive length {length}", lineno
                    )
                if lanes < 1:
                    raise GraphFormatError(
                        f"node {nid!r} has invalid lane count {lanes}", lineno
                    )
                node_lines[nid] = lineno
                nodes.append(RoadNode(nid, length, lanes))
            elif section == "[edges]":
                parts = line.split()
                if len(parts) != 2:
                    raise GraphFormatError(
                        f"edge row needs 'from to', got {line!r}", lineno
                    )
                a, b = parts
                if a not in node_lines:
                    raise GraphFormatError(f"edge references unknown node {a!r}", lineno)
                if b not in node_lines:
                    raise GraphFormatError(f"edge references unknown node {b!r}", lineno)
                if a == b:
                    raise GraphFormatError(f"self-loop on node {a!r}", lineno)
                edges.append((a, b))
            else:
                raise GraphFormatError(
                    f"content before any section header: {line!r}", lineno
                )
    if not nodes:
        raise GraphFormatError("no [nodes] section or it is empty", 1)
    lengths = {n.length_km for n in nodes}
    if len(lengths) != 1:
        bad = next(n for n in nodes if n.length_km != nodes[0].length_km)
        raise GraphFormatError(
            f"segment lengths must be uniform; node {bad.id!r} has {bad.length_km}",
            node_lines[bad.id],
        )
    try:
        return RoadGraph(nodes, edges, delta_t=delta_t)
    except ValidationError as exc:
        raise GraphFormatError(str(exc), section_line.get("[edges]", 1)) from None


@dataclass(frozen=True)
class NeighborhoodMask:
    """Directional reachability within `degree` hops.

    upstream[i, j] is true when a directed path of length <= degree runs
    j -> ... -> i; downstream[i, j] when it runs i -> ... -> j.  Both
    diagonals are true (a node is in its own neighborhood).
    """

    degree: int
    upstream: np.ndarray
    downstream: np.ndarray

    @property
    def reachable(self):
        return self.upstream | self.downstream


def adjacency_power(graph: RoadGraph, degree: int) -> NeighborhoodMask:
    """Boolean reachability out to `degree` hops, split by direction."""
    if degree < 1:
        raise ValidationError(f"degree must be >= 1, got {degree}")
    n = len(graph)
    adj = graph.adjacency
    down = np.eye(n, dtype=bool)
    power = np.eye(n, dtype=bool)
    for _ in range(degree):
        power = power @ adj
        down |= power
    up = np.eye(n, dtype=bool)
    power = np.eye(n, dtype=bool)
    adj_t = adj.T
    for _ in range(degree):
        power = power @ adj_t
        up |= power
    up.setflags(write=False)
    down.setflags(write=False)
    return NeighborhoodMask(degree=degree, upstream=up, downstream=down)


def select_degree(wave_speed, graph: RoadGraph, closed_lower=False) -> int:
    """Smallest hop count whose span covers one wave transit.

    `wave_speed` is in km/min.  Admissible k satisfy
    wave_speed * delta_t < k * delta_x < 2 * wave_speed * delta_t; the
    lower comparison becomes >= under ``closed_lower``.
    """
    if wave_speed <= 0.0:
        raise ValidationError(f"wave speed must be positive, got {wave_speed}")
    lower = wave_speed * graph.delta_t
    upper = 2.0 * wave_speed * graph.delta_t
    k_max = int(math.ceil(upper / graph.delta_x)) + 1
    for k in range(1, k_max + 1):
        span = k * graph.delta_x
        if span >= upper:
            break
        if span > lower or (closed_lower and span >= lower):
            return k
    raise DegreeSelectionError(
        f"no hop count k satisfies {lower} < k * {graph.delta_x} < {upper}; "
        "adjust the segment length delta_x or the sampling interval delta_t"
    )
