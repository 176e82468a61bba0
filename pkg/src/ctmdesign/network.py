"""Traffic graph, route-indexed state, and conservation dynamics.

UNIT CONVENTIONS
----------------
Time is discrete, t = 0, 1, 2, ...  One step corresponds to ``t_real``
seconds of wall-clock time (a scenario-level constant that only matters
for signal ramp-up and reporting).

Space is normalized: a node v has a dimensionless length ``l_v > 0``
expressing its size relative to the reference cell (l = 1).  Densities
are vehicles per normalized cell length, flows are vehicles per time
step, so one unit of flow into a node of length l raises its density
by 1/l.

A *route* (u, v, w) is a direction of travel through node v, arriving
from u and departing toward w.  Routes are the atomic unit carrying a
density and flows.  U-turn routes (w == u) are excluded by default and
can be enabled per node.

The density update per route is

    rho(t+1) = rho(t) + (q_in - q_out + q_net) / l_v

which conserves the total mass  sum_routes l_v * rho  exactly when the
net flows vanish and inflows are aggregated from outflows with
row-normalized turning fractions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Route",
    "TurningFractions",
    "TrafficNetwork",
    "DensityState",
    "FlowRecord",
    "NetworkError",
    "update_density",
    "aggregate_inflows",
    "total_mass",
]

#: densities this far below zero are treated as floating-point noise and
#: clamped; anything larger indicates a solver bug and raises.
NEGATIVE_DENSITY_TOLERANCE = 1e-12

#: turning-fraction rows must sum to one within this tolerance.
TURNING_ROW_TOLERANCE = 1e-12


class NetworkError(ValueError):
    """Invalid network structure, route, or state."""


@dataclass(frozen=True, order=True)
class Route:
    """Direction of travel through node ``via``: from ``src`` toward ``dst``."""

    src: int
    via: int
    dst: int

    def __iter__(self):
        return iter((self.src, self.via, self.dst))

    def __repr__(self):
        return f"({self.src},{self.via},{self.dst})"


class TurningFractions:
    """Fractions f[(route, w)] of a route's outflow continuing toward w.

    For every route (x, u, v) the fractions over w in O(v) must sum to
    one (first-in-first-out conservation).  Fractions may be supplied as
    an explicit table or generated uniformly over the non-U-turn exits.
    """

    def __init__(self, table):
        self._table = dict(table)

    @classmethod
    def uniform_no_uturn(cls, network):
        """Split every route's outflow equally over its end node's exits.

        U-turn continuations are excluded except at nodes that opt in.
        """
        table = {}
        for route in network.routes:
            exits = [w for w in network.neighbors_out(route.dst)
                     if w != route.via or network.allows_uturn(route.dst)]
            if not exits:
                continue
            f = 1.0 / len(exits)
            for w in exits:
                table[(route, w)] = f
        return cls(table)

    def fraction(self, route, w):
        return self._table.get((route, w), 0.0)

    def validate(self, network):
        for route in network.routes:
            exits = [w for w in network.neighbors_out(route.dst) if w != route.via
                     or network.allows_uturn(route.dst)]
            if not exits:
                continue
            total = sum(self.fraction(route, w) for w in exits)
            if abs(total - 1.0) > TURNING_ROW_TOLERANCE:
                raise NetworkError(
                    f"turning fractions out of route {route} sum to {total!r}, expected 1"
                )

    def items(self):
        return self._table.items()


class TrafficNetwork:
    """Directed traffic graph with per-node lengths and enumerated routes.

    The network is immutable after construction and safe to share across
    concurrent simulation replicates.  Routes are enumerated once, in a
    deterministic order (sorted by (via, src, dst)), and all route-indexed
    state is stored as dense arrays over that enumeration.

    Parameters
    ----------
    n_nodes : int
        Number of nodes; node ids are 0 .. n_nodes - 1.
    edges : iterable of (int, int)
        Directed edges.
    lengths : mapping or sequence
        Positive length l_v per node.
    allow_uturn : set of int, optional
        Nodes at which routes with w == u are admissible.
    """

    def __init__(self, n_nodes, edges, lengths, allow_uturn=None):
        if n_nodes <= 0:
            raise NetworkError("network needs at least one node")
        self.n_nodes = int(n_nodes)
        adj = np.zeros((n_nodes, n_nodes), dtype=bool)
        for u, v in edges:
            self._check_node(u)
            self._check_node(v)
            if u == v:
                raise NetworkError(f"self-loop edge ({u},{u}) not allowed")
            adj[u, v] = True
        self.adjacency = adj
        self.adjacency.setflags(write=False)

        self.lengths = np.zeros(n_nodes)
        for v in range(n_nodes):
            l_v = lengths[v]
            if not (l_v > 0) or not math.isfinite(l_v):
                raise NetworkError(f"length of node {v} must be positive, got {l_v}")
            self.lengths[v] = l_v
        self.lengths.setflags(write=False)

        self._allow_uturn = frozenset(allow_uturn or ())
        self._in = [tuple(np.flatnonzero(adj[:, v])) for v in range(n_nodes)]
        self._out = [tuple(np.flatnonzero(adj[v, :])) for v in range(n_nodes)]

        routes = []
        for v in range(n_nodes):
            for u in self._in[v]:
                for w in self._out[v]:
                    if w == u and v not in self._allow_uturn:
                        continue
                    routes.append(Route(u, v, w))
        routes.sort(key=lambda r: (r.via, r.src, r.dst))
        self.routes = tuple(routes)
        self.route_index = {r: i for i, r in enumerate(self.routes)}
        self.route_via = np.array([r.via for r in self.routes], dtype=np.intp)
        self.route_via.setflags(write=False)
        self.route_lengths = self.lengths[self.route_via]
        self.route_lengths.setflags(write=False)

    # -- structure queries -------------------------------------------------

    def _check_node(self, v):
        if not (0 <= v < self.n_nodes):
            raise NetworkError(f"invalid node id {v} (n_nodes={self.n_nodes})")

    def allows_uturn(self, v):
        return v in self._allow_uturn

    def neighbors_in(self, v):
        """Set of nodes u with an edge (u, v): the nodes which can reach v."""
        self._check_node(v)
        return set(self._in[v])

    def neighbors_out(self, v):
        """Set of nodes w with an edge (v, w): the nodes reachable from v."""
        self._check_node(v)
        return set(self._out[v])

    def routes_through(self, v):
        """Route indices through node v, in enumeration order."""
        self._check_node(v)
        return np.flatnonzero(self.route_via == v)

    @property
    def n_routes(self):
        return len(self.routes)

    def index_of(self, src, via, dst):
        try:
            return self.route_index[Route(src, via, dst)]
        except KeyError:
            raise NetworkError(f"route ({src},{via},{dst}) does not exist") from None


@dataclass
class DensityState:
    """Per-route densities at a time index.  Owned by exactly one replicate."""

    rho: np.ndarray
    time_index: int = 0

    def copy(self):
        return DensityState(self.rho.copy(), self.time_index)

    def validate(self):
        if not np.all(np.isfinite(self.rho)):
            raise NetworkError("non-finite density encountered")
        if np.any(self.rho < 0):
            raise NetworkError("negative density encountered")


@dataclass
class FlowRecord:
    """Realized flows of one step, vehicles per time step per route."""

    q_in: np.ndarray
    q_out: np.ndarray
    q_net: np.ndarray
    q_aux: np.ndarray = field(default=None)


def update_density(rho, l_v, q_in, q_out, q_net):
    """One-route density update: rho + (q_in - q_out + q_net) / l_v.

    The caller guarantees non-negativity of the result through the flow
    constraints and net-flow clamping; this function only checks inputs.
    """
    values = (rho, l_v, q_in, q_out, q_net)
    if not all(math.isfinite(x) for x in values):
        raise NetworkError(f"non-finite input to density update: {values}")
    if l_v <= 0:
        raise NetworkError(f"node length must be positive, got {l_v}")
    return rho + (q_in - q_out + q_net) / l_v


def aggregate_inflows(outflows, turning, network):
    """Aggregate route inflows from upstream outflows and turning fractions.

    q_in[(u, v, w)] = sum over x in I(u) of  f[(x,u,v) -> w] * q_out[(x,u,v)].

    ``outflows`` maps Route -> flow; the result has the same form.  Turning
    rows are validated to sum to one for every route with positive exits.
    """
    by_route = {}
    for route, q in outflows.items():
        exits = [w for w in network.neighbors_out(route.dst)
                 if w != route.via or network.allows_uturn(route.dst)]
        if not exits:
            continue
        total = sum(turning.fraction(route, w) for w in exits)
        if abs(total - 1.0) > TURNING_ROW_TOLERANCE:
            raise NetworkError(
                f"turning fractions out of route {route} sum to {total!r}, expected 1"
            )
        for w in exits:
            key = Route(route.via, route.dst, w)
            by_route[key] = by_route.get(key, 0.0) + turning.fraction(route, w) * q
    result = {}
    for route in network.routes:
        result[route] = by_route.get(route, 0.0)
    return result


def total_mass(state, network):
    """Total vehicle count: sum over routes of l_v * rho."""
    return float(np.dot(network.route_lengths, state.rho))


def clamp_densities(rho):
    """Zero out negative densities below the noise tolerance; raise otherwise."""
    worst = rho.min() if len(rho) else 0.0
    if worst < -NEGATIVE_DENSITY_TOLERANCE:
        raise NetworkError(
            f"density {worst} below -{NEGATIVE_DENSITY_TOLERANCE}: solver bug"
        )
    np.maximum(rho, 0.0, out=rho)
    return rho
