"""Sending and receiving functions for the supported traffic-node types.

Every node type defines, per route (u, v, w) through it, a demand bound
S (the flow that may be sent out next step) and a supply bound R (the
flow that may be received).  All S respect the occupancy bound
S <= rho_route, all R are non-negative.

Node types and their parameters:

``highway``
    Separated lanes, no interaction between directions.
    S = min(s_max, a * rho),  R = max(b * (rho_max / 2 - c * rho), 0).

``bidirectional_interface``
    Opposing flows share the space (pedestrian corridors).
    R subtracts d times the counter-density.

``pedestrian_square``
    Fully symmetric n-arm area; R subtracts d times the densities of all
    routes sharing neither origin nor destination.

``simplified_intersection``
    Unsignalized junction; S is damped by exp(-zeta * total occupancy),
    R = max(b * (rho_max - c * total occupancy), 0).

``signalized_intersection``
    Four arms identified with Z_4 in counterclockwise order.  (u, v, u+1)
    is a right turn, (u, v, u+2) straight, (u, v, u+3) a left turn whose
    sending is additionally damped by the oncoming straight and oncoming
    left-turn densities.  Sendings scale with the signal adjustment LA
    (see signals module); receivings cap each approach at
    approach_capacity_fraction * rho_max (default one quarter).

``uni_roundabout`` / ``bi_roundabout``
    Four arms on Z_4.  Receivings subtract overlap-weighted densities of
    the other paths through the ring; the weights and per-path capacity
    fractions are tabulated in OVERLAP_TABLES and assembled into an
    OverlapMatrix at construction time.

``multipop_roundabout``
    Vehicles move as in the unidirectional roundabout but are blocked
    (indicator factors) by pedestrians crossing the relevant entrance or
    exit; pedestrians move to adjacent exits only, independently of the
    vehicles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .network import Route

__all__ = [
    "CellSpec",
    "MultiPopRoundabout",
    "OverlapMatrix",
    "CellError",
    "sending",
    "receiving",
    "multipop_sending_receiving",
    "overlap_matrix",
]

KINDS = (
    "highway",
    "bidirectional_interface",
    "pedestrian_square",
    "simplified_intersection",
    "signalized_intersection",
    "uni_roundabout",
    "bi_roundabout",
)

VEHICLE = "vehicle"
PEDESTRIAN = "pedestrian"


class CellError(ValueError):
    """Invalid cell parameters or a density map not covering the node."""


@dataclass(frozen=True)
class CellSpec:
    """Parameters of one traffic node.

    ``ccw`` gives the adjacent nodes in counterclockwise order and is
    required for the Z_4-structured kinds (signalized intersections and
    roundabouts).  ``approach_capacity_fraction`` is the share of
    rho_max available per approach of a signalized intersection.
    """

    kind: str
    s_max: float
    rho_max: float
    a: float
    b: float
    c: float = 1.0
    d: float = None
    zeta: float = None
    ccw: tuple = None
    approach_capacity_fraction: float = 0.25

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CellError(f"unknown cell kind {self.kind!r}")
        if not self.s_max > 0:
            raise CellError("s_max must be positive")
        if not self.rho_max > 0:
            raise CellError("rho_max must be positive")
        if not 0 < self.a <= 1:
            raise CellError("free-flow speed factor a must be in (0, 1]")
        if not 0 < self.b <= 1:
            raise CellError("congestion wave speed b must be in (0, 1]")
        if not self.c > 0:
            raise CellError("interaction parameter c must be positive")
        if self.kind in ("bidirectional_interface", "pedestrian_square",
                         "uni_roundabout", "bi_roundabout"):
            if self.d is None or not self.d > 0:
                raise CellError(f"kind {self.kind} requires d > 0")
        if self.kind in ("simplified_intersection", "signalized_intersection"):
            if self.zeta is None or not self.zeta > 0:
                raise CellError(f"kind {self.kind} requires zeta > 0")
        if self.kind in ("signalized_intersection", "uni_roundabout", "bi_roundabout"):
            if self.ccw is None or len(self.ccw) != 4:
                raise CellError(f"kind {self.kind} requires a ccw tuple of 4 arms")

    def position(self, node):
        try:
            return self.ccw.index(node)
        except ValueError:
            raise CellError(f"node {node} is not an arm of this cell") from None

    def arm(self, position):
        return self.ccw[position % 4]

    def hops(self, route):
        """Counterclockwise distance from entry arm to exit arm."""
        return (self.position(route.dst) - self.position(route.src)) % 4


@dataclass(frozen=True)
class MultiPopRoundabout:
    """Unidirectional vehicle roundabout shared with crossing pedestrians."""

    vehicle: CellSpec
    pedestrian_s_max: float
    pedestrian_rho_max: float
    pedestrian_a: float
    pedestrian_b: float
    pedestrian_c: float
    pedestrian_d: float

    def __post_init__(self):
        if self.vehicle.kind != "uni_roundabout":
            raise CellError("vehicle layer must be a uni_roundabout cell")
        if not (self.pedestrian_s_max > 0 and self.pedestrian_rho_max > 0):
            raise CellError("pedestrian capacities must be positive")
        if not (0 < self.pedestrian_a <= 1 and 0 < self.pedestrian_b <= 1):
            raise CellError("pedestrian speed factors must be in (0, 1]")
        if not (self.pedestrian_c > 0 and self.pedestrian_d > 0):
            raise CellError("pedestrian interaction parameters must be positive")


# ---------------------------------------------------------------------------
# Roundabout overlap geometry
# ---------------------------------------------------------------------------

# Overlap weights keyed by the hop count m of the receiving route.  Each entry
# ((src_off, dst_off), weight) refers to the interfering route whose entry and
# exit arms sit src_off and dst_off positions counterclockwise of the entry
# arm u. Vehicles are uniform over their path's ring segments, so the weight
# is the occupied fraction of the interfering path that lies on the receiving
# path. cap is the fraction of rho_max available to an m-hop path.
OVERLAP_TABLES = {
    "uni_roundabout": {
        1: (0.25, [((0, 2), 1 / 2), ((0, 3), 1 / 3), ((2, 1), 1 / 3),
                   ((3, 1), 1 / 2), ((3, 2), 1 / 3)]),
        2: (0.50, [((0, 1), 1.0), ((0, 3), 2 / 3), ((1, 2), 1.0),
                   ((1, 3), 1 / 2), ((1, 0), 1 / 3), ((2, 1), 1 / 3),
                   ((3, 1), 1 / 2), ((3, 2), 2 / 3)]),
        # the (2, 1) weight is 2/3 by the uniform-over-segments rule (the
        # interfering three-hop path shares two of its segments), restoring
        # the mirror symmetry with the (1, 0) term
        3: (0.75, [((0, 1), 1.0), ((0, 2), 1.0), ((1, 2), 1.0),
                   ((1, 3), 1.0), ((1, 0), 2 / 3), ((2, 3), 1.0),
                   ((2, 0), 1 / 2), ((2, 1), 2 / 3), ((3, 1), 1 / 2),
                   ((3, 2), 2 / 3)]),
    },
    # Pedestrians walk the short way around; the two-hop route is a tie
    # that the turning fractions split, and it sees the whole ring.
    "bi_roundabout": {
        1: (0.25, [((0, 2), 1 / 4), ((1, 0), 1.0), ((1, 3), 1 / 4),
                   ((2, 0), 1 / 4), ((3, 1), 1 / 4)]),
        2: (1.00, "all_disjoint"),
        3: (0.25, [((0, 2), 1 / 4), ((1, 3), 1 / 4), ((2, 0), 1 / 4),
                   ((3, 0), 1.0), ((3, 1), 1 / 4)]),
    },
}


class OverlapMatrix:
    """Path-overlap coefficients and capacity fractions of a roundabout cell.

    ``weights`` maps (receiving Route, interfering Route) -> fraction, the
    own route excluded (self-interaction is carried by c); ``capacity``
    maps Route -> fraction of rho_max available to that path.
    """

    def __init__(self, weights, capacity):
        self.weights = dict(weights)
        self.capacity = dict(capacity)


@lru_cache(maxsize=None)
def overlap_matrix(kind, ccw, via):
    """Build the OverlapMatrix of a roundabout node from the tabulated weights."""
    table = OVERLAP_TABLES[kind]
    weights = {}
    capacity = {}
    routes = [Route(ccw[s], via, ccw[t]) for s in range(4) for t in range(4) if s != t]
    for s in range(4):
        for t in range(4):
            if s == t:
                continue
            own = Route(ccw[s], via, ccw[t])
            m = (t - s) % 4
            cap, entries = table[m]
            capacity[own] = cap
            if entries == "all_disjoint":
                for other in routes:
                    if other != own and other.src != own.src and other.dst != own.dst:
                        weights[(own, other)] = 1.0
                continue
            for (src_off, dst_off), w in entries:
                other = Route(ccw[(s + src_off) % 4], via, ccw[(s + dst_off) % 4])
                weights[(own, other)] = w
    return OverlapMatrix(weights, capacity)


# ---------------------------------------------------------------------------
# Scalar sending / receiving
# ---------------------------------------------------------------------------

def _density(densities, route):
    try:
        return densities[route]
    except KeyError:
        raise CellError(f"density map is missing route {route}") from None


def _node_total(densities, via):
    return sum(rho for r, rho in densities.items() if r.via == via)


def sending(cell, route, densities, signal=None):
    """Demand bound S of ``route`` given the densities through its node.

    ``signal`` must be a SignalState when the cell is a signalized
    intersection and must be omitted otherwise.  The result satisfies
    0 <= S <= min(s_max, rho_route).
    """
    rho = _density(densities, route)
    if cell.kind == "signalized_intersection":
        if signal is None:
            raise CellError("signalized intersection requires a signal state")
        la = signal.la[route]
        if cell.hops(route) == 3:
            opp = cell.arm(cell.position(route.src) + 2)
            blocking = (_density(densities, Route(opp, route.via, route.src))
                        + _density(densities, Route(opp, route.via, route.dst)))
            return min(cell.s_max,
                       la * cell.a * rho * math.exp(-cell.zeta * blocking))
        return min(cell.s_max, la * cell.a * rho)
    if signal is not None:
        raise CellError(f"cell kind {cell.kind} does not take a signal state")
    if cell.kind == "simplified_intersection":
        total = _node_total(densities, route.via)
        return min(cell.s_max, cell.a * rho * math.exp(-cell.zeta * total))
    # highway, bidirectional_interface, pedestrian_square, roundabouts
    return min(cell.s_max, cell.a * rho)


def receiving(cell, route, densities):
    """Supply bound R of ``route`` given the densities through its node."""
    rho = _density(densities, route)
    if cell.kind == "highway":
        return max(cell.b * (cell.rho_max / 2 - cell.c * rho), 0.0)
    if cell.kind == "bidirectional_interface":
        counter = _density(densities, Route(route.dst, route.via, route.src))
        return max(cell.b * (cell.rho_max - cell.c * rho - cell.d * counter), 0.0)
    if cell.kind == "pedestrian_square":
        cross = sum(r_ for r, r_ in densities.items()
                    if r.via == route.via and r.src != route.src and r.dst != route.dst
                    and r != route)
        return max(cell.b * (cell.rho_max - cell.c * rho - cell.d * cross), 0.0)
    if cell.kind == "simplified_intersection":
        total = _node_total(densities, route.via)
        return max(cell.b * (cell.rho_max - cell.c * total), 0.0)
    if cell.kind == "signalized_intersection":
        approach = sum(r_ for r, r_ in densities.items()
                       if r.via == route.via and r.src == route.src)
        cap = cell.approach_capacity_fraction * cell.rho_max
        return max(cell.b * (cap - approach), 0.0)
    if cell.kind in ("uni_roundabout", "bi_roundabout"):
        om = overlap_matrix(cell.kind, tuple(cell.ccw), route.via)
        cross = sum(w * _density(densities, other)
                    for (own, other), w in om.weights.items() if own == route)
        cap = om.capacity[route] * cell.rho_max
        return max(cell.b * (cap - cell.c * rho - cell.d * cross), 0.0)
    raise CellError(f"no receiving rule for kind {cell.kind!r}")


def multipop_sending_receiving(cell, route, population, vehicle_densities,
                               pedestrian_densities):
    """(S, R) of one route for one population of a shared roundabout.

    Pedestrians have priority: vehicle bounds are the unidirectional
    roundabout values multiplied by the indicator that the pedestrian
    crossing densities at the exit (for S) or the entrance (for R)
    vanish.  Pedestrian bounds ignore the vehicle layer entirely.
    """
    if vehicle_densities is None or pedestrian_densities is None:
        raise CellError("both population density maps are required")
    spec = cell.vehicle
    if population == VEHICLE:
        w_pos = spec.position(route.dst)
        exit_cross = (
            _density(pedestrian_densities, Route(spec.arm(w_pos - 1), route.via, route.dst))
            + _density(pedestrian_densities, Route(route.dst, route.via, spec.arm(w_pos - 1)))
        )
        u_pos = spec.position(route.src)
        entry_cross = (
            _density(pedestrian_densities, Route(route.src, route.via, spec.arm(u_pos + 1)))
            + _density(pedestrian_densities, Route(spec.arm(u_pos + 1), route.via, route.src))
        )
        s = sending(spec, route, vehicle_densities) * (1.0 if exit_cross == 0 else 0.0)
        r = receiving(spec, route, vehicle_densities) * (1.0 if entry_cross == 0 else 0.0)
        return s, r
    if population == PEDESTRIAN:
        if spec.hops(route) not in (1, 3):
            raise CellError("pedestrians only move to adjacent exits")
        rho = _density(pedestrian_densities, route)
        counter = _density(pedestrian_densities, Route(route.dst, route.via, route.src))
        s = min(cell.pedestrian_s_max, cell.pedestrian_a * rho)
        r = max(cell.pedestrian_b * (cell.pedestrian_rho_max / 4
                                     - cell.pedestrian_c * rho
                                     - cell.pedestrian_d * counter), 0.0)
        return s, r
    raise CellError(f"unknown population {population!r}")


# ---------------------------------------------------------------------------
# Compiled vectorized evaluation (used by the simulation engine)
# ---------------------------------------------------------------------------

class CellTable:
    """Vectorized S/R evaluation over all routes of a network.

    Both bounds reduce to a common shape:

        S = min(s_max, a * la * rho * exp(-(E @ rho)))
        R = max(b * (cap - W @ rho), 0)

    where W carries the self term c and all cross terms, E carries the
    zeta-weighted damping terms, and la is the per-route signal
    adjustment (1 for unsignalized routes).  W and E are assembled once
    per network; la is filled in per step by the engine.
    """

    def __init__(self, network, node_cells):
        from scipy import sparse

        n = network.n_routes
        self.network = network
        self.s_max = np.zeros(n)
        self.a = np.zeros(n)
        self.b = np.zeros(n)
        self.cap = np.zeros(n)
        self.signal_routes = []  # (route index, node, axis flag in I)

        w_rows, w_cols, w_vals = [], [], []
        e_rows, e_cols, e_vals = [], [], []

        def w_add(i, j, v):
            w_rows.append(i)
            w_cols.append(j)
            w_vals.append(v)

        for v in range(network.n_nodes):
            idx = network.routes_through(v)
            if len(idx) == 0:
                continue
            cell = node_cells[v]
            if isinstance(cell, MultiPopRoundabout):
                raise CellError(
                    "multi-population cells are not supported by the single-"
                    "population engine; evaluate them via multipop_sending_receiving"
                )
            routes = [network.routes[i] for i in idx]
            local = {r: int(i) for r, i in zip(routes, idx)}
            self.s_max[idx] = cell.s_max
            self.a[idx] = cell.a
            self.b[idx] = cell.b

            if cell.kind == "highway":
                self.cap[idx] = cell.rho_max / 2
                for i in idx:
                    w_add(i, i, cell.c)
            elif cell.kind == "bidirectional_interface":
                self.cap[idx] = cell.rho_max
                for r, i in local.items():
                    w_add(i, i, cell.c)
                    counter = Route(r.dst, r.via, r.src)
                    if counter in local:
                        w_add(i, local[counter], cell.d)
            elif cell.kind == "pedestrian_square":
                self.cap[idx] = cell.rho_max
                for r, i in local.items():
                    w_add(i, i, cell.c)
                    for r2, j in local.items():
                        if r2 != r and r2.src != r.src and r2.dst != r.dst:
                            w_add(i, j, cell.d)
            elif cell.kind == "simplified_intersection":
                self.cap[idx] = cell.rho_max
                for i in idx:
                    for j in idx:
                        w_add(int(i), int(j), cell.c)
                        e_rows.append(int(i))
                        e_cols.append(int(j))
                        e_vals.append(cell.zeta)
            elif cell.kind == "signalized_intersection":
                self.cap[idx] = cell.approach_capacity_fraction * cell.rho_max
                for r, i in local.items():
                    for r2, j in local.items():
                        if r2.src == r.src:
                            w_add(i, j, 1.0)
                    if cell.hops(r) == 3:
                        opp = cell.arm(cell.position(r.src) + 2)
                        for dst in (r.src, r.dst):
                            j = local.get(Route(opp, v, dst))
                            if j is not None:
                                e_rows.append(i)
                                e_cols.append(j)
                                e_vals.append(cell.zeta)
                    in_axis_i = cell.position(r.src) % 2 == 0
                    self.signal_routes.append((i, v, in_axis_i))
            elif cell.kind in ("uni_roundabout", "bi_roundabout"):
                om = overlap_matrix(cell.kind, tuple(cell.ccw), v)
                for r, i in local.items():
                    self.cap[i] = om.capacity[r] * cell.rho_max
                    w_add(i, i, cell.c)
                for (own, other), wgt in om.weights.items():
                    if own in local and other in local:
                        w_add(local[own], local[other], cell.d * wgt)
            else:
                raise CellError(f"no engine rule for kind {cell.kind!r}")

        shape = (n, n)
        self.W = sparse.csr_matrix(
            (w_vals, (w_rows, w_cols)), shape=shape)
        self.E = sparse.csr_matrix(
            (e_vals, (e_rows, e_cols)), shape=shape)
        self._has_damping = self.E.nnz > 0
        # small networks run faster through dense BLAS than sparse dispatch
        self._dense = n <= 512
        if self._dense:
            self.W = np.asarray(self.W.todense())
            self.E = np.asarray(self.E.todense())

    def evaluate(self, rho, la=None):
        """Return (S, R) arrays for the whole network at densities ``rho``."""
        base = self.a * rho
        if la is not None:
            base = base * la
        if self._has_damping:
            base = base * np.exp(-(self.E @ rho))
        s = np.minimum(self.s_max, base)
        r = np.maximum(self.b * (self.cap - self.W @ rho), 0.0)
        return s, r
