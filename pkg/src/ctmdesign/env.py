"""Exogenous randomness: copula-coupled random walks and Gaussian flows.

Sources and sinks act through the net-flow term of the density update.
Each source route carries an *attempted* flow q_aux for the step; the
realized q_net is q_aux truncated so that the updated density lands in
[0, rho_cap] exactly.  The truncation works in density units (the flow
bounds are scaled by the node length), so the stated density bounds
hold under the 1/l_v update.

Two environment families are provided:

* ``ArCopulaEnvironment`` (urban): two order-1 random walks
  q_ar(t+1) = q_ar(t) + eps(t+1), whose innovations are coupled through
  a Frank copula and transformed to normals by inverse CDF.
* ``GaussianPairsEnvironment`` (highway): independent per-step normal
  attempts N(xi, (psi * xi)^2) on source routes, each mirrored by a
  paired route carrying the same draw (optionally negated), plus
  deterministic constant flows.

All randomness flows through one numpy Generator per replicate, seeded
from (master seed, replicate index), so trajectories are reproducible
bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

__all__ = [
    "FrankCopula",
    "ArSourceSink",
    "GaussianSourceSink",
    "clamp_net_flow",
    "ArCopulaEnvironment",
    "GaussianPairsEnvironment",
    "replicate_rng",
]

#: |r| below this is treated as the independence limit of the Frank copula.
INDEPENDENCE_EPS = 1e-8

#: keep copula uniforms strictly inside (0, 1) for the normal inverse CDF
_U_CLIP = 1e-15


def replicate_rng(master_seed, *key):
    """Independent generator for one replicate of one estimation task."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(key)))


def _log_mix(a, b, s):
    """log(a + b * exp(s)) without overflow, for a, b >= 0."""
    if s <= 0:
        return math.log(a + b * math.exp(s))
    return s + math.log(a * math.exp(-s) + b)


class FrankCopula:
    """One-parameter dependence model on (0,1)^2.

    Interpolates from countermonotonicity (r -> -inf) through
    independence (r -> 0) to comonotonicity (r -> +inf).  Sampling uses
    the closed-form inverse of the conditional distribution given the
    first coordinate, so each pair consumes exactly two uniforms.
    """

    def __init__(self, r):
        self.r = float(r)

    @property
    def independent(self):
        return abs(self.r) <= INDEPENDENCE_EPS

    def sample(self, rng):
        """One pair (u1, u2) with uniform marginals and Frank dependence."""
        u1 = rng.random()
        p = rng.random()
        u1 = min(max(u1, _U_CLIP), 1.0 - _U_CLIP)
        p = min(max(p, _U_CLIP), 1.0 - _U_CLIP)
        if self.independent:
            return u1, p
        r = self.r
        # u2 = u1 - (1/r) * [log((1-p) + p e^{-r(1-u1)}) - log(p + (1-p) e^{-r u1})]
        num = _log_mix(1.0 - p, p, -r * (1.0 - u1))
        den = _log_mix(p, 1.0 - p, -r * u1)
        u2 = u1 - (num - den) / r
        return u1, min(max(u2, _U_CLIP), 1.0 - _U_CLIP)


@dataclass
class ArSourceSink:
    """Order-1 random-walk attempted flow on one route; starts at zero."""

    route: tuple
    sigma: float
    value: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("noise standard deviation must be non-negative")

    def step(self, eps):
        """Additive innovation update; returns the new attempted flow."""
        self.value += eps
        return self.value


@dataclass(frozen=True)
class GaussianSourceSink:
    """Independent per-step normal attempted flow N(xi, (psi*xi)^2).

    ``pair_route`` optionally names a second route that receives the
    same realization multiplied by ``pair_sign``.
    """

    route: tuple
    xi: float
    psi: float
    pair_route: tuple = None
    pair_sign: float = -1.0

    def __post_init__(self):
        if self.psi < 0:
            raise ValueError("coefficient of variation must be non-negative")


def clamp_net_flow(q_aux, rho, q_in, q_out, rho_cap, l_v):
    """Truncate an attempted net flow so the updated density lands in [0, rho_cap].

    Returns the realized q_net: equal to q_aux whenever the update stays
    inside the bounds, otherwise the value that attains the violated
    boundary exactly under rho' = rho + (q_in - q_out + q_net) / l_v.
    """
    lo = -rho * l_v - q_in + q_out
    hi = (rho_cap - rho) * l_v - q_in + q_out
    return min(max(q_aux, lo), hi)


class _EnvironmentBase:
    """Shared net-flow assembly over a compiled set of source routes."""

    def __init__(self, network, node_caps):
        self.network = network
        self.node_caps = node_caps  # per-node admissible density cap

    def _clamp_into(self, q_aux_map, rho, q_in, q_out):
        n = self.network.n_routes
        q_aux = np.zeros(n)
        q_net = np.zeros(n)
        for idx, aux in q_aux_map:
            v = self.network.routes[idx].via
            q_aux[idx] = aux
            q_net[idx] = clamp_net_flow(
                aux, rho[idx], q_in[idx], q_out[idx],
                self.node_caps[v], self.network.lengths[v])
        return q_aux, q_net


class ArCopulaEnvironment(_EnvironmentBase):
    """Copula-coupled random-walk sources on a pair of routes.

    One copula pair is drawn per step; its coordinates drive the
    innovations of the sources in listed order via the normal inverse
    CDF, eps_j = sigma_j * Phi^{-1}(u_j).
    """

    def __init__(self, network, sources, copula, node_caps, rng):
        super().__init__(network, node_caps)
        if len(sources) != 2:
            raise ValueError("the copula environment couples exactly two sources")
        self.sources = sources
        self.copula = copula
        self.rng = rng
        self._route_idx = [network.index_of(*src.route) for src in sources]

    def net_flows(self, t, rho, q_in, q_out):
        u1, u2 = self.copula.sample(self.rng)
        pairs = []
        for src, ridx, u in zip(self.sources, self._route_idx, (u1, u2)):
            eps = src.sigma * ndtri(u)
            pairs.append((ridx, src.step(eps)))
        return self._clamp_into(pairs, rho, q_in, q_out)


class GaussianPairsEnvironment(_EnvironmentBase):
    """Independent Gaussian attempted flows with mirrored partner routes.

    ``constants`` maps routes to deterministic attempted flows (e.g.
    fixed sinks).  Random sources are drawn in listed order, one normal
    per source per step.
    """

    def __init__(self, network, sources, constants, node_caps, rng):
        super().__init__(network, node_caps)
        self.sources = sources
        self.rng = rng
        self._compiled = []
        for src in sources:
            idx = network.index_of(*src.route)
            pidx = (network.index_of(*src.pair_route)
                    if src.pair_route is not None else None)
            self._compiled.append((src, idx, pidx))
        self._constants = [(network.index_of(*route), value)
                           for route, value in constants]

    def net_flows(self, t, rho, q_in, q_out):
        pairs = list(self._constants)
        for src, idx, pidx in self._compiled:
            draw = src.xi + src.psi * src.xi * ndtri(
                min(max(self.rng.random(), _U_CLIP), 1.0 - _U_CLIP))
            pairs.append((idx, draw))
            if pidx is not None:
                pairs.append((pidx, src.pair_sign * draw))
        return self._clamp_into(pairs, rho, q_in, q_out)
