"""Routing policies as pure decision functions.

Each ``route_*`` function maps (port, queue vector, graph, randomness) to a
destination server index or ``BLOCKED``.  The random stream contract is
fixed so that independent implementations replay identically:

* jfsq, jfiq, jsq, jiq, random consume exactly one uniform per decision
  (the tie-break draw), whether or not a tie actually occurred;
* jsq22 consumes two uniforms per within-class sample when the class has
  at least two servers (none when it has one), then one uniform per branch
  decision and one extra uniform only on an exact queue-length tie.

``routing_distribution`` returns the same policies as exact probability
maps, used by the stationary-distribution oracle.

Blocking rules: jfsq/jsq block only when every neighbor is full; jfiq, jiq
and random block when their random pick lands on a full server, without
resampling; jsq22 blocks when the finally selected server is full.
"""

from __future__ import annotations

from math import comb
from typing import Optional

import numpy as np

__all__ = [
    "BLOCKED",
    "POLICY_NAMES",
    "TopologyError",
    "route_jfsq",
    "route_jfiq",
    "route_jsq",
    "route_jiq",
    "route_random",
    "route_jsq22",
    "route",
    "routing_distribution",
]

BLOCKED = -1

POLICY_NAMES = ("jfsq", "jfiq", "jsq", "jiq", "jsq22", "random")


class TopologyError(ValueError):
    """Policy undefined for the given topology."""


def _pick(count: int, rng: np.random.Generator) -> int:
    return int(rng.random() * count)


def route_jfsq(port, queues, graph, server_rates, rng, buffer) -> int:
    """Shortest connected queue, fastest-rate tie-break, uniform among ties."""
    lo, hi = graph.indptr[port], graph.indptr[port + 1]
    nbrs = graph.indices[lo:hi]
    best_q = -1
    best_mu = -1.0
    count = 0
    for r in nbrs:
        q = queues[r]
        if count == 0 or q < best_q:
            best_q, best_mu, count = q, server_rates[r], 1
        elif q == best_q:
            mu = server_rates[r]
            if mu > best_mu:
                best_mu, count = mu, 1
            elif mu == best_mu:
                count += 1
    idx = _pick(count, rng)
    if best_q == buffer:
        return BLOCKED
    seen = 0
    for r in nbrs:
        if queues[r] == best_q and server_rates[r] == best_mu:
            if seen == idx:
                return int(r)
            seen += 1
    raise AssertionError("tie scan out of sync")


def route_jsq(port, queues, graph, server_rates, rng, buffer) -> int:
    """Shortest connected queue, uniform among all ties (rates ignored)."""
    lo, hi = graph.indptr[port], graph.indptr[port + 1]
    nbrs = graph.indices[lo:hi]
    best_q = -1
    count = 0
    for r in nbrs:
        q = queues[r]
        if count == 0 or q < best_q:
            best_q, count = q, 1
        elif q == best_q:
            count += 1
    idx = _pick(count, rng)
    if best_q == buffer:
        return BLOCKED
    seen = 0
    for r in nbrs:
        if queues[r] == best_q:
            if seen == idx:
                return int(r)
            seen += 1
    raise AssertionError("tie scan out of sync")


def route_jfiq(port, queues, graph, server_rates, rng, buffer) -> int:
    """Fastest idle neighbor; with no idle neighbor, a uniformly random
    neighbor, blocking if that pick is full."""
    lo, hi = graph.indptr[port], graph.indptr[port + 1]
    nbrs = graph.indices[lo:hi]
    best_mu = -1.0
    count = 0
    for r in nbrs:
        if queues[r] == 0:
            mu = server_rates[r]
            if mu > best_mu:
                best_mu, count = mu, 1
            elif mu == best_mu:
                count += 1
    if count > 0:
        idx = _pick(count, rng)
        seen = 0
        for r in nbrs:
            if queues[r] == 0 and server_rates[r] == best_mu:
                if seen == idx:
                    return int(r)
                seen += 1
        raise AssertionError("tie scan out of sync")
    r = int(nbrs[_pick(len(nbrs), rng)])
    return BLOCKED if queues[r] == buffer else r


def route_jiq(port, queues, graph, server_rates, rng, buffer) -> int:
    """Uniform idle neighbor; else uniform neighbor, blocking on a full pick."""
    lo, hi = graph.indptr[port], graph.indptr[port + 1]
    nbrs = graph.indices[lo:hi]
    n_idle = 0
    for r in nbrs:
        if queues[r] == 0:
            n_idle += 1
    if n_idle > 0:
        idx = _pick(n_idle, rng)
        seen = 0
        for r in nbrs:
            if queues[r] == 0:
                if seen == idx:
                    return int(r)
                seen += 1
        raise AssertionError("tie scan out of sync")
    r = int(nbrs[_pick(len(nbrs), rng)])
    return BLOCKED if queues[r] == buffer else r


def route_random(port, queues, graph, server_rates, rng, buffer) -> int:
    lo, hi = graph.indptr[port], graph.indptr[port + 1]
    nbrs = graph.indices[lo:hi]
    r = int(nbrs[_pick(len(nbrs), rng)])
    return BLOCKED if queues[r] == buffer else r


def _sample_within(lo: int, size: int, rng: np.random.Generator) -> tuple[int, ...]:
    """Two distinct uniform indices from [lo, lo+size); all of them if fewer."""
    if size >= 2:
        i = _pick(size, rng)
        j = _pick(size - 1, rng)
        if j >= i:
            j += 1
        return (lo + i, lo + j)
    return (lo,)


def _shorter(cand: tuple[int, ...], queues, rng) -> int:
    if len(cand) == 1:
        return cand[0]
    a, b = cand
    if queues[a] < queues[b]:
        return a
    if queues[b] < queues[a]:
        return b
    return cand[_pick(2, rng)]


def check_jsq22_topology(graph, class_of) -> int:
    """jsq22 needs exactly two classes and full port connectivity; returns
    the fast-class size."""
    n_classes = int(np.max(class_of)) + 1 if len(class_of) else 0
    fully = np.array_equal(graph.port_degrees(), np.full(graph.num_ports, graph.num_servers))
    if n_classes != 2 or not fully:
        raise TopologyError("JSQ-(2,2) undefined for this topology")
    return int(np.searchsorted(class_of, 1))


def route_jsq22(port, queues, graph, class_of, pf, ps, rng, buffer, n_fast=None) -> int:
    """Sample two fast and two slow servers; prefer idle fast, then idle
    slow with probability ps, then the shorter sampled queue mixed by
    (pf, ps)."""
    if n_fast is None:
        n_fast = check_jsq22_topology(graph, class_of)
    n = graph.num_servers
    fast = _sample_within(0, n_fast, rng)
    slow = _sample_within(n_fast, n - n_fast, rng)
    idle_fast = tuple(r for r in fast if queues[r] == 0)
    if idle_fast:
        r = idle_fast[_pick(len(idle_fast), rng)]
    else:
        idle_slow = tuple(r for r in slow if queues[r] == 0)
        if idle_slow:
            if rng.random() < ps:
                r = idle_slow[_pick(len(idle_slow), rng)]
            else:
                r = _shorter(fast, queues, rng)
        else:
            if rng.random() < pf:
                r = _shorter(fast, queues, rng)
            else:
                r = _shorter(slow, queues, rng)
    return BLOCKED if queues[r] == buffer else int(r)


def route(
    policy: str,
    port,
    queues,
    graph,
    server_rates,
    rng,
    buffer,
    class_of=None,
    pf: float = 1.0,
    ps: float = 0.0,
) -> int:
    if policy == "jfsq":
        return route_jfsq(port, queues, graph, server_rates, rng, buffer)
    if policy == "jfiq":
        return route_jfiq(port, queues, graph, server_rates, rng, buffer)
    if policy == "jsq":
        return route_jsq(port, queues, graph, server_rates, rng, buffer)
    if policy == "jiq":
        return route_jiq(port, queues, graph, server_rates, rng, buffer)
    if policy == "random":
        return route_random(port, queues, graph, server_rates, rng, buffer)
    if policy == "jsq22":
        return route_jsq22(
            port, queues, graph, class_of, pf, ps, rng, buffer
        )
    raise ValueError(f"unknown policy {policy!r}")


# ---------------------------------------------------------------------------
# closed-form routing distributions (for the exact CTMC oracle)
# ---------------------------------------------------------------------------


def _uniform_over(targets, queues, buffer) -> tuple[dict[int, float], float]:
    """Uniform distribution; mass on full servers becomes blocking mass."""
    dist: dict[int, float] = {}
    block = 0.0
    w = 1.0 / len(targets)
    for r in targets:
        if queues[r] == buffer:
            block += w
        else:
            dist[r] = dist.get(r, 0.0) + w
    return dist, block


def routing_distribution(
    policy: str,
    port: int,
    queues,
    graph,
    server_rates,
    buffer: int,
    class_of=None,
    pf: float = 1.0,
    ps: float = 0.0,
) -> tuple[dict[int, float], float]:
    """Probability map server -> routing probability plus blocking mass.

    Matches the corresponding sampler exactly: uniform over tie sets, and
    for jsq22 an exact enumeration of the within-class sample outcomes.
    """
    lo, hi = graph.indptr[port], graph.indptr[port + 1]
    nbrs = [int(r) for r in graph.indices[lo:hi]]
    if policy == "jfsq":
        best_q = min(queues[r] for r in nbrs)
        if best_q == buffer:
            return {}, 1.0
        short = [r for r in nbrs if queues[r] == best_q]
        best_mu = max(server_rates[r] for r in short)
        ties = [r for r in short if server_rates[r] == best_mu]
        return _uniform_over(ties, queues, buffer)
    if policy == "jsq":
        best_q = min(queues[r] for r in nbrs)
        if best_q == buffer:
            return {}, 1.0
        ties = [r for r in nbrs if queues[r] == best_q]
        return _uniform_over(ties, queues, buffer)
    if policy == "jfiq":
        idle = [r for r in nbrs if queues[r] == 0]
        if idle:
            best_mu = max(server_rates[r] for r in idle)
            ties = [r for r in idle if server_rates[r] == best_mu]
            return _uniform_over(ties, queues, buffer)
        return _uniform_over(nbrs, queues, buffer)
    if policy == "jiq":
        idle = [r for r in nbrs if queues[r] == 0]
        if idle:
            return _uniform_over(idle, queues, buffer)
        return _uniform_over(nbrs, queues, buffer)
    if policy == "random":
        return _uniform_over(nbrs, queues, buffer)
    if policy == "jsq22":
        return _jsq22_distribution(
            port, queues, graph, class_of, pf, ps, buffer
        )
    raise ValueError(f"unknown policy {policy!r}")


def _pairs(lo: int, size: int):
    if size >= 2:
        return [
            (lo + i, lo + j) for i in range(size) for j in range(i + 1, size)
        ]
    return [(lo,)]


def _shorter_dist(cand, queues) -> dict[int, float]:
    if len(cand) == 1:
        return {cand[0]: 1.0}
    a, b = cand
    if queues[a] < queues[b]:
        return {a: 1.0}
    if queues[b] < queues[a]:
        return {b: 1.0}
    return {a: 0.5, b: 0.5}


def _jsq22_distribution(
    port, queues, graph, class_of, pf, ps, buffer
) -> tuple[dict[int, float], float]:
    n_fast = check_jsq22_topology(graph, class_of)
    n = graph.num_servers
    fast_pairs = _pairs(0, n_fast)
    slow_pairs = _pairs(n_fast, n - n_fast)
    outer = 1.0 / (len(fast_pairs) * len(slow_pairs))
    dist: dict[int, float] = {}
    block = 0.0

    def add(sub: dict[int, float], weight: float) -> None:
        nonlocal block
        for r, p in sub.items():
            mass = weight * p
            if queues[r] == buffer:
                block += mass
            else:
                dist[r] = dist.get(r, 0.0) + mass

    for fast in fast_pairs:
        idle_fast = [r for r in fast if queues[r] == 0]
        for slow in slow_pairs:
            if idle_fast:
                add({r: 1.0 / len(idle_fast) for r in idle_fast}, outer)
                continue
            idle_slow = [r for r in slow if queues[r] == 0]
            if idle_slow:
                add({r: ps / len(idle_slow) for r in idle_slow}, outer)
                sub = _shorter_dist(fast, queues)
                add({r: (1.0 - ps) * p for r, p in sub.items()}, outer)
            else:
                sub_f = _shorter_dist(fast, queues)
                add({r: pf * p for r, p in sub_f.items()}, outer)
                sub_s = _shorter_dist(slow, queues)
                add({r: ps * p for r, p in sub_s.items()}, outer)
    return dist, block
