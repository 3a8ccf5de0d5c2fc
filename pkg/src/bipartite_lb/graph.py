"""Bipartite compatibility graphs: construction, checking, serialization.

Graphs are stored in CSR form twice (port -> servers and server -> ports)
with sorted neighbor lists.  Three random constructions are provided: one
for heterogeneous port rates, one for homogeneous rates, and the simpler
independent-edge model used by the scaling experiments.  The
well-connectedness condition bounds, for every large enough subset of fast
servers, the arrival rate that cannot reach the subset; it can be verified
exactly by subset enumeration at small N or falsified by random sampling at
larger N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Optional, Sequence

import numpy as np

from .model import SystemSpec, TheoryParams

__all__ = [
    "BipartiteGraph",
    "ConnectivityReport",
    "EnumerationBudgetError",
    "deficiency",
    "check_well_connected_exact",
    "check_well_connected_sampled",
    "generate_heterogeneous",
    "generate_homogeneous",
    "generate_sim_random",
    "write_graph",
    "read_graph",
]

DEFAULT_ENUMERATION_BUDGET = 10_000_000

# Edge-sampling chunk: bounds the uniform matrix drawn at once during
# random generation (rows x N doubles).
_CHUNK_DOUBLES = 4_000_000


class EnumerationBudgetError(RuntimeError):
    """Exact subset enumeration would exceed the configured budget."""


@dataclass
class BipartiteGraph:
    """CSR adjacency between L ports and N servers, both directions."""

    num_ports: int
    num_servers: int
    indptr: np.ndarray  # int64, len L+1
    indices: np.ndarray  # int32, server indices, sorted within each port
    r_indptr: np.ndarray  # int64, len N+1
    r_indices: np.ndarray  # int32, port indices, sorted within each server
    meta: dict = field(default_factory=dict)

    @property
    def edge_count(self) -> int:
        return int(self.indices.size)

    def port_neighbors(self, port: int) -> np.ndarray:
        return self.indices[self.indptr[port] : self.indptr[port + 1]]

    def server_neighbors(self, server: int) -> np.ndarray:
        return self.r_indices[self.r_indptr[server] : self.r_indptr[server + 1]]

    def port_degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def server_degrees(self) -> np.ndarray:
        return np.diff(self.r_indptr)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BipartiteGraph):
            return NotImplemented
        return (
            self.num_ports == other.num_ports
            and self.num_servers == other.num_servers
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    @classmethod
    def from_port_lists(
        cls,
        num_ports: int,
        num_servers: int,
        neighbors: Sequence[Iterable[int]],
        meta: Optional[dict] = None,
    ) -> "BipartiteGraph":
        if len(neighbors) != num_ports:
            raise ValueError("one neighbor list per port required")
        indptr = np.zeros(num_ports + 1, dtype=np.int64)
        chunks = []
        for p, nbrs in enumerate(neighbors):
            arr = np.unique(np.asarray(list(nbrs), dtype=np.int32))
            if arr.size and (arr[0] < 0 or arr[-1] >= num_servers):
                raise ValueError("server index out of range")
            chunks.append(arr)
            indptr[p + 1] = indptr[p] + arr.size
        indices = (
            np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int32)
        ).astype(np.int32)
        r_indptr, r_indices = _transpose(num_ports, num_servers, indptr, indices)
        return cls(
            num_ports=num_ports,
            num_servers=num_servers,
            indptr=indptr,
            indices=indices,
            r_indptr=r_indptr,
            r_indices=r_indices,
            meta=dict(meta or {}),
        )

    @classmethod
    def fully_connected(cls, num_ports: int, num_servers: int) -> "BipartiteGraph":
        indptr = np.arange(num_ports + 1, dtype=np.int64) * num_servers
        indices = np.tile(np.arange(num_servers, dtype=np.int32), num_ports)
        r_indptr = np.arange(num_servers + 1, dtype=np.int64) * num_ports
        r_indices = np.tile(np.arange(num_ports, dtype=np.int32), num_servers)
        return cls(num_ports, num_servers, indptr, indices, r_indptr, r_indices, {})


def _transpose(
    num_ports: int, num_servers: int, indptr: np.ndarray, indices: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(indices, minlength=num_servers)
    r_indptr = np.zeros(num_servers + 1, dtype=np.int64)
    np.cumsum(counts, out=r_indptr[1:])
    port_of_edge = np.repeat(
        np.arange(num_ports, dtype=np.int32), np.diff(indptr)
    )
    order = np.argsort(indices, kind="stable")  # keeps ports sorted per server
    r_indices = port_of_edge[order]
    return r_indptr, r_indices


# ---------------------------------------------------------------------------
# serialization: line 1 "L N", then per port "port degree s1 s2 ... sk"
# ---------------------------------------------------------------------------


def write_graph(graph: BipartiteGraph, path: str) -> None:
    """Plain-text format; 0-based indices; byte-exact round trip."""
    with open(path, "w", newline="\n") as fh:
        fh.write(f"{graph.num_ports} {graph.num_servers}\n")
        for p in range(graph.num_ports):
            nbrs = graph.port_neighbors(p)
            row = " ".join(str(int(s)) for s in nbrs)
            if row:
                fh.write(f"{p} {nbrs.size} {row}\n")
            else:
                fh.write(f"{p} 0\n")


def read_graph(path: str) -> BipartiteGraph:
    with open(path) as fh:
        first = fh.readline().split()
        if len(first) != 2:
            raise ValueError("graph file header must be 'L N'")
        num_ports, num_servers = int(first[0]), int(first[1])
        lists: list[np.ndarray] = [None] * num_ports  # type: ignore[list-item]
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            p, deg = int(parts[0]), int(parts[1])
            nbrs = np.asarray([int(x) for x in parts[2:]], dtype=np.int32)
            if nbrs.size != deg:
                raise ValueError(f"degree mismatch on port {p}")
            lists[p] = nbrs
    if any(v is None for v in lists):
        raise ValueError("graph file missing port rows")
    return BipartiteGraph.from_port_lists(num_ports, num_servers, lists)


# ---------------------------------------------------------------------------
# deficiency and well-connectedness
# ---------------------------------------------------------------------------


def deficiency(
    graph: BipartiteGraph, port_rates: np.ndarray, subset: Iterable[int]
) -> float:
    """Total arrival rate of ports with no neighbor inside ``subset``."""
    subset = list(subset)
    if not subset:
        raise ValueError("empty subset")
    mark = np.zeros(graph.num_servers, dtype=bool)
    mark[np.asarray(subset, dtype=np.int64)] = True
    port_rates = np.asarray(port_rates, dtype=np.float64)
    total = 0.0
    for p in range(graph.num_ports):
        nbrs = graph.port_neighbors(p)
        if not mark[nbrs].any():
            total += port_rates[p]
    return float(total)


@dataclass(frozen=True)
class ConnectivityReport:
    """Outcome of a well-connectedness check.

    Condition j asks that every subset of the first K-1 (j=1) or first K
    (j=2) server classes of size >= ceil(N p_j) misses at most N d~_j of
    arrival rate.  ``method`` records whether subsets were enumerated
    exhaustively or sampled (sampling can only certify violations).
    """

    condition1_ok: bool
    condition2_ok: bool
    worst_subset_1: Optional[tuple[int, ...]]
    worst_subset_2: Optional[tuple[int, ...]]
    worst_deficiency_1: float
    worst_deficiency_2: float
    method: str
    required_size_1: int = 0
    required_size_2: int = 0
    threshold_1: float = 0.0
    threshold_2: float = 0.0

    @property
    def ok(self) -> bool:
        return self.condition1_ok and self.condition2_ok


def _condition_setup(spec: SystemSpec, theory: TheoryParams):
    n = spec.n_servers
    offsets = spec.class_offsets
    pool1 = range(int(offsets[theory.k - 1]))  # classes < K
    pool2 = range(int(offsets[theory.k]))  # classes <= K
    size1 = math.ceil(n * theory.p1)
    size2 = math.ceil(n * theory.p2)
    thr1 = n * theory.d_tilde_1
    thr2 = n * theory.d_tilde_2
    return (list(pool1), size1, thr1), (list(pool2), size2, thr2)


def _port_rate_by_mask(
    graph: BipartiteGraph, port_rates: np.ndarray, pool: list[int]
) -> dict[int, float]:
    """Aggregate port rates by their neighbor bitmask restricted to ``pool``.

    Ports sharing a restricted neighborhood are interchangeable for
    deficiency evaluation, which shrinks the inner loop of the enumeration.
    """
    pos = {s: i for i, s in enumerate(pool)}
    agg: dict[int, float] = {}
    for p in range(graph.num_ports):
        mask = 0
        for s in graph.port_neighbors(p):
            i = pos.get(int(s))
            if i is not None:
                mask |= 1 << i
        agg[mask] = agg.get(mask, 0.0) + float(port_rates[p])
    return agg


def _max_deficiency_exact(
    graph: BipartiteGraph,
    port_rates: np.ndarray,
    pool: list[int],
    size: int,
) -> tuple[float, Optional[tuple[int, ...]]]:
    if size > len(pool):
        return 0.0, None  # no qualifying subset: condition vacuously holds
    agg = _port_rate_by_mask(graph, port_rates, pool)
    masks = list(agg.keys())
    rates = list(agg.values())
    worst = -1.0
    worst_subset: Optional[tuple[int, ...]] = None
    for combo in combinations(range(len(pool)), size):
        imask = 0
        for i in combo:
            imask |= 1 << i
        d = 0.0
        for mask, rate in zip(masks, rates):
            if not (mask & imask):
                d += rate
        if d > worst:
            worst = d
            worst_subset = tuple(pool[i] for i in combo)
    return max(worst, 0.0), worst_subset


def check_well_connected_exact(
    graph: BipartiteGraph,
    spec: SystemSpec,
    theory: TheoryParams,
    budget: int = DEFAULT_ENUMERATION_BUDGET,
) -> ConnectivityReport:
    """Enumerate all subsets of the required size for each condition.

    Deficiency is non-increasing as the subset grows, so checking subsets of
    exactly the minimal size is sufficient.
    """
    (pool1, size1, thr1), (pool2, size2, thr2) = _condition_setup(spec, theory)
    for pool, size in ((pool1, size1), (pool2, size2)):
        if size <= len(pool) and math.comb(len(pool), size) > budget:
            raise EnumerationBudgetError("exact check infeasible, use sampled")
    rates = spec.port_rates
    worst1, sub1 = _max_deficiency_exact(graph, rates, pool1, size1)
    worst2, sub2 = _max_deficiency_exact(graph, rates, pool2, size2)
    return ConnectivityReport(
        condition1_ok=worst1 <= thr1,
        condition2_ok=worst2 <= thr2,
        worst_subset_1=sub1,
        worst_subset_2=sub2,
        worst_deficiency_1=worst1,
        worst_deficiency_2=worst2,
        method="exact",
        required_size_1=size1,
        required_size_2=size2,
        threshold_1=thr1,
        threshold_2=thr2,
    )


def check_well_connected_sampled(
    graph: BipartiteGraph,
    spec: SystemSpec,
    theory: TheoryParams,
    trials: int,
    seed: int | np.random.SeedSequence = 0,
) -> ConnectivityReport:
    """Randomized falsifier: samples ``trials`` minimal-size subsets per
    condition and reports the worst deficiency found.  A pass means "no
    violation found", not a proof of well-connectedness.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.Generator(np.random.Philox(_as_seedseq(seed)))
    (pool1, size1, thr1), (pool2, size2, thr2) = _condition_setup(spec, theory)
    rates = spec.port_rates

    def sample_worst(pool, size):
        if size > len(pool):
            return 0.0, None
        pool_arr = np.asarray(pool, dtype=np.int64)
        worst = -1.0
        worst_subset = None
        for _ in range(trials):
            subset = rng.choice(pool_arr, size=size, replace=False)
            d = deficiency(graph, rates, subset.tolist())
            if d > worst:
                worst = d
                worst_subset = tuple(int(s) for s in sorted(subset))
        return max(worst, 0.0), worst_subset

    worst1, sub1 = sample_worst(pool1, size1)
    worst2, sub2 = sample_worst(pool2, size2)
    return ConnectivityReport(
        condition1_ok=worst1 <= thr1,
        condition2_ok=worst2 <= thr2,
        worst_subset_1=sub1,
        worst_subset_2=sub2,
        worst_deficiency_1=worst1,
        worst_deficiency_2=worst2,
        method="sampled",
        required_size_1=size1,
        required_size_2=size2,
        threshold_1=thr1,
        threshold_2=thr2,
    )


# ---------------------------------------------------------------------------
# random constructions
# ---------------------------------------------------------------------------


def _as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def heterogeneous_h(theory: TheoryParams, n_servers: int, n_ports: int) -> tuple[float, float]:
    """Connection weights for the heterogeneous-rate construction."""
    base = 2.0 * math.log(2.0) * (n_servers + n_ports) / n_servers
    return base / theory.p1, base / theory.p2


def _h_homogeneous(p_j: float, d_j: float, mu_1: float, mean_rate: float) -> float:
    return 6.0 * (
        -math.log(p_j) + d_j / (p_j * mean_rate) * math.log(2.0 * mu_1 / d_j)
    )


def _bernoulli_rows(
    rng: np.random.Generator,
    sub_ports: np.ndarray,
    col_lo: int,
    col_hi: int,
    probs: np.ndarray,
    out: list[list[np.ndarray]],
) -> None:
    """Draw independent edges for ports ``sub_ports`` against server columns
    [col_lo, col_hi), with per-port probability ``probs``; appends chosen
    column arrays to out[port]."""
    width = col_hi - col_lo
    if width <= 0 or sub_ports.size == 0:
        return
    rows_per_chunk = max(1, _CHUNK_DOUBLES // max(width, 1))
    for start in range(0, sub_ports.size, rows_per_chunk):
        block = sub_ports[start : start + rows_per_chunk]
        u = rng.random((block.size, width))
        rows, cols = np.nonzero(u < probs[block][:, None])
        cols = cols.astype(np.int32) + col_lo
        # rows is sorted; split the flat hit list back into per-port arrays
        boundaries = np.searchsorted(rows, np.arange(1, block.size))
        for i, chunk in enumerate(np.split(cols, boundaries)):
            if chunk.size:
                out[block[i]].append(chunk)


def _patch_isolated_ports(
    rng: np.random.Generator, lists: list[np.ndarray], n_servers: int
) -> list[int]:
    patched = []
    for p, nbrs in enumerate(lists):
        if nbrs.size == 0:
            lists[p] = np.asarray([int(rng.integers(0, n_servers))], dtype=np.int32)
            patched.append(p)
    return patched


def _threshold_construction(
    port_rates: np.ndarray,
    spec: SystemSpec,
    theory: TheoryParams,
    h1: float,
    h2: float,
    seed,
    slow_class_edges: bool,
) -> BipartiteGraph:
    """Common body of the two threshold constructions.

    Heavy ports connect deterministically to whole class ranges; light ports
    connect by independent coin flips with probability proportional to their
    rate.  Server classes beyond K optionally receive edges with the same
    probability as the condition-2 range so that slow servers stay reachable.
    """
    rng = np.random.Generator(np.random.Philox(_as_seedseq(seed)))
    n = spec.n_servers
    n_ports = int(port_rates.size)
    offsets = spec.class_offsets
    lim1 = int(offsets[theory.k - 1])  # servers of classes < K
    lim2 = int(offsets[theory.k])  # servers of classes <= K

    thresh1 = n * theory.d_tilde_1 / h1
    thresh2 = n * theory.d_tilde_2 / h2
    p_edge_1 = np.minimum(1.0, port_rates * h1 / (n * theory.d_tilde_1))
    p_edge_2 = np.minimum(1.0, port_rates * h2 / (n * theory.d_tilde_2))

    heavy1 = port_rates >= thresh1
    heavy2 = port_rates >= thresh2

    parts: list[list[np.ndarray]] = [[] for _ in range(n_ports)]
    all1 = np.arange(0, lim1, dtype=np.int32)
    all2 = np.arange(lim1, lim2, dtype=np.int32)
    all_slow = np.arange(lim2, n, dtype=np.int32)
    for p in np.nonzero(heavy1)[0]:
        if all1.size:
            parts[p].append(all1)
    for p in np.nonzero(heavy2)[0]:
        if all2.size:
            parts[p].append(all2)
    # RNG consumption order: light ports vs classes < K, light ports vs
    # class K, then (optionally) all ports vs slow classes, then patches.
    light1 = np.nonzero(~heavy1)[0]
    light2 = np.nonzero(~heavy2)[0]
    _bernoulli_rows(rng, light1, 0, lim1, p_edge_1, parts)
    _bernoulli_rows(rng, light2, lim1, lim2, p_edge_2, parts)
    if slow_class_edges and lim2 < n:
        p_slow = np.where(heavy2, 1.0, p_edge_2)
        heavy_slow = np.nonzero(heavy2)[0]
        for p in heavy_slow:
            parts[p].append(all_slow)
        _bernoulli_rows(rng, np.nonzero(~heavy2)[0], lim2, n, p_slow, parts)

    lists = [
        np.unique(np.concatenate(c)) if c else np.empty(0, dtype=np.int32)
        for c in parts
    ]
    patched = _patch_isolated_ports(rng, lists, n)
    meta = {
        "construction": "threshold",
        "h1": h1,
        "h2": h2,
        "patched_ports": patched,
        "slow_class_edges": bool(slow_class_edges),
    }
    return BipartiteGraph.from_port_lists(n_ports, n, lists, meta)


def generate_heterogeneous(
    port_rates: Sequence[float],
    spec: SystemSpec,
    theory: TheoryParams,
    seed: int | np.random.SeedSequence = 0,
    slow_class_edges: bool = True,
) -> BipartiteGraph:
    """Random graph for arbitrary port rates; satisfies the
    well-connectedness condition with probability >= 1 - 2^-(N+L-1)."""
    port_rates = np.asarray(port_rates, dtype=np.float64)
    h1, h2 = heterogeneous_h(theory, spec.n_servers, int(port_rates.size))
    g = _threshold_construction(
        port_rates, spec, theory, h1, h2, seed, slow_class_edges
    )
    g.meta["construction"] = "heterogeneous"
    return g


def generate_homogeneous(
    spec: SystemSpec,
    theory: TheoryParams,
    seed: int | np.random.SeedSequence = 0,
    slow_class_edges: bool = True,
) -> BipartiteGraph:
    """Sparser random graph available when all port rates are equal."""
    port_rates = spec.port_rates
    mean_rate = float(port_rates[0])
    if np.any(np.abs(port_rates - mean_rate) > 1e-12 * max(1.0, mean_rate)):
        raise ValueError("homogeneous construction requires equal rates")
    mu_1 = float(spec.rates[0])
    h1 = _h_homogeneous(theory.p1, theory.d_tilde_1, mu_1, mean_rate)
    h2 = _h_homogeneous(theory.p2, theory.d_tilde_2, mu_1, mean_rate)
    g = _threshold_construction(
        port_rates, spec, theory, h1, h2, seed, slow_class_edges
    )
    g.meta["construction"] = "homogeneous"
    return g


def sim_random_edge_probability(n_servers: int, load: float) -> float:
    """Independent edge probability used by the scaling experiments."""
    if not (0.0 < load < 1.0):
        raise ValueError("load must lie in (0, 1)")
    p = (
        2.0
        * math.sqrt(math.log(n_servers))
        / (n_servers * (1.0 - load))
        * math.log(1.0 / (1.0 - load))
    )
    return min(1.0, p)


def generate_sim_random(
    n_servers: int,
    n_ports: int,
    load: float,
    seed: int | np.random.SeedSequence = 0,
) -> BipartiteGraph:
    """Each port-server pair connected independently with the scaling-study
    probability; isolated ports patched with one uniform edge."""
    p = sim_random_edge_probability(n_servers, load)
    rng = np.random.Generator(np.random.Philox(_as_seedseq(seed)))
    parts: list[list[np.ndarray]] = [[] for _ in range(n_ports)]
    probs = np.full(n_ports, p)
    _bernoulli_rows(
        rng, np.arange(n_ports, dtype=np.int64), 0, n_servers, probs, parts
    )
    lists = [
        c[0] if c else np.empty(0, dtype=np.int32) for c in parts
    ]
    patched = _patch_isolated_ports(rng, lists, n_servers)
    meta = {
        "construction": "sim-random",
        "edge_probability": p,
        "patched_ports": patched,
    }
    return BipartiteGraph.from_port_lists(n_ports, n_servers, lists, meta)
