"""Exact stationary analysis of tiny systems.

Enumerates the full state space {0..b}^N with mixed-radix indexing,
assembles the CTMC generator from the policies' closed-form routing
distributions, solves the balance equations with the normalization row
replacing one balance row, and evaluates exact metrics.  This is the
oracle the simulator is checked against; it is deliberately simple and
only meant for state spaces up to about a million states.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .graph import BipartiteGraph
from .model import SystemSpec
from .policy import routing_distribution

__all__ = [
    "StateSpaceBudgetError",
    "SolverError",
    "StateSpace",
    "StationaryDistribution",
    "ExactMetrics",
    "stationary",
    "exact_metrics",
    "write_distribution",
]

DEFAULT_STATE_BUDGET = 1_000_000
DENSE_CUTOFF = 10_000
RESIDUAL_TOL = 1e-10


class StateSpaceBudgetError(RuntimeError):
    """State space exceeds the configured enumeration budget."""


class SolverError(RuntimeError):
    """The balance equations could not be solved to tolerance."""


@dataclass(frozen=True)
class StateSpace:
    """Mixed-radix bijection between queue vectors and state indices.

    Index digits are little-endian in the server index: incrementing
    server r moves the index by (b+1)^r.
    """

    n_servers: int
    buffer: int

    @property
    def radix(self) -> int:
        return self.buffer + 1

    @property
    def size(self) -> int:
        return self.radix**self.n_servers

    @property
    def strides(self) -> np.ndarray:
        return self.radix ** np.arange(self.n_servers, dtype=np.int64)

    def vector(self, index: int) -> np.ndarray:
        q = np.empty(self.n_servers, dtype=np.int64)
        for r in range(self.n_servers):
            q[r] = index % self.radix
            index //= self.radix
        return q

    def index(self, q) -> int:
        return int(np.dot(np.asarray(q, dtype=np.int64), self.strides))

    def all_vectors(self) -> np.ndarray:
        """(size, N) matrix of all queue vectors, ordered by index."""
        idx = np.arange(self.size, dtype=np.int64)
        return (idx[:, None] // self.strides[None, :]) % self.radix


@dataclass
class StationaryDistribution:
    pi: np.ndarray
    residual: float
    space: StateSpace
    method: str


def _assemble_generator(
    spec: SystemSpec,
    graph: BipartiteGraph,
    policy: str,
    pf: float,
    ps: float,
    space: StateSpace,
) -> sp.csr_matrix:
    n = space.n_servers
    b = space.buffer
    rates = spec.server_rates
    class_of = spec.class_of
    port_rates = spec.port_rates
    strides = space.strides
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for s in range(space.size):
        q = space.vector(s)
        out = 0.0
        for r in range(n):
            if q[r] > 0:
                rows.append(s)
                cols.append(s - strides[r])
                vals.append(float(rates[r]))
                out += float(rates[r])
        for port in range(graph.num_ports):
            dist, _block = routing_distribution(
                policy, port, q, graph, rates, b, class_of, pf, ps
            )
            lam = float(port_rates[port])
            for r, p in dist.items():
                rows.append(s)
                cols.append(s + strides[r])
                vals.append(lam * p)
                out += lam * p
        rows.append(s)
        cols.append(s)
        vals.append(-out)
    gen = sp.coo_matrix(
        (vals, (rows, cols)), shape=(space.size, space.size)
    ).tocsr()
    gen.sum_duplicates()
    return gen


def _solve_dense(gen: sp.csr_matrix) -> np.ndarray:
    n = gen.shape[0]
    a = gen.toarray().T
    a[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    return pi


def _solve_iterative(gen: sp.csr_matrix) -> np.ndarray:
    n = gen.shape[0]
    a = gen.T.tolil()
    a[-1, :] = 1.0
    a = a.tocsc()
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        ilu = spla.spilu(a, drop_tol=1e-6, fill_factor=20)
        precond = spla.LinearOperator((n, n), ilu.solve)
        pi, info = spla.gmres(a, rhs, rtol=1e-13, atol=0.0, M=precond, maxiter=2000)
        if info == 0:
            return pi
    except RuntimeError:
        pass
    # fall back to power iteration on the uniformized transition matrix
    rates = -gen.diagonal()
    lam = 1.05 * float(rates.max())
    p = sp.eye(n, format="csr") + gen / lam
    pi = np.full(n, 1.0 / n)
    for _ in range(2_000_000):
        nxt = pi @ p
        nxt /= nxt.sum()
        if np.abs(nxt - pi).max() < 1e-16:
            pi = nxt
            break
        pi = nxt
    return pi


def stationary(
    spec: SystemSpec,
    graph: Optional[BipartiteGraph] = None,
    policy: str = "jfsq",
    *,
    pf: float = 1.0,
    ps: float = 0.0,
    budget: int = DEFAULT_STATE_BUDGET,
) -> StationaryDistribution:
    """Stationary distribution of the queue-length CTMC under ``policy``."""
    graph = graph if graph is not None else spec.graph
    if graph is None:
        raise ValueError("a compatibility graph is required")
    space = StateSpace(n_servers=spec.n_servers, buffer=spec.buffer)
    if space.size > budget:
        raise StateSpaceBudgetError("state space too large")
    gen = _assemble_generator(spec, graph, policy, pf, ps, space)
    if space.size <= DENSE_CUTOFF:
        pi = _solve_dense(gen)
        method = "dense"
    else:
        pi = _solve_iterative(gen)
        method = "iterative"
    if np.any(pi < -1e-14):
        raise SolverError("singular or ill-conditioned generator")
    if np.any(pi < 0):
        warnings.warn("clamping tiny negative stationary probabilities to zero")
        pi = np.where(pi < 0, 0.0, pi)
    pi = pi / pi.sum()
    residual = float(np.abs(pi @ gen).max())
    if residual > RESIDUAL_TOL:
        raise SolverError("singular or ill-conditioned generator")
    return StationaryDistribution(pi=pi, residual=residual, space=space, method=method)


@dataclass
class ExactMetrics:
    blocking_prob: float
    mean_jobs_scaled: float
    per_class_jobs: np.ndarray
    mean_response: Optional[float]


def exact_metrics(
    dist: StationaryDistribution,
    spec: SystemSpec,
    graph: Optional[BipartiteGraph] = None,
    policy: str = "jfsq",
    *,
    pf: float = 1.0,
    ps: float = 0.0,
) -> ExactMetrics:
    """Exact stationary metrics; mean response follows from Little's law
    applied to the effective (admitted) arrival rate."""
    graph = graph if graph is not None else spec.graph
    space = dist.space
    pi = dist.pi
    n = spec.n_servers
    class_of = spec.class_of
    rates = spec.server_rates
    port_rates = spec.port_rates
    lam_total = spec.lambda_total

    vectors = space.all_vectors()
    per_class = np.zeros(spec.n_classes)
    for m in range(spec.n_classes):
        per_class[m] = float(pi @ vectors[:, class_of == m].sum(axis=1)) / n
    mean_jobs_scaled = float(per_class.sum())

    blocking = 0.0
    for s in range(space.size):
        if pi[s] == 0.0:
            continue
        q = vectors[s]
        mass = 0.0
        for port in range(graph.num_ports):
            _dist, block = routing_distribution(
                policy, port, q, graph, rates, space.buffer, class_of, pf, ps
            )
            mass += port_rates[port] / lam_total * block
        blocking += pi[s] * mass

    if blocking >= 1.0:
        mean_response = None
    else:
        mean_response = n * mean_jobs_scaled / (lam_total * (1.0 - blocking))
    return ExactMetrics(
        blocking_prob=float(blocking),
        mean_jobs_scaled=mean_jobs_scaled,
        per_class_jobs=per_class,
        mean_response=mean_response,
    )


def write_distribution(dist: StationaryDistribution, path: str) -> None:
    """CSV dump state_index,q_1..q_N,probability."""
    space = dist.space
    with open(path, "w", newline="\n") as fh:
        header = ",".join(f"q_{r + 1}" for r in range(space.n_servers))
        fh.write(f"state_index,{header},probability\n")
        vectors = space.all_vectors()
        for s in range(space.size):
            qs = ",".join(str(int(x)) for x in vectors[s])
            fh.write(f"{s},{qs},{dist.pi[s]:.15g}\n")
