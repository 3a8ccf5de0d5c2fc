"""System description and closed-form theory for heterogeneous bipartite load balancing.

A system consists of N servers partitioned into M classes with strictly
decreasing service rates, L ports with independent Poisson arrival streams,
a finite per-server buffer, and a bipartite compatibility graph between
ports and servers.  This module computes every derived quantity the rest of
the toolkit needs: the fast-class prefix K, the mean-field occupancy targets
C*_m, the response-time lower bound C*/lambda, the buffer-size admissibility
window, the well-connectedness parameters (p1, p2, d~1, d~2), the drift
constants (delta, B1, B2, B3, chi) used by the Lyapunov diagnostics, and the
finite-system reference bounds on jobs and blocking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "BLOCKED_BUFFER_MIN",
    "CapacityError",
    "EpsilonRangeError",
    "ServerClass",
    "SystemSpec",
    "TheoryParams",
    "BufferWindow",
    "ReferenceBounds",
    "make_classes",
    "build_system",
    "derive_theory",
    "buffer_window",
    "check_buffer_window",
    "evaluate_reference_bounds",
]

BLOCKED_BUFFER_MIN = 1

_REL_TOL = 1e-12


class CapacityError(ValueError):
    """Total arrival rate is not strictly below total service capacity."""


class EpsilonRangeError(ValueError):
    """Approximation parameter epsilon outside (0, beta_hat/4]."""


@dataclass(frozen=True)
class ServerClass:
    """One class of identical servers.

    rate is the exponential service rate, fraction the share of the N
    servers, count the realized integer number of servers.
    """

    rate: float
    fraction: float
    count: int

    def __post_init__(self) -> None:
        if self.rate <= 0:
            raise ValueError("server class rate must be positive")
        if not (0 < self.fraction < 1 or self.fraction == 1.0):
            raise ValueError("server class fraction must lie in (0, 1]")
        if self.count < 1:
            raise ValueError("server class count must be a positive integer")


def make_classes(
    n_servers: int, rates: Sequence[float], fractions: Sequence[float]
) -> tuple[ServerClass, ...]:
    """Build the class list for ``n_servers`` servers.

    Classes are sorted by strictly decreasing rate.  Counts are
    round(N * fraction) with a largest-remainder correction so they sum to
    N exactly.
    """
    if len(rates) != len(fractions) or not rates:
        raise ValueError("rates and fractions must be equal-length, non-empty")
    if abs(sum(fractions) - 1.0) > 1e-12:
        raise ValueError("class fractions must sum to 1")
    order = sorted(range(len(rates)), key=lambda i: -rates[i])
    rates = [float(rates[i]) for i in order]
    fractions = [float(fractions[i]) for i in order]
    if any(rates[i] <= rates[i + 1] for i in range(len(rates) - 1)):
        raise ValueError("class rates must be strictly decreasing")

    raw = [n_servers * f for f in fractions]
    counts = [int(math.floor(x + 1e-9)) for x in raw]
    shortfall = n_servers - sum(counts)
    # largest fractional remainder first; ties by class index for determinism
    remainder_order = sorted(
        range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i)
    )
    for i in remainder_order[:shortfall]:
        counts[i] += 1
    if any(c < 1 for c in counts):
        raise ValueError("every class needs at least one server at this N")
    return tuple(
        ServerClass(rate=r, fraction=f, count=c)
        for r, f, c in zip(rates, fractions, counts)
    )


@dataclass(frozen=True)
class SystemSpec:
    """Full system description.

    Servers are laid out class-major: indices [0, counts[0]) belong to the
    fastest class, the next block to the second class, and so on.  ``graph``
    may be attached later; operations that need the topology accept it as an
    explicit argument as well.
    """

    classes: tuple[ServerClass, ...]
    port_rates: np.ndarray
    buffer: int
    graph: Optional["object"] = field(default=None, compare=False)
    # finite buffers make the chain stable regardless of load; the strict
    # capacity requirement matters for the theory, not for simulation or
    # exact analysis, so saturated systems may opt out
    strict_capacity: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "port_rates", np.asarray(self.port_rates, dtype=np.float64)
        )
        self.validate()

    def validate(self) -> None:
        if not self.classes:
            raise ValueError("at least one server class required")
        rates = [c.rate for c in self.classes]
        if any(rates[i] <= rates[i + 1] for i in range(len(rates) - 1)):
            raise ValueError("classes must be sorted by strictly decreasing rate")
        fr_sum = sum(c.fraction for c in self.classes)
        if abs(fr_sum - 1.0) > 1e-12:
            raise ValueError("class fractions must sum to 1")
        if self.buffer < BLOCKED_BUFFER_MIN:
            raise ValueError("buffer size must be a positive integer")
        if self.port_rates.ndim != 1 or self.port_rates.size == 0:
            raise ValueError("port_rates must be a non-empty 1-d array")
        if np.any(self.port_rates <= 0):
            raise ValueError("port arrival rates must be positive")
        if self.strict_capacity and self.lambda_total >= self.capacity:
            raise CapacityError("insufficient capacity")
        if self.graph is not None:
            g = self.graph
            if g.num_ports != self.num_ports or g.num_servers != self.n_servers:
                raise ValueError("attached graph dimensions do not match system")

    # -- derived views -------------------------------------------------

    @property
    def n_servers(self) -> int:
        return sum(c.count for c in self.classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def num_ports(self) -> int:
        return int(self.port_rates.size)

    @property
    def rates(self) -> np.ndarray:
        return np.array([c.rate for c in self.classes], dtype=np.float64)

    @property
    def counts(self) -> np.ndarray:
        return np.array([c.count for c in self.classes], dtype=np.int64)

    @property
    def fractions_realized(self) -> np.ndarray:
        """Realized class fractions count/N (used by all theory formulas)."""
        return self.counts / float(self.n_servers)

    @property
    def class_of(self) -> np.ndarray:
        """Server index -> class index, class-major layout."""
        return np.repeat(
            np.arange(self.n_classes, dtype=np.int32), self.counts
        )

    @property
    def class_offsets(self) -> np.ndarray:
        """Prefix offsets: servers of class m occupy [off[m], off[m+1])."""
        return np.concatenate(([0], np.cumsum(self.counts)))

    @property
    def server_rates(self) -> np.ndarray:
        return np.repeat(self.rates, self.counts)

    @property
    def lambda_total(self) -> float:
        return float(self.port_rates.sum())

    @property
    def capacity(self) -> float:
        """Total service capacity, sum over servers of their rates."""
        return float(np.dot(self.rates, self.counts))

    def with_graph(self, graph) -> "SystemSpec":
        return SystemSpec(
            classes=self.classes,
            port_rates=self.port_rates,
            buffer=self.buffer,
            graph=graph,
        )


def build_system(
    n_servers: int,
    rates: Sequence[float],
    fractions: Sequence[float],
    port_rates: Sequence[float],
    buffer: int,
    graph=None,
    strict_capacity: bool = True,
) -> SystemSpec:
    """Convenience constructor handling class sorting and count rounding."""
    classes = make_classes(n_servers, rates, fractions)
    return SystemSpec(
        classes=classes,
        port_rates=np.asarray(port_rates, dtype=np.float64),
        buffer=int(buffer),
        graph=graph,
        strict_capacity=strict_capacity,
    )


@dataclass(frozen=True)
class TheoryParams:
    """Every closed-form quantity derived from a SystemSpec.

    k              minimal count of fastest classes whose pooled capacity
                   strictly exceeds the total arrival rate
    beta           slack of the K-class prefix: lambda_total =
                   (prefix capacity) * (1 - beta)
    beta_hat       beta times the server fraction of the first K classes
    lam            per-server arrival rate lambda_total / N
    c_star_per_class  mean-field busy fractions C*_1..C*_K
    c_star         their sum; N*c_star is the minimum achievable mean job count
    service_time_lb   c_star / lam, the mean response-time floor
    epsilon        approximation parameter in (0, beta_hat/4]
    tau_1k/_1m/_km rate ratios mu_1/mu_K, mu_1/mu_M, mu_K/mu_M
    p1, p2         minimal subset fractions in the well-connectedness check
    d_tilde_1/_2   deficiency budgets (defaults at their maximal allowed value)
    delta, delta_bar, b1, b2, b3, chi   drift/tail constants for the
                   V1/V2/V3 diagnostics (b3 and chi fold in this system's
                   N and buffer size)
    """

    k: int
    beta: float
    beta_hat: float
    lam: float
    c_star_per_class: tuple[float, ...]
    c_star: float
    service_time_lb: float
    epsilon: float
    tau_1k: float
    tau_1m: float
    tau_km: float
    p1: float
    p2: float
    d_tilde_1: float
    d_tilde_2: float
    delta: float
    delta_bar: float
    b1: float
    b2: float
    b3: float
    chi: float


def derive_theory(
    spec: SystemSpec,
    epsilon: Optional[float] = None,
    d_tilde_1: Optional[float] = None,
    d_tilde_2: Optional[float] = None,
) -> TheoryParams:
    """Populate TheoryParams for a validated system.

    ``epsilon`` defaults to beta_hat/4, the largest allowed value.  The
    deficiency budgets default to their maximal allowed values
    eps*mu_K/(12 b^3) and eps*mu_K/(2 b); smaller overrides are accepted
    (a smaller budget is a stricter graph requirement).
    """
    n = spec.n_servers
    b = spec.buffer
    mu = spec.rates
    alpha = spec.fractions_realized
    lam_total = spec.lambda_total
    prefix_capacity = np.cumsum(mu * spec.counts)

    if lam_total >= prefix_capacity[-1]:
        raise CapacityError("insufficient capacity")
    k = int(np.argmax(prefix_capacity > lam_total)) + 1  # 1-based class count

    beta = 1.0 - lam_total / prefix_capacity[k - 1]
    lam = lam_total / n
    c_star_list = [float(alpha[m]) for m in range(k - 1)]
    c_star_k = (lam - float(np.dot(mu[: k - 1], alpha[: k - 1]))) / mu[k - 1]
    c_star_list.append(float(c_star_k))
    c_star = float(sum(c_star_list))
    beta_hat = beta * float(alpha[:k].sum())

    if epsilon is None:
        epsilon = beta_hat / 4.0
    if not (0.0 < epsilon <= beta_hat / 4.0 * (1.0 + _REL_TOL)):
        raise EpsilonRangeError("epsilon out of range")

    tau_1k = float(mu[0] / mu[k - 1])
    tau_1m = float(mu[0] / mu[-1])
    tau_km = float(mu[k - 1] / mu[-1])

    p1 = epsilon / (6.0 * b * b)
    p2 = beta_hat / 2.0
    d1_max = epsilon * mu[k - 1] / (12.0 * b**3)
    d2_max = epsilon * mu[k - 1] / (2.0 * b)
    if d_tilde_1 is None:
        d_tilde_1 = d1_max
    elif not (0.0 < d_tilde_1 <= d1_max * (1.0 + _REL_TOL)):
        raise ValueError("d_tilde_1 must lie in (0, eps*mu_K/(12 b^3)]")
    if d_tilde_2 is None:
        d_tilde_2 = d2_max
    elif not (0.0 < d_tilde_2 <= d2_max * (1.0 + _REL_TOL)):
        raise ValueError("d_tilde_2 must lie in (0, eps*mu_K/(2 b)]")

    delta = mu[k - 1] * epsilon / (6.0 * mu[0] * b * b)
    delta_bar = tau_1k * delta
    b1 = tau_1k * delta
    b2 = 0.5 * epsilon + delta_bar
    chi = 96.0 * tau_1k * b**3 * math.log(n) if n > 1 else 0.0
    b3 = (
        d_tilde_2 * b
        + math.sqrt(
            mu[0]
            * mu[-1]
            * (
                5.0 * b * math.log(n) / n
                + 416.0 * tau_1k * b**4 / (beta_hat * epsilon * n)
            )
        )
    ) / mu[-1]

    params = TheoryParams(
        k=k,
        beta=float(beta),
        beta_hat=float(beta_hat),
        lam=float(lam),
        c_star_per_class=tuple(c_star_list),
        c_star=c_star,
        service_time_lb=c_star / lam,
        epsilon=float(epsilon),
        tau_1k=tau_1k,
        tau_1m=tau_1m,
        tau_km=tau_km,
        p1=float(p1),
        p2=float(p2),
        d_tilde_1=float(d_tilde_1),
        d_tilde_2=float(d_tilde_2),
        delta=float(delta),
        delta_bar=float(delta_bar),
        b1=float(b1),
        b2=float(b2),
        b3=float(b3),
        chi=float(chi),
    )
    balance = sum(m * c for m, c in zip(mu[:k], c_star_list))
    if abs(balance - lam) > 1e-12 * max(1.0, abs(lam)):
        raise AssertionError("mean-field balance identity violated")
    return params


@dataclass(frozen=True)
class BufferWindow:
    ok: bool
    b_min: int
    b_max: int

    @property
    def empty(self) -> bool:
        return self.b_max < self.b_min


def _snap(x: float) -> float:
    r = round(x)
    return float(r) if abs(x - r) < 1e-9 else x


def buffer_window(epsilon: float, tau_1k: float, n_servers: int, b: int) -> BufferWindow:
    """Admissible buffer sizes: 6*sqrt(tau_1K) <= b <= floor((eps^2 N / (1152 tau_1K ln N))^(1/5)).

    The window may be empty (b_max < b_min); that is a valid answer, the
    boolean is then False for every b.
    """
    if n_servers < 2:
        raise ValueError("window requires at least two servers")
    if b < 1:
        raise ValueError("buffer size must be positive")
    lo = _snap(6.0 * math.sqrt(tau_1k))
    hi = _snap(
        (epsilon * epsilon * n_servers / (1152.0 * tau_1k * math.log(n_servers)))
        ** 0.2
    )
    b_min = int(math.ceil(lo))
    b_max = int(math.floor(hi))
    return BufferWindow(ok=(b_min <= b <= b_max), b_min=b_min, b_max=b_max)


def check_buffer_window(theory: TheoryParams, n_servers: int, b: int) -> BufferWindow:
    return buffer_window(theory.epsilon, theory.tau_1k, n_servers, b)


@dataclass(frozen=True)
class ReferenceBounds:
    """Finite-system reference bounds (diagnostics, compared against sims).

    jobs_excess_bound  bound on E[max(sum_{m<=K} C_m - (C*+eps), 0)]
    total_jobs_bound   bound on E[sum_m C_m]; None when K = M (inapplicable)
    blocking_bound     bound on the blocking probability
    """

    jobs_excess_bound: float
    total_jobs_bound: Optional[float]
    blocking_bound: float
    k_equals_m: bool


def evaluate_reference_bounds(
    theory: TheoryParams, n_servers: int, b: int
) -> ReferenceBounds:
    n = n_servers
    eps = theory.epsilon
    excess = 52.0 * theory.tau_1k * b * b / (eps * n)
    blocking = theory.d_tilde_2 / theory.lam + excess
    k_equals_m = math.isclose(theory.tau_km, 1.0, rel_tol=1e-15)
    total: Optional[float]
    if k_equals_m:
        total = None
    else:
        total = (
            theory.c_star
            + (1.0 + theory.tau_km / 2.0) * eps
            + 2.0 * math.sqrt(5.0 * theory.tau_1m * b * math.log(n) / n)
            + 60.0
            * b
            * b
            * math.sqrt(26.0 * theory.tau_1k * theory.tau_1m / (theory.beta_hat * eps * n))
        )
    return ReferenceBounds(
        jobs_excess_bound=excess,
        total_jobs_bound=total,
        blocking_bound=blocking,
        k_equals_m=k_equals_m,
    )
