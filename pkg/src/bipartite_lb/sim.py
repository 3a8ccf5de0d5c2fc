"""Event-driven simulation of the bipartite load-balancing system.

One replication is a single-threaded deterministic event loop over a
superposed Poisson arrival stream (one exponential clock thinned to ports
through an alias table) and per-server exponential or hyper-exponential
service completions.  The loop itself lives in a compiled kernel
(``bipartite_lb._kernel``) with a pure-Python fallback
(``bipartite_lb._pykernel``); both consume the random stream identically,
so results are bit-identical across backends for the same seed.

Collected per replication: response times of admitted jobs (arrival to
departure, jobs admitted in the measurement window; the loop drains open
jobs after the last arrival so no sample is censored), blocking counts,
and exact piecewise-constant time averages of per-class job counts.
State traces are opt-in and feed the Lyapunov diagnostics.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _pykernel
from .graph import BipartiteGraph
from .model import SystemSpec, TheoryParams
from .policy import POLICY_NAMES, check_jsq22_topology

try:
    from . import _kernel as _compiled
except ImportError:  # built without the extension; pure-Python fallback
    _compiled = None

__all__ = [
    "BACKENDS",
    "HYPEREXP_BRANCH_PROB",
    "HYPEREXP_SLOW_RATE",
    "HYPEREXP_FAST_RATE",
    "HYPEREXP_BASE_MEAN",
    "NoSamplesError",
    "Metrics",
    "Trace",
    "SimResult",
    "AggregateMetrics",
    "LyapunovDiagnostics",
    "OccupancySnapshot",
    "have_compiled_kernel",
    "default_backend",
    "hyperexp_class_rates",
    "sample_hyperexp_base",
    "simulate",
    "simulate_replications",
    "aggregate_metrics",
    "lyapunov_trace",
    "occupancy_snapshot",
    "write_trace",
]

EV_ADMIT = 0
EV_BLOCK = 1
EV_DEPART = 2

_EVENT_NAMES = {EV_ADMIT: "admit", EV_BLOCK: "block", EV_DEPART: "depart"}

_POLICY_CODES = {name: i for i, name in enumerate(POLICY_NAMES)}

BACKENDS = ("compiled", "python")

# hyper-exponential service base: X ~ Exp(0.01) w.p. 0.01, Exp(1) w.p. 0.99;
# class i serves in time 2^(i-1) X
HYPEREXP_BRANCH_PROB = 0.01
HYPEREXP_SLOW_RATE = 0.01
HYPEREXP_FAST_RATE = 1.0
HYPEREXP_BASE_MEAN = (
    HYPEREXP_BRANCH_PROB / HYPEREXP_SLOW_RATE
    + (1.0 - HYPEREXP_BRANCH_PROB) / HYPEREXP_FAST_RATE
)  # = 1.99


class NoSamplesError(RuntimeError):
    """The measurement window contains no arrivals."""


def have_compiled_kernel() -> bool:
    return _compiled is not None


def default_backend() -> str:
    return "compiled" if _compiled is not None else "python"


def _kernel_module(backend: Optional[str]):
    if backend is None:
        backend = default_backend()
    if backend == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernel not available; rebuild or use backend='python'")
        return _compiled, "compiled"
    if backend == "python":
        return _pykernel, "python"
    raise ValueError(f"unknown backend {backend!r}")


def hyperexp_class_rates(n_classes: int) -> list[float]:
    """Effective service rates 1 / (2^(i-1) * E[X]) implied by the
    hyper-exponential model, fastest class first."""
    return [1.0 / (2.0**m * HYPEREXP_BASE_MEAN) for m in range(n_classes)]


def sample_hyperexp_base(rng: np.random.Generator, n: int) -> np.ndarray:
    """Vectorized draws of the base distribution X (for calibration tests)."""
    branch = rng.random(n) < HYPEREXP_BRANCH_PROB
    rate = np.where(branch, HYPEREXP_SLOW_RATE, HYPEREXP_FAST_RATE)
    return -np.log1p(-rng.random(n)) / rate


@dataclass
class Trace:
    """Per-event record: times, type codes (0 admit, 1 block, 2 depart),
    server, port, queue length after the event.  Covers the whole run;
    ``t0``/``t1`` mark the measurement window."""

    times: np.ndarray
    types: np.ndarray
    servers: np.ndarray
    ports: np.ndarray
    queues_after: np.ndarray
    t0: float
    t1: float

    def __len__(self) -> int:
        return int(self.times.size)


@dataclass
class Metrics:
    """Single-replication metrics over the measurement window."""

    admitted: int
    blocked: int
    blocking_prob: float
    mean_response: float
    response_count: int
    mean_jobs_scaled: float
    per_class_jobs: np.ndarray
    littles_residual: float
    t0: float
    t1: float
    max_queue: int
    backend: str
    lyapunov_tails: Optional[dict] = None


@dataclass
class SimResult:
    metrics: Metrics
    trace: Optional[Trace] = None
    lyapunov: Optional["LyapunovDiagnostics"] = None


def _prepare_alias(port_rates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vose alias table; one uniform per categorical draw."""
    n = port_rates.size
    scaled = port_rates / port_rates.sum() * n
    prob = np.ones(n, dtype=np.float64)
    alias = np.arange(n, dtype=np.int32)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    scaled = scaled.copy()
    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        if scaled[g] < 1.0:
            small.append(g)
        else:
            large.append(g)
    for i in large:
        prob[i] = 1.0
    for i in small:
        prob[i] = 1.0
    return prob, alias


def _service_arrays(
    spec: SystemSpec, service_model: str
) -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    m = spec.n_classes
    if service_model == "exponential":
        return 0, np.ones(m), np.ones(m), np.ones(m)
    if service_model == "hyperexponential":
        implied = hyperexp_class_rates(m)
        for got, want in zip(spec.rates, implied):
            if abs(got - want) > 1e-9 * want:
                raise ValueError(
                    "hyperexponential model implies class rates "
                    f"{[round(r, 6) for r in implied]}; the system declares different rates"
                )
        scale = np.array([2.0**i for i in range(m)])
        return (
            1,
            np.full(m, HYPEREXP_BRANCH_PROB),
            HYPEREXP_SLOW_RATE / scale,
            HYPEREXP_FAST_RATE / scale,
        )
    raise ValueError(f"unknown service model {service_model!r}")


def _as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def simulate(
    spec: SystemSpec,
    graph: Optional[BipartiteGraph] = None,
    policy: str = "jfsq",
    *,
    service_model: str = "exponential",
    horizon_arrivals: Optional[int] = None,
    horizon_time: Optional[float] = None,
    warmup_fraction: float = 0.2,
    seed=0,
    pf: float = 1.0,
    ps: float = 0.0,
    collect_trace: bool = False,
    theory: Optional[TheoryParams] = None,
    backend: Optional[str] = None,
    debug_checks: bool = False,
) -> SimResult:
    """Run one replication and return its metrics.

    Exactly one of ``horizon_arrivals``/``horizon_time`` must be given.
    With ``theory`` set, a trace is captured internally and the V1/V2/V3
    tail frequencies are attached to the metrics.  ``seed`` may be an int
    or a SeedSequence; the stream is a Philox counter-based generator.
    """
    graph = graph if graph is not None else spec.graph
    if graph is None:
        raise ValueError("a compatibility graph is required")
    if graph.num_servers != spec.n_servers or graph.num_ports != spec.num_ports:
        raise ValueError("graph dimensions do not match the system")
    if np.any(graph.port_degrees() == 0):
        raise ValueError("every port needs at least one neighbor")
    if policy not in _POLICY_CODES:
        raise ValueError(f"unknown policy {policy!r}")
    if not (0.0 <= warmup_fraction <= 0.9):
        raise ValueError("warmup_fraction must lie in [0, 0.9]")
    if (horizon_arrivals is None) == (horizon_time is None):
        raise ValueError("give exactly one of horizon_arrivals or horizon_time")

    module, backend_name = _kernel_module(backend)
    want_trace = collect_trace or theory is not None
    if want_trace and horizon_arrivals is None:
        raise ValueError("trace capture requires an arrival-count horizon")

    n_fast = 0
    if policy == "jsq22":
        if not (0.0 <= pf <= 1.0 and 0.0 <= ps <= 1.0) or abs(pf + ps - 1.0) > 1e-12:
            raise ValueError("jsq22 needs pf, ps in [0, 1] with pf + ps = 1")
        n_fast = check_jsq22_topology(graph, spec.class_of)

    svc_code, svc_pa, svc_ra, svc_rb = _service_arrays(spec, service_model)
    alias_prob, alias_idx = _prepare_alias(spec.port_rates)

    if horizon_arrivals is not None:
        mode = 0
        horizon_arrivals = int(horizon_arrivals)
        if horizon_arrivals < 1:
            raise ValueError("horizon_arrivals must be positive")
        warmup_arrivals = int(math.floor(warmup_fraction * horizon_arrivals))
        horizon_time = 0.0
        warmup_time = 0.0
        cap = 2 * horizon_arrivals + 4 if want_trace else 1
    else:
        mode = 1
        if horizon_time <= 0:
            raise ValueError("horizon_time must be positive")
        warmup_time = warmup_fraction * horizon_time
        horizon_arrivals = 0
        warmup_arrivals = 0
        cap = 1

    tr_time = np.zeros(cap, dtype=np.float64)
    tr_type = np.zeros(cap, dtype=np.int8)
    tr_srv = np.zeros(cap, dtype=np.int32)
    tr_port = np.zeros(cap, dtype=np.int32)
    tr_q = np.zeros(cap, dtype=np.int32)

    rng = np.random.Generator(np.random.Philox(_as_seedseq(seed)))
    raw = module.run(
        rng,
        spec.lambda_total,
        alias_prob,
        alias_idx,
        np.ascontiguousarray(graph.indptr, dtype=np.int64),
        np.ascontiguousarray(graph.indices, dtype=np.int32),
        np.ascontiguousarray(spec.server_rates, dtype=np.float64),
        np.ascontiguousarray(spec.class_of, dtype=np.int32),
        spec.n_classes,
        spec.buffer,
        _POLICY_CODES[policy],
        pf,
        ps,
        n_fast,
        svc_code,
        svc_pa,
        svc_ra,
        svc_rb,
        mode,
        horizon_arrivals,
        warmup_arrivals,
        horizon_time,
        warmup_time,
        bool(want_trace),
        bool(debug_checks),
        tr_time,
        tr_type,
        tr_srv,
        tr_port,
        tr_q,
    )

    admitted = int(raw["admitted"])
    blocked = int(raw["blocked"])
    if admitted + blocked == 0:
        raise NoSamplesError("no samples")
    t0, t1 = float(raw["t0"]), float(raw["t1"])
    window = t1 - t0
    if window <= 0:
        raise NoSamplesError("no samples")
    n = spec.n_servers
    integrals = np.asarray(raw["per_class_jobs_integral"], dtype=np.float64)
    per_class_jobs = integrals / (n * window)
    mean_jobs_scaled = float(integrals.sum() / (n * window))
    blocking_prob = blocked / (admitted + blocked)
    resp_count = int(raw["resp_count"])
    mean_response = float(raw["resp_sum"]) / resp_count if resp_count else float("nan")
    effective = spec.lambda_total * (1.0 - blocking_prob)
    if mean_jobs_scaled > 0 and resp_count:
        littles = abs(mean_jobs_scaled * n - effective * mean_response) / (
            mean_jobs_scaled * n
        )
    else:
        littles = float("nan")

    metrics = Metrics(
        admitted=admitted,
        blocked=blocked,
        blocking_prob=float(blocking_prob),
        mean_response=mean_response,
        response_count=resp_count,
        mean_jobs_scaled=mean_jobs_scaled,
        per_class_jobs=per_class_jobs,
        littles_residual=float(littles),
        t0=t0,
        t1=t1,
        max_queue=int(raw["max_queue"]),
        backend=backend_name,
    )

    trace = None
    diagnostics = None
    if want_trace:
        n_events = int(raw["n_events"])
        trace = Trace(
            times=tr_time[:n_events].copy(),
            types=tr_type[:n_events].copy(),
            servers=tr_srv[:n_events].copy(),
            ports=tr_port[:n_events].copy(),
            queues_after=tr_q[:n_events].copy(),
            t0=t0,
            t1=t1,
        )
    if theory is not None:
        diagnostics = lyapunov_trace(trace, theory, spec)
        metrics.lyapunov_tails = {
            "v1": diagnostics.tail_v1,
            "v2": diagnostics.tail_v2,
            "v3": diagnostics.tail_v3,
            "threshold_v1": diagnostics.threshold_v1,
            "threshold_v2": diagnostics.threshold_v2,
            "threshold_v3": diagnostics.threshold_v3,
        }
    return SimResult(
        metrics=metrics, trace=trace if collect_trace else None, lyapunov=diagnostics
    )


# ---------------------------------------------------------------------------
# replications
# ---------------------------------------------------------------------------


@dataclass
class AggregateMetrics:
    """Across-replication means with 95% normal-approximation CIs."""

    replications: int
    mean_response: float
    mean_response_ci95: float
    blocking_prob: float
    blocking_prob_ci95: float
    mean_jobs_scaled: float
    mean_jobs_scaled_ci95: float
    per_class_jobs: np.ndarray
    littles_residual_max: float
    admitted_total: int
    blocked_total: int
    lyapunov_tails: Optional[dict]
    reps: list[Metrics] = field(repr=False, default_factory=list)


def _mean_ci(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    return mean, float(1.96 * arr.std(ddof=1) / math.sqrt(arr.size))


def aggregate_metrics(reps: Sequence[Metrics]) -> AggregateMetrics:
    """Combine per-replication metrics (order-independent up to the listed
    replication order, which callers keep deterministic)."""
    mr, mr_ci = _mean_ci([m.mean_response for m in reps])
    bp, bp_ci = _mean_ci([m.blocking_prob for m in reps])
    mj, mj_ci = _mean_ci([m.mean_jobs_scaled for m in reps])
    per_class = np.mean([m.per_class_jobs for m in reps], axis=0)
    tails = None
    if all(m.lyapunov_tails is not None for m in reps):
        tails = {
            key: float(np.mean([m.lyapunov_tails[key] for m in reps]))
            for key in reps[0].lyapunov_tails
        }
    return AggregateMetrics(
        replications=len(reps),
        mean_response=mr,
        mean_response_ci95=mr_ci,
        blocking_prob=bp,
        blocking_prob_ci95=bp_ci,
        mean_jobs_scaled=mj,
        mean_jobs_scaled_ci95=mj_ci,
        per_class_jobs=per_class,
        littles_residual_max=max(m.littles_residual for m in reps),
        admitted_total=sum(m.admitted for m in reps),
        blocked_total=sum(m.blocked for m in reps),
        lyapunov_tails=tails,
        reps=list(reps),
    )


def simulate_replications(
    spec: SystemSpec,
    graph: Optional[BipartiteGraph] = None,
    policy: str = "jfsq",
    *,
    replications: int,
    base_seed=0,
    seeds: Optional[Sequence] = None,
    workers: int = 1,
    **kwargs,
) -> AggregateMetrics:
    """Independent replications with seeds spawned from ``base_seed``.

    Replications may run on a thread pool (the compiled kernel releases the
    GIL); aggregation is by replication index, so results are identical to
    sequential execution.
    """
    if replications < 2 and seeds is None:
        raise ValueError("at least two replications required")
    if seeds is None:
        seeds = _as_seedseq(base_seed).spawn(replications)
    else:
        replications = len(seeds)

    def one(i: int) -> Metrics:
        return simulate(spec, graph, policy, seed=seeds[i], **kwargs).metrics

    if workers > 1 and default_backend() == "compiled" and kwargs.get("backend") != "python":
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reps = list(pool.map(one, range(replications)))
    else:
        reps = [one(i) for i in range(replications)]
    return aggregate_metrics(reps)


# ---------------------------------------------------------------------------
# Lyapunov diagnostics and occupancy snapshots
# ---------------------------------------------------------------------------


@dataclass
class LyapunovDiagnostics:
    """Time series of the three collapse diagnostics and their
    holding-time-weighted tail frequencies over the measurement window.

    V1 tracks how far the fast classes are from saturating, V2 adds the
    marginal class, V3 is the scaled job mass on the classes past K.
    """

    times: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    v3: np.ndarray
    tail_v1: float
    tail_v2: float
    tail_v3: float
    threshold_v1: float
    threshold_v2: float
    threshold_v3: float


def lyapunov_trace(
    trace: Trace, theory: TheoryParams, spec: SystemSpec
) -> LyapunovDiagnostics:
    """Replay a trace into V1/V2/V3 series and tail frequencies.

    When K = M there are no classes past K and V3 is identically zero.
    """
    n = spec.n_servers
    m_classes = spec.n_classes
    kk = theory.k
    class_of = spec.class_of
    ev = trace.types
    srv = trace.servers
    qa = trace.queues_after

    admit = ev == EV_ADMIT
    depart = ev == EV_DEPART
    active = admit | depart
    cls = np.where(active, class_of[np.where(active, srv, 0)], -1)

    jobs = np.zeros((len(ev), m_classes))
    busy = np.zeros((len(ev), m_classes))
    for m in range(m_classes):
        jd = np.where(admit & (cls == m), 1, 0) - np.where(depart & (cls == m), 1, 0)
        bd = np.where(admit & (cls == m) & (qa == 1), 1, 0) - np.where(
            depart & (cls == m) & (qa == 0), 1, 0
        )
        jobs[:, m] = np.cumsum(jd)
        busy[:, m] = np.cumsum(bd)
    c = jobs / n  # scaled per-class job counts after each event
    s1 = busy / n  # scaled per-class busy counts after each event

    c_star = np.asarray(theory.c_star_per_class)
    head = c_star[: kk - 1].sum()  # classes strictly before K
    v1 = np.minimum(
        c[:, kk - 1] + (c[:, : kk - 1] - s1[:, : kk - 1]).sum(axis=1),
        head - s1[:, : kk - 1].sum(axis=1),
    )
    v2 = np.minimum(
        (c[:, :kk] - s1[:, :kk]).sum(axis=1),
        c_star.sum()
        + theory.b2
        + 3.0 * theory.tau_1k * theory.delta_bar
        - s1[:, :kk].sum(axis=1),
    )
    v3 = c[:, kk:].sum(axis=1)

    t0, t1 = trace.t0, trace.t1
    starts = np.maximum(trace.times, t0)
    ends = np.minimum(np.append(trace.times[1:], t1), t1)
    weights = np.maximum(ends - starts, 0.0)
    total = t1 - t0
    thr_v1 = theory.b1 + theory.chi / (theory.epsilon * n)
    thr_v2 = theory.b2 + theory.chi / (theory.epsilon * n)
    thr_v3 = theory.b3

    def tail(series: np.ndarray, thr: float) -> float:
        if total <= 0:
            return float("nan")
        return float(weights[series >= thr].sum() / total)

    return LyapunovDiagnostics(
        times=trace.times,
        v1=v1,
        v2=v2,
        v3=v3,
        tail_v1=tail(v1, thr_v1),
        tail_v2=tail(v2, thr_v2),
        tail_v3=tail(v3, thr_v3),
        threshold_v1=thr_v1,
        threshold_v2=thr_v2,
        threshold_v3=thr_v3,
    )


@dataclass
class OccupancySnapshot:
    """Occupancy profile of one state: s[m, i-1] is the fraction of all
    servers that are class m with queue length >= i."""

    s: np.ndarray
    c: np.ndarray
    w: float


def occupancy_snapshot(
    queues: np.ndarray, spec: SystemSpec, k: Optional[int] = None
) -> OccupancySnapshot:
    queues = np.asarray(queues)
    n = spec.n_servers
    m_classes = spec.n_classes
    levels = int(queues.max()) if queues.size else 0
    s = np.zeros((m_classes, max(levels, 1)))
    class_of = spec.class_of
    for m in range(m_classes):
        q = queues[class_of == m]
        for i in range(1, levels + 1):
            s[m, i - 1] = np.count_nonzero(q >= i) / n
    c = s.sum(axis=1)
    k = k if k is not None else m_classes
    w = float(np.dot(spec.rates[:k], s[:k, 0])) if levels else 0.0
    return OccupancySnapshot(s=s, c=c, w=w)


def write_trace(trace: Trace, path: str) -> None:
    """CSV rows time,event_type,server,port,queue_after."""
    with open(path, "w", newline="\n") as fh:
        fh.write("time,event_type,server,port,queue_after\n")
        for i in range(len(trace)):
            fh.write(
                f"{trace.times[i]:.15g},{_EVENT_NAMES[int(trace.types[i])]},"
                f"{int(trace.servers[i])},{int(trace.ports[i])},"
                f"{int(trace.queues_after[i])}\n"
            )
