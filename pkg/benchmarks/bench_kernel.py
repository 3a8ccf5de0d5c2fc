"""Throughput comparison of the compiled and pure-Python event loops.

Usage: python benchmarks/bench_kernel.py [--arrivals N]

Runs the same mid-size workload (four server classes, random bipartite
graph, jfsq) on both backends, verifies the results are bit-identical,
and reports events per second.
"""

import argparse
import time

from bipartite_lb.graph import generate_sim_random
from bipartite_lb.model import build_system
from bipartite_lb.sim import have_compiled_kernel, simulate


def build_workload():
    n, load = 256, 0.9
    ports = round(n**1.5)
    cap = sum(r * 0.25 for r in (1.0, 0.5, 0.25, 0.125))
    spec = build_system(
        n, [1.0, 0.5, 0.25, 0.125], [0.25] * 4, [load * cap * n / ports] * ports, 5
    )
    graph = generate_sim_random(n, ports, load, seed=7)
    return spec, graph


def bench(backend, spec, graph, arrivals):
    t0 = time.perf_counter()
    metrics = simulate(
        spec, graph, "jfsq", horizon_arrivals=arrivals, seed=11, backend=backend
    ).metrics
    elapsed = time.perf_counter() - t0
    events = arrivals + metrics.admitted / (1 - 0.2)  # arrivals + departures, roughly
    return metrics, elapsed, events / elapsed


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--arrivals", type=int, default=200_000)
    args = parser.parse_args()

    spec, graph = build_workload()
    print(f"workload: N={spec.n_servers}, L={spec.num_ports}, "
          f"{graph.edge_count} edges, {args.arrivals} arrivals, jfsq")

    if not have_compiled_kernel():
        print("compiled kernel NOT available; benchmarking python only")
        m, dt, rate = bench("python", spec, graph, args.arrivals)
        print(f"python  : {dt:8.2f}s  {rate:12.0f} events/s")
        return

    m_c, dt_c, rate_c = bench("compiled", spec, graph, args.arrivals)
    m_p, dt_p, rate_p = bench("python", spec, graph, args.arrivals)
    print(f"compiled: {dt_c:8.2f}s  {rate_c:12.0f} events/s")
    print(f"python  : {dt_p:8.2f}s  {rate_p:12.0f} events/s")
    print(f"speedup : {dt_p / dt_c:8.1f}x")
    identical = (
        m_c.mean_response == m_p.mean_response
        and m_c.blocking_prob == m_p.blocking_prob
        and m_c.mean_jobs_scaled == m_p.mean_jobs_scaled
    )
    print(f"backends bit-identical: {identical}")
    if not identical:
        raise SystemExit(1)


if __name__ == "__main__":
    main()
