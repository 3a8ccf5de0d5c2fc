"""Pure-Python event loop, the fallback backend of the simulator.

This implements exactly the same algorithm and random-stream consumption as
the compiled kernel so that both backends produce bit-identical results for
the same seed.  Any change here must be mirrored in ``_kernel.pyx``.

Stream order per arrival event: port draw (one uniform through the alias
table), routing draws (see ``policy``), service draw(s) if the job enters
service immediately, then the next interarrival draw.  A departure draws
service time(s) only when another job starts service.  Simultaneous events
are ordered arrival-first, then by server index among completions.
"""

from __future__ import annotations

import heapq
from collections import deque
from math import log1p

from . import policy as _policy

COMPILED = False

EV_ADMIT = 0
EV_BLOCK = 1
EV_DEPART = 2


class _GraphView:
    __slots__ = ("indptr", "indices", "num_servers", "num_ports")

    def __init__(self, indptr, indices, num_ports, num_servers):
        self.indptr = indptr
        self.indices = indices
        self.num_ports = num_ports
        self.num_servers = num_servers


def run(
    rng,
    lam_total,
    alias_prob,
    alias_idx,
    indptr,
    indices,
    mu,
    class_of,
    n_classes,
    buffer_cap,
    policy_code,
    pf,
    ps,
    n_fast,
    svc_code,
    svc_prob_a,
    svc_rate_a,
    svc_rate_b,
    mode,
    horizon_arrivals,
    warmup_arrivals,
    horizon_time,
    warmup_time,
    collect_trace,
    debug_checks,
    tr_time,
    tr_type,
    tr_srv,
    tr_port,
    tr_q,
):
    u = rng.random  # one uniform per call, same stream as the compiled path
    n_ports = len(alias_prob)
    n_servers = len(mu)
    alias_prob = list(alias_prob)
    alias_idx = list(alias_idx)
    indptr_l = list(indptr)
    indices_l = list(indices)
    mu_l = [float(x) for x in mu]
    class_l = [int(c) for c in class_of]
    svc_pa = [float(x) for x in svc_prob_a]
    svc_ra = [float(x) for x in svc_rate_a]
    svc_rb = [float(x) for x in svc_rate_b]
    gview = _GraphView(indptr_l, indices_l, n_ports, n_servers)

    route_fns = {
        0: _policy.route_jfsq,
        1: _policy.route_jfiq,
        2: _policy.route_jsq,
        3: _policy.route_jiq,
        5: _policy.route_random,
    }

    queues = [0] * n_servers
    fifo = [deque() for _ in range(n_servers)]
    heap: list[tuple[float, int]] = []
    jobs_per_class = [0] * n_classes
    class_integral = [0.0] * n_classes

    inf = float("inf")
    if mode == 0:
        t0_eff = 0.0 if warmup_arrivals == 0 else inf
        t1_eff = inf
    else:
        t0_eff = warmup_time
        t1_eff = horizon_time
    t0_out = t0_eff if t0_eff != inf else 0.0
    t1_out = t1_eff if t1_eff != inf else 0.0

    admitted = 0
    blocked = 0
    resp_sum = 0.0
    resp_count = 0
    arrivals_done = 0
    n_events = 0
    max_queue = 0
    last_t = 0.0

    arr_clock = -log1p(-u()) / lam_total
    next_arrival = arr_clock

    def service_time(r):
        if svc_code == 0:
            return -log1p(-u()) / mu_l[r]
        m = class_l[r]
        rate = svc_ra[m] if u() < svc_pa[m] else svc_rb[m]
        return -log1p(-u()) / rate

    while True:
        if mode == 0:
            have_arrival = arrivals_done < horizon_arrivals
        else:
            have_arrival = next_arrival <= horizon_time
        if have_arrival and (not heap or next_arrival <= heap[0][0]):
            t = next_arrival
            is_arrival = True
        elif heap:
            t, server = heap[0]
            is_arrival = False
        else:
            break

        lo = last_t if last_t > t0_eff else t0_eff
        hi = t if t < t1_eff else t1_eff
        if hi > lo:
            dt = hi - lo
            for m in range(n_classes):
                class_integral[m] += jobs_per_class[m] * dt
        last_t = t

        if is_arrival:
            arrivals_done += 1
            if mode == 0:
                measured = arrivals_done > warmup_arrivals
            else:
                measured = t > warmup_time
            x = u() * n_ports
            k = int(x)
            port = k if (x - k) < alias_prob[k] else alias_idx[k]
            if policy_code == 4:
                dest = _policy.route_jsq22(
                    port, queues, gview, class_l, pf, ps, rng, buffer_cap, n_fast
                )
            else:
                dest = route_fns[policy_code](
                    port, queues, gview, mu_l, rng, buffer_cap
                )
            if dest == _policy.BLOCKED:
                if measured:
                    blocked += 1
                if collect_trace:
                    tr_time[n_events] = t
                    tr_type[n_events] = EV_BLOCK
                    tr_srv[n_events] = -1
                    tr_port[n_events] = port
                    tr_q[n_events] = -1
            else:
                if debug_checks:
                    ok = False
                    for i in range(indptr_l[port], indptr_l[port + 1]):
                        if indices_l[i] == dest:
                            ok = True
                            break
                    assert ok, "routed to a non-neighbor"
                    assert queues[dest] < buffer_cap, "routed to a full server"
                q_new = queues[dest] + 1
                queues[dest] = q_new
                if q_new > max_queue:
                    max_queue = q_new
                jobs_per_class[class_l[dest]] += 1
                fifo[dest].append(t if measured else -t - 1.0)
                if measured:
                    admitted += 1
                if q_new == 1:
                    heapq.heappush(heap, (t + service_time(dest), dest))
                if collect_trace:
                    tr_time[n_events] = t
                    tr_type[n_events] = EV_ADMIT
                    tr_srv[n_events] = dest
                    tr_port[n_events] = port
                    tr_q[n_events] = q_new
            n_events += 1
            if mode == 0:
                if arrivals_done == warmup_arrivals:
                    t0_eff = t
                    t0_out = t
                if arrivals_done == horizon_arrivals:
                    t1_eff = t
                    t1_out = t
            arr_clock += -log1p(-u()) / lam_total
            next_arrival = arr_clock
        else:
            heapq.heappop(heap)
            stamp = fifo[server].popleft()
            if stamp >= 0.0:
                resp_sum += t - stamp
                resp_count += 1
            q_new = queues[server] - 1
            queues[server] = q_new
            if debug_checks:
                assert q_new >= 0, "negative queue"
            jobs_per_class[class_l[server]] -= 1
            if q_new > 0:
                heapq.heappush(heap, (t + service_time(server), server))
            if collect_trace:
                tr_time[n_events] = t
                tr_type[n_events] = EV_DEPART
                tr_srv[n_events] = server
                tr_port[n_events] = -1
                tr_q[n_events] = q_new
            n_events += 1

    return {
        "admitted": admitted,
        "blocked": blocked,
        "resp_sum": resp_sum,
        "resp_count": resp_count,
        "t0": t0_out,
        "t1": t1_out,
        "per_class_jobs_integral": class_integral,
        "n_events": n_events,
        "max_queue": max_queue,
        "final_time": last_t,
    }
