# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event loop.

Mirrors ``_pykernel.run`` operation for operation: same random-stream
consumption, same floating-point expression shapes, same event ordering.
Both backends must stay bit-identical; cross-backend equality is enforced
by the test suite.
"""

from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport log1p
from libc.stdlib cimport free, malloc
from numpy.random cimport bitgen_t


COMPILED = True

EV_ADMIT = 0
EV_BLOCK = 1
EV_DEPART = 2

cdef signed char _C_ADMIT = 0
cdef signed char _C_BLOCK = 1
cdef signed char _C_DEPART = 2


cdef inline double _u(bitgen_t* rng) noexcept nogil:
    return rng.next_double(rng.state)


cdef inline double _exp_draw(bitgen_t* rng, double rate) noexcept nogil:
    return -log1p(-_u(rng)) / rate


cdef inline bint _before(double t1, long long r1, double t2, long long r2) noexcept nogil:
    return t1 < t2 or (t1 == t2 and r1 < r2)


cdef void _heap_push(double* ht, long long* hr, long long* size,
                     double t, long long r) noexcept nogil:
    cdef long long i = size[0]
    cdef long long p
    size[0] = i + 1
    while i > 0:
        p = (i - 1) >> 1
        if _before(t, r, ht[p], hr[p]):
            ht[i] = ht[p]
            hr[i] = hr[p]
            i = p
        else:
            break
    ht[i] = t
    hr[i] = r


cdef void _heap_pop(double* ht, long long* hr, long long* size) noexcept nogil:
    cdef long long n = size[0] - 1
    cdef double t
    cdef long long r, i, c
    size[0] = n
    if n == 0:
        return
    t = ht[n]
    r = hr[n]
    i = 0
    while True:
        c = 2 * i + 1
        if c >= n:
            break
        if c + 1 < n and _before(ht[c + 1], hr[c + 1], ht[c], hr[c]):
            c += 1
        if _before(ht[c], hr[c], t, r):
            ht[i] = ht[c]
            hr[i] = hr[c]
            i = c
        else:
            break
    ht[i] = t
    hr[i] = r


# Per-server FIFO of signed arrival stamps (negative = job arrived during
# warmup).  Ring buffer grown by doubling.
cdef struct Fifo:
    double* buf
    long long head
    long long size
    long long cap


cdef inline bint _fifo_push(Fifo* f, double value) noexcept nogil:
    cdef double* fresh
    cdef long long i
    if f.size == f.cap:
        fresh = <double*> malloc(2 * f.cap * sizeof(double))
        if fresh == NULL:
            return False
        for i in range(f.size):
            fresh[i] = f.buf[(f.head + i) % f.cap]
        free(f.buf)
        f.buf = fresh
        f.head = 0
        f.cap = 2 * f.cap
    f.buf[(f.head + f.size) % f.cap] = value
    f.size += 1
    return True


cdef inline double _fifo_pop(Fifo* f) noexcept nogil:
    cdef double value = f.buf[f.head]
    f.head = (f.head + 1) % f.cap
    f.size -= 1
    return value


cdef long long _route_jfsq(long long port, long long* q, long long* indptr,
                           int* indices, double* mu, bitgen_t* rng,
                           long long buffer_cap) noexcept nogil:
    cdef long long lo = indptr[port], hi = indptr[port + 1]
    cdef long long best_q = -1, count = 0
    cdef double best_mu = -1.0
    cdef long long i, r, qq, idx, seen
    for i in range(lo, hi):
        r = indices[i]
        qq = q[r]
        if count == 0 or qq < best_q:
            best_q = qq
            best_mu = mu[r]
            count = 1
        elif qq == best_q:
            if mu[r] > best_mu:
                best_mu = mu[r]
                count = 1
            elif mu[r] == best_mu:
                count += 1
    idx = <long long>(_u(rng) * count)
    if best_q == buffer_cap:
        return -1
    seen = 0
    for i in range(lo, hi):
        r = indices[i]
        if q[r] == best_q and mu[r] == best_mu:
            if seen == idx:
                return r
            seen += 1
    return -1


cdef long long _route_jsq(long long port, long long* q, long long* indptr,
                          int* indices, bitgen_t* rng,
                          long long buffer_cap) noexcept nogil:
    cdef long long lo = indptr[port], hi = indptr[port + 1]
    cdef long long best_q = -1, count = 0
    cdef long long i, r, qq, idx, seen
    for i in range(lo, hi):
        r = indices[i]
        qq = q[r]
        if count == 0 or qq < best_q:
            best_q = qq
            count = 1
        elif qq == best_q:
            count += 1
    idx = <long long>(_u(rng) * count)
    if best_q == buffer_cap:
        return -1
    seen = 0
    for i in range(lo, hi):
        r = indices[i]
        if q[r] == best_q:
            if seen == idx:
                return r
            seen += 1
    return -1


cdef long long _route_jfiq(long long port, long long* q, long long* indptr,
                           int* indices, double* mu, bitgen_t* rng,
                           long long buffer_cap) noexcept nogil:
    cdef long long lo = indptr[port], hi = indptr[port + 1]
    cdef double best_mu = -1.0
    cdef long long count = 0
    cdef long long i, r, idx, seen
    for i in range(lo, hi):
        r = indices[i]
        if q[r] == 0:
            if mu[r] > best_mu:
                best_mu = mu[r]
                count = 1
            elif mu[r] == best_mu:
                count += 1
    if count > 0:
        idx = <long long>(_u(rng) * count)
        seen = 0
        for i in range(lo, hi):
            r = indices[i]
            if q[r] == 0 and mu[r] == best_mu:
                if seen == idx:
                    return r
                seen += 1
        return -1
    r = indices[lo + <long long>(_u(rng) * (hi - lo))]
    if q[r] == buffer_cap:
        return -1
    return r


cdef long long _route_jiq(long long port, long long* q, long long* indptr,
                          int* indices, bitgen_t* rng,
                          long long buffer_cap) noexcept nogil:
    cdef long long lo = indptr[port], hi = indptr[port + 1]
    cdef long long n_idle = 0
    cdef long long i, r, idx, seen
    for i in range(lo, hi):
        if q[indices[i]] == 0:
            n_idle += 1
    if n_idle > 0:
        idx = <long long>(_u(rng) * n_idle)
        seen = 0
        for i in range(lo, hi):
            r = indices[i]
            if q[r] == 0:
                if seen == idx:
                    return r
                seen += 1
        return -1
    r = indices[lo + <long long>(_u(rng) * (hi - lo))]
    if q[r] == buffer_cap:
        return -1
    return r


cdef long long _route_random(long long port, long long* q, long long* indptr,
                             int* indices, bitgen_t* rng,
                             long long buffer_cap) noexcept nogil:
    cdef long long lo = indptr[port], hi = indptr[port + 1]
    cdef long long r = indices[lo + <long long>(_u(rng) * (hi - lo))]
    if q[r] == buffer_cap:
        return -1
    return r


cdef inline long long _shorter2(long long a, long long b, long long* q,
                                bitgen_t* rng) noexcept nogil:
    if q[a] < q[b]:
        return a
    if q[b] < q[a]:
        return b
    if <long long>(_u(rng) * 2) == 0:
        return a
    return b


cdef long long _route_jsq22(long long* q, long long n_fast, long long n_servers,
                            double pf, double ps, bitgen_t* rng,
                            long long buffer_cap) noexcept nogil:
    cdef long long f1, f2, s1, s2, i, j, r
    cdef long long n_slow = n_servers - n_fast
    cdef bint two_fast = n_fast >= 2
    cdef bint two_slow = n_slow >= 2
    if two_fast:
        i = <long long>(_u(rng) * n_fast)
        j = <long long>(_u(rng) * (n_fast - 1))
        if j >= i:
            j += 1
        f1 = i
        f2 = j
    else:
        f1 = 0
        f2 = -1
    if two_slow:
        i = <long long>(_u(rng) * n_slow)
        j = <long long>(_u(rng) * (n_slow - 1))
        if j >= i:
            j += 1
        s1 = n_fast + i
        s2 = n_fast + j
    else:
        s1 = n_fast
        s2 = -1

    # idle fast candidates (order f1, f2 matches the reference tuple)
    cdef long long idle_a = -1, idle_b = -1, n_idle = 0
    if q[f1] == 0:
        idle_a = f1
        n_idle = 1
    if f2 >= 0 and q[f2] == 0:
        if n_idle == 0:
            idle_a = f2
        else:
            idle_b = f2
        n_idle += 1
    if n_idle > 0:
        if n_idle == 1:
            _u(rng)  # tie-break draw is consumed unconditionally
            r = idle_a
        else:
            r = idle_a if <long long>(_u(rng) * 2) == 0 else idle_b
    else:
        idle_a = -1
        idle_b = -1
        n_idle = 0
        if q[s1] == 0:
            idle_a = s1
            n_idle = 1
        if s2 >= 0 and q[s2] == 0:
            if n_idle == 0:
                idle_a = s2
            else:
                idle_b = s2
            n_idle += 1
        if n_idle > 0:
            if _u(rng) < ps:
                if n_idle == 1:
                    _u(rng)
                    r = idle_a
                else:
                    r = idle_a if <long long>(_u(rng) * 2) == 0 else idle_b
            else:
                r = f1 if f2 < 0 else _shorter2(f1, f2, q, rng)
        else:
            if _u(rng) < pf:
                r = f1 if f2 < 0 else _shorter2(f1, f2, q, rng)
            else:
                r = s1 if s2 < 0 else _shorter2(s1, s2, q, rng)
    if q[r] == buffer_cap:
        return -1
    return r


def run(
    object rng_generator,
    double lam_total,
    double[::1] alias_prob,
    int[::1] alias_idx,
    long long[::1] indptr,
    int[::1] indices,
    double[::1] mu,
    int[::1] class_of,
    long long n_classes,
    long long buffer_cap,
    long long policy_code,
    double pf,
    double ps,
    long long n_fast,
    long long svc_code,
    double[::1] svc_prob_a,
    double[::1] svc_rate_a,
    double[::1] svc_rate_b,
    long long mode,
    long long horizon_arrivals,
    long long warmup_arrivals,
    double horizon_time,
    double warmup_time,
    bint collect_trace,
    bint debug_checks,
    double[::1] tr_time,
    signed char[::1] tr_type,
    int[::1] tr_srv,
    int[::1] tr_port,
    int[::1] tr_q,
):
    cdef bitgen_t* rng = <bitgen_t*> PyCapsule_GetPointer(
        rng_generator.bit_generator.capsule, "BitGenerator"
    )
    cdef long long n_servers = mu.shape[0]
    cdef long long n_ports = alias_prob.shape[0]

    cdef long long* queues = <long long*> malloc(n_servers * sizeof(long long))
    cdef double* heap_t = <double*> malloc((n_servers + 1) * sizeof(double))
    cdef long long* heap_r = <long long*> malloc((n_servers + 1) * sizeof(long long))
    cdef Fifo* fifo = <Fifo*> malloc(n_servers * sizeof(Fifo))
    cdef long long* jobs_per_class = <long long*> malloc(n_classes * sizeof(long long))
    cdef double* class_integral = <double*> malloc(n_classes * sizeof(double))
    if (queues == NULL or heap_t == NULL or heap_r == NULL or fifo == NULL
            or jobs_per_class == NULL or class_integral == NULL):
        free(queues); free(heap_t); free(heap_r); free(fifo)
        free(jobs_per_class); free(class_integral)
        raise MemoryError
    cdef long long i
    cdef bint alloc_failed = False
    for i in range(n_servers):
        queues[i] = 0
        fifo[i].buf = <double*> malloc(4 * sizeof(double))
        if fifo[i].buf == NULL:
            alloc_failed = True
        fifo[i].head = 0
        fifo[i].size = 0
        fifo[i].cap = 4
    for i in range(n_classes):
        jobs_per_class[i] = 0
        class_integral[i] = 0.0

    cdef long long heap_size = 0
    cdef double inf = float("inf")
    cdef double t0_eff, t1_eff, t0_out, t1_out
    if mode == 0:
        t0_eff = 0.0 if warmup_arrivals == 0 else inf
        t1_eff = inf
    else:
        t0_eff = warmup_time
        t1_eff = horizon_time
    t0_out = t0_eff if t0_eff != inf else 0.0
    t1_out = t1_eff if t1_eff != inf else 0.0

    cdef long long admitted = 0, blocked = 0, resp_count = 0
    cdef long long arrivals_done = 0, n_events = 0, max_queue = 0
    cdef double resp_sum = 0.0, last_t = 0.0
    cdef double arr_clock, next_arrival, t, lo_t, hi_t, dt, x, stamp, svc, rate
    cdef long long server = -1, port, dest, k, m, err = 0
    cdef bint have_arrival, is_arrival, measured

    cdef long long* indptr_p = &indptr[0]
    cdef int* indices_p = &indices[0] if indices.shape[0] > 0 else NULL
    cdef double* mu_p = &mu[0]
    cdef int* class_p = &class_of[0]
    cdef double* svc_pa = &svc_prob_a[0]
    cdef double* svc_ra = &svc_rate_a[0]
    cdef double* svc_rb = &svc_rate_b[0]
    cdef double* aprob = &alias_prob[0]
    cdef int* aidx = &alias_idx[0]

    if alloc_failed:
        err = 9
    with nogil:
        if err == 0:
            arr_clock = _exp_draw(rng, lam_total)
            next_arrival = arr_clock
            while True:
                if mode == 0:
                    have_arrival = arrivals_done < horizon_arrivals
                else:
                    have_arrival = next_arrival <= horizon_time
                if have_arrival and (heap_size == 0 or
                                     next_arrival <= heap_t[0]):
                    t = next_arrival
                    is_arrival = True
                elif heap_size > 0:
                    t = heap_t[0]
                    server = heap_r[0]
                    is_arrival = False
                else:
                    break

                lo_t = last_t if last_t > t0_eff else t0_eff
                hi_t = t if t < t1_eff else t1_eff
                if hi_t > lo_t:
                    dt = hi_t - lo_t
                    for m in range(n_classes):
                        class_integral[m] += jobs_per_class[m] * dt
                last_t = t

                if is_arrival:
                    arrivals_done += 1
                    if mode == 0:
                        measured = arrivals_done > warmup_arrivals
                    else:
                        measured = t > warmup_time
                    x = _u(rng) * n_ports
                    k = <long long> x
                    port = k if (x - k) < aprob[k] else aidx[k]
                    if policy_code == 0:
                        dest = _route_jfsq(port, queues, indptr_p, indices_p,
                                           mu_p, rng, buffer_cap)
                    elif policy_code == 1:
                        dest = _route_jfiq(port, queues, indptr_p, indices_p,
                                           mu_p, rng, buffer_cap)
                    elif policy_code == 2:
                        dest = _route_jsq(port, queues, indptr_p, indices_p,
                                          rng, buffer_cap)
                    elif policy_code == 3:
                        dest = _route_jiq(port, queues, indptr_p, indices_p,
                                          rng, buffer_cap)
                    elif policy_code == 4:
                        dest = _route_jsq22(queues, n_fast, n_servers, pf, ps,
                                            rng, buffer_cap)
                    else:
                        dest = _route_random(port, queues, indptr_p, indices_p,
                                             rng, buffer_cap)
                    if dest < 0:
                        if measured:
                            blocked += 1
                        if collect_trace:
                            tr_time[n_events] = t
                            tr_type[n_events] = _C_BLOCK
                            tr_srv[n_events] = -1
                            tr_port[n_events] = <int> port
                            tr_q[n_events] = -1
                    else:
                        if debug_checks and policy_code != 4:
                            err = 1
                            for i in range(indptr_p[port], indptr_p[port + 1]):
                                if indices_p[i] == dest:
                                    err = 0
                                    break
                            if err != 0:
                                break
                        if debug_checks and queues[dest] >= buffer_cap:
                            err = 2
                            break
                        queues[dest] += 1
                        if queues[dest] > max_queue:
                            max_queue = queues[dest]
                        jobs_per_class[class_p[dest]] += 1
                        stamp = t if measured else -t - 1.0
                        if not _fifo_push(&fifo[dest], stamp):
                            err = 9
                            break
                        if measured:
                            admitted += 1
                        if queues[dest] == 1:
                            if svc_code == 0:
                                svc = _exp_draw(rng, mu_p[dest])
                            else:
                                m = class_p[dest]
                                rate = svc_ra[m] if _u(rng) < svc_pa[m] else svc_rb[m]
                                svc = _exp_draw(rng, rate)
                            _heap_push(heap_t, heap_r, &heap_size, t + svc, dest)
                        if collect_trace:
                            tr_time[n_events] = t
                            tr_type[n_events] = _C_ADMIT
                            tr_srv[n_events] = <int> dest
                            tr_port[n_events] = <int> port
                            tr_q[n_events] = <int> queues[dest]
                    n_events += 1
                    if mode == 0:
                        if arrivals_done == warmup_arrivals:
                            t0_eff = t
                            t0_out = t
                        if arrivals_done == horizon_arrivals:
                            t1_eff = t
                            t1_out = t
                    arr_clock += _exp_draw(rng, lam_total)
                    next_arrival = arr_clock
                else:
                    _heap_pop(heap_t, heap_r, &heap_size)
                    stamp = _fifo_pop(&fifo[server])
                    if stamp >= 0.0:
                        resp_sum += t - stamp
                        resp_count += 1
                    queues[server] -= 1
                    if debug_checks and queues[server] < 0:
                        err = 3
                        break
                    jobs_per_class[class_p[server]] -= 1
                    if queues[server] > 0:
                        if svc_code == 0:
                            svc = _exp_draw(rng, mu_p[server])
                        else:
                            m = class_p[server]
                            rate = svc_ra[m] if _u(rng) < svc_pa[m] else svc_rb[m]
                            svc = _exp_draw(rng, rate)
                        _heap_push(heap_t, heap_r, &heap_size, t + svc, server)
                    if collect_trace:
                        tr_time[n_events] = t
                        tr_type[n_events] = _C_DEPART
                        tr_srv[n_events] = <int> server
                        tr_port[n_events] = -1
                        tr_q[n_events] = <int> queues[server]
                    n_events += 1

    integrals = [class_integral[m] for m in range(n_classes)]
    result = {
        "admitted": admitted,
        "blocked": blocked,
        "resp_sum": resp_sum,
        "resp_count": resp_count,
        "t0": t0_out,
        "t1": t1_out,
        "per_class_jobs_integral": integrals,
        "n_events": n_events,
        "max_queue": max_queue,
        "final_time": last_t,
    }
    for i in range(n_servers):
        free(fifo[i].buf)
    free(queues); free(heap_t); free(heap_r); free(fifo)
    free(jobs_per_class); free(class_integral)
    if err == 1:
        raise AssertionError("routed to a non-neighbor")
    if err == 2:
        raise AssertionError("routed to a full server")
    if err == 3:
        raise AssertionError("negative queue")
    if err == 9:
        raise MemoryError
    return result
