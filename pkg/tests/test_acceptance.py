"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines and timings.  The heavy experiment sweeps are shared module-scoped
fixtures; stated runtime budgets include the fixture that feeds each
criterion.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from bipartite_lb.cli import main as cli_main
from bipartite_lb.exact import exact_metrics, stationary
from bipartite_lb.graph import (
    BipartiteGraph,
    check_well_connected_exact,
    check_well_connected_sampled,
    generate_homogeneous,
    generate_sim_random,
)
from bipartite_lb.model import build_system, derive_theory
from bipartite_lb.sim import (
    aggregate_metrics,
    hyperexp_class_rates,
    sample_hyperexp_base,
    simulate,
    simulate_replications,
)
from conftest import fig2_graph, fig2_system, scaling_system

SEED = 987654321
WORKERS = 2
REPLICATIONS = 10
N_GRID = (128, 256, 512, 1024, 2048)
SCALING_LB = 1.6296296296296295  # C*/lambda of the four-class system at load 0.9


def report(n, name, ok, detail=""):
    line = f"ACCEPTANCE {n} ({name}): {'PASS' if ok else 'FAIL'} {detail}"
    print(line, flush=True)
    return ok


def _grid_sweep(policies, service_model, rates, seed_tag, fixture_clock):
    """10 replications per (N, policy); the graph is regenerated per
    (N, replication) and shared across policies for paired comparison."""
    results = {}
    for n_idx, n in enumerate(N_GRID):
        spec = scaling_system(n, rates=rates)
        horizon = 2_000_000 if n >= 1024 else 1_000_000
        ports = spec.num_ports

        def one_rep(rep):
            gseed = np.random.SeedSequence(SEED, spawn_key=(seed_tag, n_idx, rep))
            g = generate_sim_random(n, ports, 0.9, seed=gseed)
            out = {}
            for p_idx, policy in enumerate(policies):
                sseed = np.random.SeedSequence(
                    SEED, spawn_key=(seed_tag, n_idx, rep, p_idx)
                )
                out[policy] = simulate(
                    spec,
                    g,
                    policy,
                    seed=sseed,
                    service_model=service_model,
                    horizon_arrivals=horizon,
                    warmup_fraction=0.2,
                ).metrics
            return out

        with ThreadPoolExecutor(max_workers=WORKERS) as pool:
            reps = list(pool.map(one_rep, range(REPLICATIONS)))
        for policy in policies:
            results[(n, policy)] = aggregate_metrics([r[policy] for r in reps])
    fixture_clock.append(time.monotonic())
    return results


@pytest.fixture(scope="module")
def fig2_results():
    t0 = time.monotonic()
    results = {}
    for l_idx, load in enumerate((0.3, 0.5, 0.7, 0.9)):
        spec = fig2_system(load)
        theory = derive_theory(spec)
        g = fig2_graph()
        for p_idx, policy in enumerate(("jfsq", "jfiq", "jsq", "jiq", "jsq22")):
            seeds = np.random.SeedSequence(
                SEED, spawn_key=(1, l_idx, p_idx)
            ).spawn(REPLICATIONS)
            agg = simulate_replications(
                spec,
                g,
                policy,
                replications=REPLICATIONS,
                seeds=seeds,
                workers=WORKERS,
                horizon_arrivals=1_000_000,
                warmup_fraction=0.2,
            )
            results[(load, policy)] = (theory, agg)
    return results, time.monotonic() - t0


@pytest.fixture(scope="module")
def scaling_results():
    t0 = time.monotonic()
    clock = []
    res = _grid_sweep(("jfsq", "jfiq", "jsq", "jiq"), "exponential", None, 2, clock)
    return res, clock[-1] - t0


@pytest.fixture(scope="module")
def hyper_results():
    t0 = time.monotonic()
    clock = []
    res = _grid_sweep(
        ("jfsq",), "hyperexponential", hyperexp_class_rates(4), 3, clock
    )
    return res, clock[-1] - t0


def test_c1_mm1b_oracle():
    t0 = time.monotonic()
    rho, b = 0.8, 5
    analytic = (1 - rho) * rho**b / (1 - rho ** (b + 1))
    spec = build_system(1, [1.0], [1.0], [0.8], 5)
    g = BipartiteGraph.fully_connected(1, 1)
    agg = simulate_replications(
        spec,
        g,
        "jfsq",
        replications=10,
        base_seed=SEED,
        workers=WORKERS,
        horizon_arrivals=1_000_000,
    )
    elapsed = time.monotonic() - t0
    err = abs(agg.blocking_prob - analytic)
    ok = err < 0.005 and elapsed < 10.0
    assert report(
        1, "M/M/1/b oracle", ok,
        f"blocking {agg.blocking_prob:.5f} vs {analytic:.5f} (err {err:.2e}), {elapsed:.1f}s",
    )


def test_c2_exact_equivalence():
    t0 = time.monotonic()
    spec = build_system(2, [2.0, 1.0], [0.5, 0.5], [1.5], 2)
    g = BipartiteGraph.fully_connected(1, 2)
    details = []
    ok = True
    for policy in ("jfsq", "jfiq", "jsq", "jiq"):
        dist = stationary(spec, g, policy)
        assert dist.residual < 1e-10
        em = exact_metrics(dist, spec, g, policy)
        agg = simulate_replications(
            spec,
            g,
            policy,
            replications=10,
            base_seed=SEED + 1,
            workers=WORKERS,
            horizon_arrivals=500_000,
        )
        se_jobs = max(agg.mean_jobs_scaled_ci95 / 1.96, 1e-9)
        se_blk = max(agg.blocking_prob_ci95 / 1.96, 1e-9)
        dev_jobs = abs(agg.mean_jobs_scaled - em.mean_jobs_scaled) / se_jobs
        dev_blk = abs(agg.blocking_prob - em.blocking_prob) / se_blk
        ok = ok and dev_jobs < 3.0 and dev_blk < 3.0
        details.append(f"{policy}: jobs {dev_jobs:.2f}se blk {dev_blk:.2f}se")
    elapsed = time.monotonic() - t0
    ok = ok and elapsed < 60.0
    assert report(2, "exact-CTMC equivalence", ok, "; ".join(details) + f", {elapsed:.1f}s")


def test_c3_policy_degeneracy():
    spec = build_system(8, [1.0], [1.0], [6.4], 3)
    g = BipartiteGraph.fully_connected(1, 8)
    a = simulate(spec, g, "jfsq", horizon_arrivals=52_000, seed=SEED, collect_trace=True)
    b = simulate(spec, g, "jsq", horizon_arrivals=52_000, seed=SEED, collect_trace=True)
    long_enough = len(a.trace) >= 100_000
    identical = (
        np.array_equal(a.trace.times, b.trace.times)
        and np.array_equal(a.trace.types, b.trace.types)
        and np.array_equal(a.trace.servers, b.trace.servers)
        and np.array_equal(a.trace.ports, b.trace.ports)
        and np.array_equal(a.trace.queues_after, b.trace.queues_after)
    )
    assert report(
        3, "policy degeneracy", identical and long_enough,
        f"{len(a.trace)} events compared",
    )


def test_c4_fig2_reproduction(fig2_results):
    results, elapsed = fig2_results
    ok = True
    details = []
    for load in (0.3, 0.5, 0.7, 0.9):
        theory, _ = results[(load, "jfsq")]
        lb = theory.service_time_lb
        for policy in ("jfsq", "jfiq"):
            _, agg = results[(load, policy)]
            lo_ok = agg.mean_response >= lb - 2 * agg.mean_response_ci95
            hi_ok = agg.mean_response <= lb * 1.10
            ok = ok and lo_ok and hi_ok
            details.append(
                f"{policy}@{load}: {agg.mean_response:.4f} vs lb {lb:.4f}"
            )
    _, jsq22 = results[(0.3, "jsq22")]
    _, jiq = results[(0.3, "jiq")]
    light_ok = jsq22.mean_response < jiq.mean_response
    ok = ok and light_ok and elapsed < 900.0
    details.append(
        f"jsq22@0.3 {jsq22.mean_response:.3f} < jiq {jiq.mean_response:.3f}: {light_ok}"
    )
    # The 1.10 cap at load 0.5 sits ~1% below the true finite-system value
    # at N=500 (the fast class runs at 90% there; the measured ratio falls
    # to 1.0 as N grows, see the project notes).  Asserted as stated; the
    # load-0.5 sub-assertion is expected to fail.
    assert report(4, "two-class load sweep", ok, "; ".join(details) + f", {elapsed:.0f}s")


def _trend_inversions(gaps, cis):
    """Count upward steps, split into CI-covered and uncovered."""
    covered = uncovered = 0
    for i in range(len(gaps) - 1):
        if gaps[i + 1] > gaps[i]:
            if gaps[i + 1] - gaps[i] <= cis[i] + cis[i + 1]:
                covered += 1
            else:
                uncovered += 1
    return covered, uncovered


def test_c5_scaling_convergence(scaling_results):
    results, elapsed = scaling_results
    lb = SCALING_LB
    gaps = [(results[(n, "jfsq")].mean_response - lb) / lb for n in N_GRID]
    cis = [results[(n, "jfsq")].mean_response_ci95 / lb for n in N_GRID]
    covered, uncovered = _trend_inversions(gaps, cis)
    trend_ok = uncovered == 0 and covered <= 1
    final_ok = gaps[-1] < 0.10
    jfsq_big = results[(2048, "jfsq")]
    sub_ok = True
    for policy in ("jsq", "jiq"):
        agg = results[(2048, policy)]
        separated = agg.mean_response > (
            jfsq_big.mean_response
            + agg.mean_response_ci95
            + jfsq_big.mean_response_ci95
        )
        above = (agg.mean_response - lb) / lb > 0.10
        sub_ok = sub_ok and separated and above
    ok = trend_ok and final_ok and sub_ok and elapsed < 7200.0
    gap_str = " -> ".join(f"{g:.3f}" for g in gaps)
    assert report(
        5, "random-graph scaling", ok,
        f"jfsq gaps {gap_str}; inversions cov={covered} uncov={uncovered}; "
        f"jsq/jiq separated: {sub_ok}; {elapsed:.0f}s",
    )


def test_c6_blocking_convergence(scaling_results):
    results, _ = scaling_results
    fiq = [results[(n, "jfiq")] for n in N_GRID]
    fsq = [results[(n, "jfsq")] for n in N_GRID]
    band_ok = 0.005 <= fiq[0].blocking_prob <= 0.02
    mono_ok = all(
        fiq[i + 1].blocking_prob
        <= fiq[i].blocking_prob
        + fiq[i].blocking_prob_ci95
        + fiq[i + 1].blocking_prob_ci95
        for i in range(len(N_GRID) - 1)
    )
    order_ok = all(a.blocking_prob < b.blocking_prob for a, b in zip(fsq, fiq))
    ok = band_ok and mono_ok and order_ok
    detail = "jfiq blocking " + ", ".join(
        f"N={n}: {m.blocking_prob:.2e}" for n, m in zip(N_GRID, fiq)
    ) + f"; band_ok={band_ok} mono_ok={mono_ok} jfsq<jfiq={order_ok}"
    # The [0.5%, 2%] band is unattainable on this grid with the pinned edge
    # probability (see the project notes); the criterion is asserted as
    # stated and is expected to fail until the band is re-anchored.
    assert report(6, "blocking convergence", ok, detail)


def test_c7_hyperexponential_extension(hyper_results):
    rng = np.random.Generator(np.random.Philox(SEED + 2))
    x = sample_hyperexp_base(rng, 10_000_000)
    cv = float(x.std(ddof=1) / x.mean())
    cv_ok = abs(cv - 7.071) <= 0.1
    results, elapsed = hyper_results
    lb = SCALING_LB * 1.99  # rates scale by 1/E[X], the bound by E[X]
    gaps = [(results[(n, "jfsq")].mean_response - lb) / lb for n in N_GRID]
    cis = [results[(n, "jfsq")].mean_response_ci95 / lb for n in N_GRID]
    covered, uncovered = _trend_inversions(gaps, cis)
    trend_ok = uncovered == 0 and covered <= 1 and gaps[-1] < gaps[0]
    ok = cv_ok and trend_ok
    gap_str = " -> ".join(f"{g:.3f}" for g in gaps)
    assert report(
        7, "hyper-exponential extension", ok,
        f"cv {cv:.4f}; gaps {gap_str} (cov={covered} uncov={uncovered}); {elapsed:.0f}s",
    )


def test_c8_graph_construction_guarantee():
    t0 = time.monotonic()
    spec = scaling_system(12, buffer=2)
    theory = derive_theory(spec)
    size1 = math.ceil(12 * theory.p1)
    bound = 1.0 - 2.0 / math.comb(12, size1)
    satisfied = 0
    trials = 200
    for i in range(trials):
        g = generate_homogeneous(
            spec, theory, seed=np.random.SeedSequence(SEED, spawn_key=(8, i))
        )
        if check_well_connected_exact(g, spec, theory).ok:
            satisfied += 1
    rate = satisfied / trials
    elapsed = time.monotonic() - t0
    ok = rate >= 0.95 and rate >= bound and elapsed < 300.0
    assert report(
        8, "construction guarantee", ok,
        f"rate {rate:.3f} vs bound {bound:.3f}, {elapsed:.1f}s",
    )


def test_c9_lyapunov_diagnostics():
    spec = scaling_system(512)
    theory = derive_theory(spec)
    g = generate_homogeneous(
        spec, theory, seed=np.random.SeedSequence(SEED, spawn_key=(9,))
    )
    check = check_well_connected_sampled(
        g, spec, theory, trials=200, seed=np.random.SeedSequence(SEED, spawn_key=(9, 1))
    )
    res = simulate(
        spec,
        g,
        "jfsq",
        horizon_arrivals=500_000,
        seed=np.random.SeedSequence(SEED, spawn_key=(9, 2)),
        theory=theory,
    )
    tails = res.metrics.lyapunov_tails
    events_ok = len(res.lyapunov.times) >= 1_000_000
    ok = check.ok and events_ok and tails["v1"] < 0.05 and tails["v2"] < 0.05
    assert report(
        9, "collapse diagnostics", ok,
        f"graph check {check.method} ok={check.ok}; "
        f"P(V1>=thr)={tails['v1']:.4f} P(V2>=thr)={tails['v2']:.4f} "
        f"(thr {res.lyapunov.threshold_v1:.3g}, {len(res.lyapunov.times)} events)",
    )


DETERMINISM_SWEEP = """
[system]
servers = 500
buffer = 1000000
rates = [2.7777777777777777, 0.5555555555555556]
fractions = [0.2, 0.8]
[system.ports]
count = 1
load = 0.9
[topology]
source = "full"
[run]
horizon_arrivals = 20000
replications = 2
seed = 4242
workers = 2
[sweep]
loads = [0.3, 0.9]
policies = ["jfsq", "jsq22"]
"""

DETERMINISM_SCALE = """
[system]
buffer = 5
rates = [1.0, 0.5, 0.25, 0.125]
fractions = [0.25, 0.25, 0.25, 0.25]
[system.ports]
load = 0.9
[topology]
source = "sim-random"
[run]
horizon_arrivals = 20000
replications = 2
seed = 4242
workers = 2
[scale]
n_values = [128]
policies = ["jfsq", "jfiq"]
port_exponent = 1.5
load = 0.9
horizon_small = 20000
horizon_large = 20000
large_threshold = 1024
check_assumption2 = "sampled"
check_trials = 50
"""


def test_c10_csv_determinism(tmp_path):
    ok = True
    details = []
    for name, cfg_text, cmd in (
        ("sweep-load", DETERMINISM_SWEEP, "sweep-load"),
        ("scale", DETERMINISM_SCALE, "scale"),
    ):
        cfg = tmp_path / f"{name}.toml"
        cfg.write_text(cfg_text)
        out1 = tmp_path / f"{name}-1.csv"
        out2 = tmp_path / f"{name}-2.csv"
        assert cli_main([cmd, "--config", str(cfg), "--out", str(out1)]) == 0
        assert cli_main([cmd, "--config", str(cfg), "--out", str(out2)]) == 0
        same = out1.read_bytes() == out2.read_bytes()
        ok = ok and same
        details.append(f"{name}: {'identical' if same else 'DIFFERS'}")
    assert report(10, "CSV determinism", ok, "; ".join(details))
