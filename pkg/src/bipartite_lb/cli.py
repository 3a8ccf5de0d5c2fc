"""Command-line interface.

Subcommands: bounds, gen-graph, check-graph, simulate, exact, sweep-load,
scale.  Output is CSV only (header always emitted, floats at 15 significant
digits, rows in a deterministic order); every row carries seed, config hash
and version columns, so identical config + seed reproduces byte-identical
files.  Exit codes: 0 ok, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from . import __version__
from . import exact as exactmod
from . import graph as graphmod
from . import sim as simmod
from .config import (
    ConfigError,
    ExperimentConfig,
    build_graph,
    build_spec,
    config_hash,
    fig2_raw,
    load_config,
    parse_config,
    scaling_raw,
)
from .model import (
    CapacityError,
    EpsilonRangeError,
    check_buffer_window,
    derive_theory,
    evaluate_reference_bounds,
)

SEED_ENV = "BIPARTITE_LB_SEED"
OUTPUT_DIR_ENV = "BIPARTITE_LB_OUTPUT_DIR"

_CONFIG_ERRORS = (
    ConfigError,
    CapacityError,
    EpsilonRangeError,
    FileNotFoundError,
    ValueError,
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return ""
        return format(float(value), ".15g")
    return str(value)


def _write_csv(out: Optional[str], header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    text = "\n".join(lines) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="\n") as fh:
            fh.write(text)


def _resolve_out(path: Optional[str]) -> Optional[str]:
    if path is None:
        return None
    outdir = os.environ.get(OUTPUT_DIR_ENV)
    if outdir and not os.path.isabs(path):
        os.makedirs(outdir, exist_ok=True)
        return os.path.join(outdir, path)
    return path


def _effective_config(args, default_raw=None) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif default_raw is not None:
        cfg = parse_config(default_raw)
    else:
        raise ConfigError("this command requires --config")
    seed = None
    if os.environ.get(SEED_ENV):
        seed = int(os.environ[SEED_ENV])
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed is not None:
        cfg.override(("run", "seed"), int(seed))
    if getattr(args, "policies", None):
        names = [p.strip() for p in args.policies.split(",") if p.strip()]
        if "sweep" in cfg.raw:
            cfg.override(("sweep", "policies"), names)
        if "scale" in cfg.raw:
            cfg.override(("scale", "policies"), names)
        cfg.override(("policy", "name"), names[0])
    if getattr(args, "no_slow_edges", False):
        cfg.override(("topology", "slow_class_edges"), False)
    if getattr(args, "trace", False):
        cfg.override(("run", "trace"), True)
    return cfg


def _provenance(cfg: ExperimentConfig) -> list:
    return [cfg.seed, config_hash(cfg), __version__]


def _graph_seed(cfg: ExperimentConfig, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(cfg.seed, spawn_key=(2, *key))


def _sim_seeds(cfg: ExperimentConfig, count: int, *key: int) -> list:
    return np.random.SeedSequence(cfg.seed, spawn_key=(3, *key)).spawn(count)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_bounds(args) -> int:
    cfg = _effective_config(args, fig2_raw())
    spec = build_spec(cfg)
    theory = derive_theory(spec, cfg.epsilon)
    window = check_buffer_window(theory, spec.n_servers, spec.buffer)
    bounds = evaluate_reference_bounds(theory, spec.n_servers, spec.buffer)
    prov = _provenance(cfg)
    rows = [
        ["n_servers", spec.n_servers],
        ["n_ports", spec.num_ports],
        ["buffer", spec.buffer],
        ["lambda_total", spec.lambda_total],
        ["k", theory.k],
        ["beta", theory.beta],
        ["beta_hat", theory.beta_hat],
        ["lambda", theory.lam],
        ["c_star", theory.c_star],
        ["service_time_lb", theory.service_time_lb],
        ["epsilon", theory.epsilon],
        ["tau_1k", theory.tau_1k],
        ["tau_1m", theory.tau_1m],
        ["tau_km", theory.tau_km],
        ["p1", theory.p1],
        ["p2", theory.p2],
        ["d_tilde_1", theory.d_tilde_1],
        ["d_tilde_2", theory.d_tilde_2],
        ["delta", theory.delta],
        ["delta_bar", theory.delta_bar],
        ["b1", theory.b1],
        ["b2", theory.b2],
        ["b3", theory.b3],
        ["chi", theory.chi],
        ["buffer_window_ok", window.ok],
        ["buffer_window_min", window.b_min],
        ["buffer_window_max", window.b_max],
        ["jobs_excess_bound", bounds.jobs_excess_bound],
        ["total_jobs_bound", bounds.total_jobs_bound],
        ["blocking_bound", bounds.blocking_bound],
        ["k_equals_m", bounds.k_equals_m],
    ]
    rows = [r + prov for r in rows]
    _write_csv(
        _resolve_out(args.out),
        ["parameter", "value", "seed", "config_hash", "version"],
        rows,
    )
    return 0


_METRIC_COLUMNS = [
    "mean_response",
    "mean_response_ci95",
    "blocking_prob",
    "blocking_prob_ci95",
    "mean_jobs_scaled",
    "mean_jobs_scaled_ci95",
    "littles_residual_max",
    "admitted",
    "blocked",
]


def _metric_cells(agg: Optional[simmod.AggregateMetrics]) -> list:
    if agg is None:
        return [None] * len(_METRIC_COLUMNS)
    return [
        agg.mean_response,
        agg.mean_response_ci95,
        agg.blocking_prob,
        agg.blocking_prob_ci95,
        agg.mean_jobs_scaled,
        agg.mean_jobs_scaled_ci95,
        agg.littles_residual_max,
        agg.admitted_total,
        agg.blocked_total,
    ]


def cmd_simulate(args) -> int:
    cfg = _effective_config(args)
    spec = build_spec(cfg)
    theory = derive_theory(spec, cfg.epsilon)
    g = build_graph(cfg, spec, theory, _graph_seed(cfg, 0))
    reps = cfg.replications
    seeds = _sim_seeds(cfg, reps, 0)
    agg = simmod.simulate_replications(
        spec,
        g,
        cfg.policy_name,
        replications=reps,
        seeds=seeds,
        workers=cfg.workers,
        service_model=cfg.service_model,
        horizon_arrivals=cfg.horizon_arrivals,
        horizon_time=cfg.horizon_time,
        warmup_fraction=cfg.warmup_fraction,
        pf=cfg.pf,
        ps=cfg.ps,
    )
    out = _resolve_out(args.out)
    if cfg.section("run").get("trace"):
        result = simmod.simulate(
            spec,
            g,
            cfg.policy_name,
            seed=seeds[0],
            collect_trace=True,
            service_model=cfg.service_model,
            horizon_arrivals=cfg.horizon_arrivals,
            horizon_time=cfg.horizon_time,
            warmup_fraction=cfg.warmup_fraction,
            pf=cfg.pf,
            ps=cfg.ps,
        )
        trace_path = (out or "run") + ".trace.csv"
        simmod.write_trace(result.trace, trace_path)
    header = (
        ["policy", "n_servers", "n_ports", "buffer", "lambda_total", "service_model",
         "replications", "k", "c_star", "lower_bound"]
        + _METRIC_COLUMNS
        + ["seed", "config_hash", "version"]
    )
    row = (
        [cfg.policy_name, spec.n_servers, spec.num_ports, spec.buffer,
         spec.lambda_total, cfg.service_model, reps, theory.k, theory.c_star,
         theory.service_time_lb]
        + _metric_cells(agg)
        + _provenance(cfg)
    )
    _write_csv(out, header, [row])
    return 0


def cmd_exact(args) -> int:
    cfg = _effective_config(args)
    spec = build_spec(cfg)
    theory = derive_theory(spec, cfg.epsilon)
    g = build_graph(cfg, spec, theory, _graph_seed(cfg, 0))
    dist = exactmod.stationary(
        spec, g, cfg.policy_name, pf=cfg.pf, ps=cfg.ps, budget=args.budget
    )
    metrics = exactmod.exact_metrics(dist, spec, g, cfg.policy_name, pf=cfg.pf, ps=cfg.ps)
    if args.dump_pi:
        exactmod.write_distribution(dist, _resolve_out(args.dump_pi))
    header = [
        "policy", "n_servers", "n_ports", "buffer", "lambda_total", "states",
        "method", "residual", "blocking_prob", "mean_jobs_scaled",
        "mean_response", "per_class_jobs", "seed", "config_hash", "version",
    ]
    per_class = ";".join(format(x, ".15g") for x in metrics.per_class_jobs)
    row = [
        cfg.policy_name, spec.n_servers, spec.num_ports, spec.buffer,
        spec.lambda_total, dist.space.size, dist.method, dist.residual,
        metrics.blocking_prob, metrics.mean_jobs_scaled, metrics.mean_response,
        per_class,
    ] + _provenance(cfg)
    _write_csv(_resolve_out(args.out), header, [row])
    return 0


def cmd_gen_graph(args) -> int:
    cfg = _effective_config(args)
    spec = build_spec(cfg)
    theory = derive_theory(spec, cfg.epsilon)
    g = build_graph(cfg, spec, theory, _graph_seed(cfg, 0))
    out = _resolve_out(args.out)
    if out is None:
        raise ConfigError("gen-graph requires --out")
    graphmod.write_graph(g, out)
    patched = len(g.meta.get("patched_ports", []))
    sys.stderr.write(
        f"wrote {g.num_ports}x{g.num_servers} graph with {g.edge_count} edges "
        f"({patched} isolated ports patched)\n"
    )
    return 0


def cmd_check_graph(args) -> int:
    cfg = _effective_config(args)
    spec = build_spec(cfg)
    theory = derive_theory(spec, cfg.epsilon)
    if args.graph:
        g = graphmod.read_graph(args.graph)
        if g.num_ports != spec.num_ports or g.num_servers != spec.n_servers:
            raise ConfigError("graph file dimensions do not match the system")
    else:
        g = build_graph(cfg, spec, theory, _graph_seed(cfg, 0))
    trials = int(cfg.section("scale").get("check_trials", 1000))
    try:
        report = graphmod.check_well_connected_exact(g, spec, theory, budget=args.budget)
    except graphmod.EnumerationBudgetError:
        report = graphmod.check_well_connected_sampled(
            g, spec, theory, trials=trials, seed=_graph_seed(cfg, 1)
        )
    header = [
        "condition", "required_size", "threshold", "worst_deficiency", "ok",
        "method", "worst_subset", "seed", "config_hash", "version",
    ]
    prov = _provenance(cfg)

    def subset_cell(subset):
        return "" if subset is None else "|".join(str(s) for s in subset)

    rows = [
        [1, report.required_size_1, report.threshold_1, report.worst_deficiency_1,
         report.condition1_ok, report.method, subset_cell(report.worst_subset_1)] + prov,
        [2, report.required_size_2, report.threshold_2, report.worst_deficiency_2,
         report.condition2_ok, report.method, subset_cell(report.worst_subset_2)] + prov,
    ]
    _write_csv(_resolve_out(args.out), header, rows)
    sys.stderr.write(
        f"method={report.method} condition1={'ok' if report.condition1_ok else 'VIOLATED'} "
        f"condition2={'ok' if report.condition2_ok else 'VIOLATED'}\n"
    )
    return 0


def cmd_sweep_load(args) -> int:
    cfg = _effective_config(args, fig2_raw())
    sweep = cfg.section("sweep")
    loads = sweep.get("loads")
    if not loads:
        raise ConfigError("sweep.loads required")
    policies = sweep.get("policies", [cfg.policy_name])
    results = []
    for li, load in enumerate(loads):
        for pi, policy in enumerate(sorted(policies)):
            row_id = (float(load), policy)
            try:
                spec = build_spec(cfg, load=float(load))
                theory = derive_theory(spec, cfg.epsilon)
                g = build_graph(cfg, spec, theory, _graph_seed(cfg, li))
                agg = simmod.simulate_replications(
                    spec,
                    g,
                    policy,
                    replications=cfg.replications,
                    seeds=_sim_seeds(cfg, cfg.replications, li, pi),
                    workers=cfg.workers,
                    service_model=cfg.service_model,
                    horizon_arrivals=cfg.horizon_arrivals,
                    horizon_time=cfg.horizon_time,
                    warmup_fraction=cfg.warmup_fraction,
                    pf=cfg.pf,
                    ps=cfg.ps,
                )
                results.append((row_id, spec, theory, agg, ""))
            except Exception as exc:  # record, keep sweeping
                results.append((row_id, None, None, None, str(exc)))
    results.sort(key=lambda item: item[0])
    header = (
        ["load", "policy", "n_servers", "buffer", "lambda_total", "k", "c_star",
         "lower_bound", "replications"]
        + _METRIC_COLUMNS
        + ["error", "seed", "config_hash", "version"]
    )
    prov = _provenance(cfg)
    rows = []
    for (load, policy), spec, theory, agg, err in results:
        rows.append(
            [load, policy,
             spec.n_servers if spec else None,
             spec.buffer if spec else None,
             spec.lambda_total if spec else None,
             theory.k if theory else None,
             theory.c_star if theory else None,
             theory.service_time_lb if theory else None,
             cfg.replications]
            + _metric_cells(agg)
            + [err] + prov
        )
    _write_csv(_resolve_out(args.out), header, rows)
    return 0


def _scale_point(cfg, n_value, n_idx, policies, horizon, epsilon):
    """All replications for one N: per replication, regenerate the graph
    and run every policy on it (paired comparison)."""
    scale = cfg.section("scale")
    exponent = float(scale.get("port_exponent", 1.5))
    load = float(scale.get("load", 0.9))
    port_count = int(round(n_value**exponent))
    spec = build_spec(cfg, n_servers=n_value, load=load, port_count=port_count)
    theory = derive_theory(spec, epsilon)
    reps = cfg.replications

    def one_rep(rep: int) -> dict[str, simmod.Metrics]:
        g = build_graph(cfg, spec, theory, _graph_seed(cfg, n_idx, rep))
        out = {}
        for pi, policy in enumerate(policies):
            seed = np.random.SeedSequence(cfg.seed, spawn_key=(3, n_idx, rep, pi))
            out[policy] = simmod.simulate(
                spec,
                g,
                policy,
                seed=seed,
                service_model=cfg.service_model,
                horizon_arrivals=horizon,
                warmup_fraction=cfg.warmup_fraction,
                pf=cfg.pf,
                ps=cfg.ps,
            ).metrics
        return out

    workers = cfg.workers
    if workers > 1 and simmod.have_compiled_kernel():
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_rep = list(pool.map(one_rep, range(reps)))
    else:
        per_rep = [one_rep(r) for r in range(reps)]

    check_mode = scale.get("check_assumption2", "sampled")
    check_cell = "off"
    if check_mode != "off":
        g0 = build_graph(cfg, spec, theory, _graph_seed(cfg, n_idx, 0))
        if check_mode == "exact":
            report = graphmod.check_well_connected_exact(g0, spec, theory)
        else:
            report = graphmod.check_well_connected_sampled(
                g0, spec, theory,
                trials=int(scale.get("check_trials", 200)),
                seed=_graph_seed(cfg, n_idx, 10_000),
            )
        check_cell = "ok" if report.ok else "violated"

    aggs = {
        policy: simmod.aggregate_metrics([rep[policy] for rep in per_rep])
        for policy in policies
    }
    return spec, theory, aggs, check_cell


def cmd_scale(args) -> int:
    cfg = _effective_config(args, scaling_raw())
    scale = cfg.section("scale")
    n_values = scale.get("n_values")
    if not n_values:
        raise ConfigError("scale.n_values required")
    policies = sorted(scale.get("policies", [cfg.policy_name]))
    schedule = scale.get("epsilon_schedule")
    if schedule is not None and len(schedule) != len(n_values):
        raise ConfigError("epsilon_schedule must match n_values in length")
    large_threshold = int(scale.get("large_threshold", 1024))
    horizon_small = int(scale.get("horizon_small", 1_000_000))
    horizon_large = int(scale.get("horizon_large", 2_000_000))

    results = []
    for n_idx, n_value in enumerate(n_values):
        n_value = int(n_value)
        horizon = horizon_large if n_value >= large_threshold else horizon_small
        epsilon = float(schedule[n_idx]) if schedule else cfg.epsilon
        try:
            spec, theory, aggs, check_cell = _scale_point(
                cfg, n_value, n_idx, policies, horizon, epsilon
            )
            for policy in policies:
                results.append(
                    ((n_value, policy), spec, theory, aggs[policy], check_cell, horizon, "")
                )
        except Exception as exc:
            for policy in policies:
                results.append(((n_value, policy), None, None, None, "", horizon, str(exc)))
    results.sort(key=lambda item: item[0])
    header = (
        ["n", "policy", "l", "buffer", "load", "service_model", "horizon_arrivals",
         "k", "c_star", "lower_bound", "assumption2_check", "replications"]
        + _METRIC_COLUMNS
        + ["error", "seed", "config_hash", "version"]
    )
    prov = _provenance(cfg)
    load = float(scale.get("load", 0.9))
    rows = []
    for (n_value, policy), spec, theory, agg, check_cell, horizon, err in results:
        rows.append(
            [n_value, policy,
             spec.num_ports if spec else None,
             spec.buffer if spec else None,
             load, cfg.service_model, horizon,
             theory.k if theory else None,
             theory.c_star if theory else None,
             theory.service_time_lb if theory else None,
             check_cell, cfg.replications]
            + _metric_cells(agg)
            + [err] + prov
        )
    _write_csv(_resolve_out(args.out), header, rows)
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bipartite-lb",
        description="Load balancing on bipartite compatibility graphs: "
        "theory bounds, graph construction, simulation, exact oracle.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=False):
        p.add_argument("--config", help="TOML experiment config", default=None)
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--out", default=None, help="output CSV path (default stdout)")
        p.add_argument("--policies", default=None, help="comma-separated policy list override")
        p.add_argument("--no-slow-edges", action="store_true",
                       help="random constructions: no edges to classes past K")
        p.add_argument("--trace", action="store_true", help="write an event trace")
        return p

    common(sub.add_parser("bounds", help="theory parameters and reference bounds"))
    common(sub.add_parser("simulate", help="simulate one configuration"))
    p = common(sub.add_parser("exact", help="exact stationary metrics (tiny systems)"))
    p.add_argument("--budget", type=int, default=exactmod.DEFAULT_STATE_BUDGET)
    p.add_argument("--dump-pi", default=None, help="also dump the distribution CSV here")
    common(sub.add_parser("gen-graph", help="generate a graph file"))
    p = common(sub.add_parser("check-graph", help="well-connectedness check"))
    p.add_argument("--graph", default=None, help="graph file to check")
    p.add_argument("--budget", type=int, default=graphmod.DEFAULT_ENUMERATION_BUDGET)
    common(sub.add_parser("sweep-load", help="load sweep (two-class defaults built in)"))
    common(sub.add_parser("scale", help="many-server scaling study"))
    return parser


_COMMANDS = {
    "bounds": cmd_bounds,
    "simulate": cmd_simulate,
    "exact": cmd_exact,
    "gen-graph": cmd_gen_graph,
    "check-graph": cmd_check_graph,
    "sweep-load": cmd_sweep_load,
    "scale": cmd_scale,
}


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _CONFIG_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        sys.stderr.write(f"runtime error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
