"""Experiment configuration.

One TOML file describes a system, a topology source, a policy, the service
model, run control, and optional sweep/scale axes.  Unknown keys are
rejected.  Environment variables override only the seed
(``BIPARTITE_LB_SEED``) and the output directory
(``BIPARTITE_LB_OUTPUT_DIR``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import graph as graphmod
from . import sim as simmod
from .model import SystemSpec, TheoryParams, build_system, make_classes

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "fig2_raw",
    "scaling_raw",
    "build_spec",
    "build_graph",
    "config_hash",
]


class ConfigError(ValueError):
    pass


_SCHEMA: dict[str, dict[str, type | tuple]] = {
    "system": {
        "servers": int,
        "buffer": int,
        "rates": list,
        "fractions": list,
        "ports": {
            "count": int,
            "rates": list,
            "load": float,
            "total_rate": float,
        },
    },
    "topology": {
        "source": str,
        "path": str,
        "slow_class_edges": bool,
        "load": float,
    },
    "policy": {"name": str, "pf": float, "ps": float},
    "service": {"model": str},
    "run": {
        "horizon_arrivals": int,
        "horizon_time": float,
        "warmup_fraction": float,
        "replications": int,
        "seed": int,
        "workers": int,
        "trace": bool,
    },
    "theory": {"epsilon": float},
    "sweep": {"loads": list, "policies": list},
    "scale": {
        "n_values": list,
        "policies": list,
        "port_exponent": float,
        "load": float,
        "epsilon_schedule": list,
        "horizon_small": int,
        "horizon_large": int,
        "large_threshold": int,
        "check_assumption2": str,
        "check_trials": int,
    },
}

_TOPOLOGY_SOURCES = ("full", "file", "thm33", "thm34", "sim-random")
_SERVICE_MODELS = ("exponential", "hyperexponential")
_CHECK_MODES = ("exact", "sampled", "off")


def _check_keys(raw: dict, schema: dict, path: str = "") -> None:
    for key, value in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {path}{key}")
        expect = schema[key]
        if isinstance(expect, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be a table")
            _check_keys(value, expect, f"{path}{key}.")
        elif expect is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{path}{key} must be a number")
        elif expect is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{path}{key} must be an integer")
        elif not isinstance(value, expect):
            raise ConfigError(f"{path}{key} must be {expect.__name__}")


@dataclass
class ExperimentConfig:
    """Validated configuration plus the raw dict it hashes to."""

    raw: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    # -- typed accessors with defaults ----------------------------------

    @property
    def policy_name(self) -> str:
        return self.section("policy").get("name", "jfsq")

    @property
    def pf(self) -> float:
        return float(self.section("policy").get("pf", 1.0))

    @property
    def ps(self) -> float:
        return float(self.section("policy").get("ps", 0.0))

    @property
    def service_model(self) -> str:
        return self.section("service").get("model", "exponential")

    @property
    def seed(self) -> int:
        return int(self.section("run").get("seed", 0))

    @property
    def replications(self) -> int:
        return int(self.section("run").get("replications", 10))

    @property
    def workers(self) -> int:
        return int(self.section("run").get("workers", 1))

    @property
    def warmup_fraction(self) -> float:
        return float(self.section("run").get("warmup_fraction", 0.2))

    @property
    def horizon_arrivals(self) -> Optional[int]:
        v = self.section("run").get("horizon_arrivals")
        return int(v) if v is not None else None

    @property
    def horizon_time(self) -> Optional[float]:
        v = self.section("run").get("horizon_time")
        return float(v) if v is not None else None

    @property
    def epsilon(self) -> Optional[float]:
        v = self.section("theory").get("epsilon")
        return float(v) if v is not None else None

    @property
    def topology_source(self) -> str:
        return self.section("topology").get("source", "full")

    @property
    def slow_class_edges(self) -> bool:
        return bool(self.section("topology").get("slow_class_edges", True))

    def override(self, path: tuple[str, ...], value: Any) -> None:
        node = self.raw
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    _check_keys(raw, _SCHEMA)
    cfg = ExperimentConfig(raw=raw)
    if cfg.topology_source not in _TOPOLOGY_SOURCES:
        raise ConfigError(f"topology.source must be one of {_TOPOLOGY_SOURCES}")
    if cfg.service_model not in _SERVICE_MODELS:
        raise ConfigError(f"service.model must be one of {_SERVICE_MODELS}")
    scale = cfg.section("scale")
    if scale.get("check_assumption2", "sampled") not in _CHECK_MODES:
        raise ConfigError(f"scale.check_assumption2 must be one of {_CHECK_MODES}")
    system = cfg.section("system")
    if cfg.service_model == "hyperexponential" and "rates" in system:
        raise ConfigError(
            "system.rates must be omitted for the hyperexponential model "
            "(rates are implied by the class scales)"
        )
    if cfg.service_model == "exponential" and system and "rates" not in system:
        raise ConfigError("system.rates required for the exponential model")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
    return parse_config(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# built-in experiment presets
# ---------------------------------------------------------------------------


def fig2_raw() -> dict:
    """Two-class fully connected reference system: 100 fast servers at rate
    25/9, 400 slow at 5/9, one port, effectively infinite buffers."""
    return {
        "system": {
            "servers": 500,
            "buffer": 1_000_000,
            "rates": [25.0 / 9.0, 5.0 / 9.0],
            "fractions": [0.2, 0.8],
            "ports": {"count": 1, "load": 0.9},
        },
        "topology": {"source": "full"},
        "service": {"model": "exponential"},
        "run": {
            "horizon_arrivals": 1_000_000,
            "warmup_fraction": 0.2,
            "replications": 10,
            "seed": 20240,
            "workers": 2,
        },
        "sweep": {
            "loads": [0.3, 0.5, 0.7, 0.9],
            "policies": ["jfsq", "jfiq", "jsq", "jiq", "jsq22"],
        },
    }


def scaling_raw(hyper: bool = False) -> dict:
    """Four-class random-graph scaling study: equal class shares, rates
    halving per class, L = N^1.5 equal-rate ports, buffer 5, load 0.9."""
    raw: dict = {
        "system": {
            "buffer": 5,
            "fractions": [0.25, 0.25, 0.25, 0.25],
            "ports": {"load": 0.9},
        },
        "topology": {"source": "sim-random"},
        "service": {"model": "hyperexponential" if hyper else "exponential"},
        "run": {
            "warmup_fraction": 0.2,
            "replications": 10,
            "seed": 20241,
            "workers": 2,
        },
        "scale": {
            "n_values": [128, 256, 512, 1024, 2048],
            "policies": ["jfsq", "jfiq", "jsq", "jiq"],
            "port_exponent": 1.5,
            "load": 0.9,
            "horizon_small": 1_000_000,
            "horizon_large": 2_000_000,
            "large_threshold": 1024,
            "check_assumption2": "sampled",
            "check_trials": 200,
        },
    }
    if not hyper:
        raw["system"]["rates"] = [1.0, 0.5, 0.25, 0.125]
    return raw


# ---------------------------------------------------------------------------
# building systems and graphs from a config
# ---------------------------------------------------------------------------


def build_spec(
    cfg: ExperimentConfig,
    *,
    n_servers: Optional[int] = None,
    load: Optional[float] = None,
    port_count: Optional[int] = None,
) -> SystemSpec:
    system = cfg.section("system")
    if not system:
        raise ConfigError("config needs a [system] table")
    n = int(n_servers if n_servers is not None else system.get("servers", 0))
    if n < 1:
        raise ConfigError("system.servers required (or pass an N override)")
    fractions = system.get("fractions")
    if not fractions:
        raise ConfigError("system.fractions required")
    if cfg.service_model == "hyperexponential":
        rates = simmod.hyperexp_class_rates(len(fractions))
    else:
        rates = system.get("rates")
    buffer = system.get("buffer")
    if buffer is None:
        raise ConfigError("system.buffer required")

    ports = system.get("ports", {})
    explicit = ports.get("rates")
    if explicit is not None:
        port_rates = [float(x) for x in explicit]
    else:
        count = int(port_count if port_count is not None else ports.get("count", 1))
        if count < 1:
            raise ConfigError("ports.count must be positive")
        if load is None and "load" in ports:
            load = float(ports["load"])
        if load is not None:
            classes = make_classes(n, rates, fractions)
            capacity = sum(c.rate * c.count for c in classes)
            total = load * capacity
        elif "total_rate" in ports:
            total = float(ports["total_rate"])
        else:
            raise ConfigError("ports needs one of rates, load, total_rate")
        port_rates = [total / count] * count
    return build_system(n, rates, fractions, port_rates, buffer)


def build_graph(
    cfg: ExperimentConfig,
    spec: SystemSpec,
    theory: Optional[TheoryParams],
    seed,
    *,
    slow_class_edges: Optional[bool] = None,
) -> graphmod.BipartiteGraph:
    source = cfg.topology_source
    topo = cfg.section("topology")
    slow = cfg.slow_class_edges if slow_class_edges is None else slow_class_edges
    if source == "full":
        return graphmod.BipartiteGraph.fully_connected(spec.num_ports, spec.n_servers)
    if source == "file":
        path = topo.get("path")
        if not path:
            raise ConfigError("topology.path required for source = 'file'")
        g = graphmod.read_graph(path)
        if g.num_ports != spec.num_ports or g.num_servers != spec.n_servers:
            raise ConfigError("graph file dimensions do not match the system")
        return g
    if theory is None:
        raise ConfigError(f"topology source {source!r} needs derived theory")
    if source == "thm33":
        return graphmod.generate_heterogeneous(
            spec.port_rates, spec, theory, seed, slow_class_edges=slow
        )
    if source == "thm34":
        return graphmod.generate_homogeneous(
            spec, theory, seed, slow_class_edges=slow
        )
    # sim-random
    load = topo.get("load")
    if load is None:
        load = cfg.section("system").get("ports", {}).get("load")
    if load is None:
        raise ConfigError("sim-random topology needs topology.load or ports.load")
    return graphmod.generate_sim_random(
        spec.n_servers, spec.num_ports, float(load), seed
    )
