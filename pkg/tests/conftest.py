import numpy as np
import pytest

from bipartite_lb.graph import BipartiteGraph, generate_sim_random
from bipartite_lb.model import build_system

SCALING_RATES = [1.0, 0.5, 0.25, 0.125]
SCALING_CAP = 0.46875  # mean per-server capacity of the four-class system


def fig2_system(load: float, buffer: int = 10**6):
    """Two-class reference system: 100 fast (25/9), 400 slow (5/9), one port."""
    return build_system(
        500, [25.0 / 9.0, 5.0 / 9.0], [0.2, 0.8], [load * 500.0], buffer
    )


def fig2_graph():
    return BipartiteGraph.fully_connected(1, 500)


def scaling_system(n: int, load: float = 0.9, buffer: int = 5, rates=None):
    """Four-class scaling system with L = round(N^1.5) equal-rate ports."""
    ports = round(n**1.5)
    rates = SCALING_RATES if rates is None else rates
    cap_per_server = sum(r * 0.25 for r in rates)
    lam_total = load * cap_per_server * n
    return build_system(n, rates, [0.25] * 4, [lam_total / ports] * ports, buffer)


def scaling_graph(n: int, seed, load: float = 0.9):
    return generate_sim_random(n, round(n**1.5), load, seed)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(12345))
