import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bipartite_lb.graph import BipartiteGraph, generate_sim_random
from bipartite_lb.policy import (
    BLOCKED,
    TopologyError,
    route,
    route_jfiq,
    route_jfsq,
    route_jiq,
    route_jsq,
    route_jsq22,
    routing_distribution,
)


def star(n):
    return BipartiteGraph.fully_connected(1, n)


def make_rng(seed=0):
    return np.random.Generator(np.random.Philox(seed))


class TestJfsq:
    def test_shortest_then_fastest(self):
        # A: mu=2 q=1, B: mu=1 q=0, C: mu=2 q=0 -> C
        g = star(3)
        rates = np.array([2.0, 1.0, 2.0])
        q = np.array([1, 0, 0])
        for seed in range(5):
            assert route_jfsq(0, q, g, rates, make_rng(seed), 5) == 2

    def test_all_full_blocks(self):
        g = star(3)
        rates = np.array([2.0, 1.0, 1.0])
        q = np.array([4, 4, 4])
        assert route_jfsq(0, q, g, rates, make_rng(0), 4) == BLOCKED

    def test_unique_minimum(self):
        g = star(3)
        rates = np.ones(3)
        q = np.array([3, 1, 2])
        for seed in range(5):
            assert route_jfsq(0, q, g, rates, make_rng(seed), 5) == 1

    def test_rate_tie_uniformity(self):
        # three tied candidates: each picked ~1/3 within 3 sigma
        g = star(3)
        rates = np.ones(3)
        q = np.zeros(3, dtype=int)
        rng = make_rng(7)
        n = 10_000
        counts = np.zeros(3)
        for _ in range(n):
            counts[route_jfsq(0, q, g, rates, rng, 5)] += 1
        sigma = np.sqrt((1 / 3) * (2 / 3) / n)
        assert np.all(np.abs(counts / n - 1 / 3) < 3.5 * sigma)


class TestJfiq:
    def test_fastest_idle(self):
        g = star(2)
        rates = np.array([2.0, 1.0])
        q = np.array([0, 0])
        for seed in range(5):
            assert route_jfiq(0, q, g, rates, make_rng(seed), 5) == 0

    def test_blocked_on_full_random_pick(self):
        # no idle; picks must sometimes land on the full server and block
        g = star(2)
        rates = np.array([2.0, 1.0])
        q = np.array([2, 5])
        rng = make_rng(3)
        outcomes = {route_jfiq(0, q, g, rates, rng, 5) for _ in range(100)}
        assert outcomes == {0, BLOCKED}

    def test_no_idle_uniform_pick(self):
        g = star(2)
        rates = np.array([2.0, 1.0])
        q = np.array([1, 2])
        rng = make_rng(11)
        n = 10_000
        hits = sum(route_jfiq(0, q, g, rates, rng, 5) == 0 for _ in range(n))
        assert abs(hits / n - 0.5) < 0.02


class TestJsqJiq:
    def test_jsq_ignores_rates(self):
        g = star(2)
        rates = np.array([2.0, 1.0])
        q = np.array([2, 1])
        for seed in range(5):
            assert route_jsq(0, q, g, rates, make_rng(seed), 5) == 1

    def test_jiq_uniform_over_idle(self):
        g = star(2)
        rates = np.array([2.0, 1.0])
        q = np.array([0, 0])
        rng = make_rng(5)
        n = 10_000
        hits = sum(route_jiq(0, q, g, rates, rng, 5) == 0 for _ in range(n))
        assert abs(hits / n - 0.5) < 0.02

    def test_jiq_vs_jsq_no_idle(self):
        # {q=1, q=2}: jsq picks the shorter deterministically, jiq uniformly
        g = star(2)
        rates = np.ones(2)
        q = np.array([1, 2])
        rng = make_rng(9)
        assert all(route_jsq(0, q, g, rates, make_rng(s), 5) == 0 for s in range(5))
        n = 10_000
        hits = sum(route_jiq(0, q, g, rates, rng, 5) == 1 for _ in range(n))
        assert abs(hits / n - 0.5) < 0.02

    def test_single_class_jfsq_equals_jsq(self):
        g = generate_sim_random(8, 4, 0.5, seed=2)
        rates = np.ones(8)
        q = np.array([0, 1, 2, 0, 1, 2, 3, 0])
        for port in range(4):
            for seed in range(20):
                a = route_jfsq(port, q, g, rates, make_rng(seed), 4)
                b = route_jsq(port, q, g, rates, make_rng(seed), 4)
                assert a == b


class TestJsq22:
    def two_class(self, n_fast=2, n_slow=2):
        n = n_fast + n_slow
        g = BipartiteGraph.fully_connected(1, n)
        class_of = np.array([0] * n_fast + [1] * n_slow, dtype=np.int32)
        return g, class_of

    def test_idle_fast_preferred(self):
        g, cls = self.two_class()
        # fast: q=0, q=3; slow: q=1, q=2 -> the idle fast server
        q = np.array([0, 3, 1, 2])
        for seed in range(10):
            dest = route_jsq22(0, q, g, cls, 1.0, 0.0, make_rng(seed), 5)
            assert dest == 0

    def test_all_busy_pf_one(self):
        g, cls = self.two_class()
        q = np.array([2, 1, 1, 1])
        for seed in range(10):
            assert route_jsq22(0, q, g, cls, 1.0, 0.0, make_rng(seed), 5) == 1

    def test_idle_slow_ps_zero_goes_fast(self):
        g, cls = self.two_class()
        q = np.array([2, 1, 0, 0])
        for seed in range(10):
            assert route_jsq22(0, q, g, cls, 1.0, 0.0, make_rng(seed), 5) == 1

    def test_idle_slow_ps_one(self):
        g, cls = self.two_class()
        q = np.array([2, 1, 0, 3])
        for seed in range(10):
            assert route_jsq22(0, q, g, cls, 0.0, 1.0, make_rng(seed), 5) == 2

    def test_topology_guard(self):
        g = BipartiteGraph.from_port_lists(1, 4, [[0, 1, 2]])
        cls = np.array([0, 0, 1, 1], dtype=np.int32)
        with pytest.raises(TopologyError, match="undefined for this topology"):
            route_jsq22(0, np.zeros(4, int), g, cls, 1.0, 0.0, make_rng(0), 5)

    def test_single_server_class(self):
        g, cls = self.two_class(n_fast=1, n_slow=3)
        q = np.array([1, 0, 2, 2])
        # pf=1: all-busy branch or idle-slow branch; ps=0 always lands fast
        for seed in range(10):
            assert route_jsq22(0, q, g, cls, 1.0, 0.0, make_rng(seed), 5) == 0


class TestDistributions:
    POLICIES = ["jfsq", "jfiq", "jsq", "jiq", "random", "jsq22"]

    def _check(self, policy, q, rates, class_of, buffer, draws=20_000, seed=0):
        g = BipartiteGraph.fully_connected(1, len(q))
        dist, block = routing_distribution(
            policy, 0, q, g, rates, buffer, class_of, 1.0, 0.0
        )
        total = sum(dist.values()) + block
        assert total == pytest.approx(1.0, abs=1e-12)
        rng = make_rng(seed)
        counts: dict[int, int] = {}
        blocked = 0
        for _ in range(draws):
            dest = route(policy, 0, q, g, rates, rng, buffer, class_of, 1.0, 0.0)
            if dest == BLOCKED:
                blocked += 1
            else:
                counts[dest] = counts.get(dest, 0) + 1
        for r, p in dist.items():
            sigma = max(np.sqrt(p * (1 - p) / draws), 1e-4)
            assert abs(counts.get(r, 0) / draws - p) < 4.5 * sigma
        sigma = max(np.sqrt(block * (1 - block) / draws), 1e-4)
        assert abs(blocked / draws - block) < 4.5 * sigma
        for r in counts:
            assert r in dist  # sampler never picks a zero-probability server

    @pytest.mark.parametrize("policy", POLICIES)
    def test_sampler_matches_distribution(self, policy):
        rates = np.array([2.0, 2.0, 1.0, 1.0])
        class_of = np.array([0, 0, 1, 1], dtype=np.int32)
        states = [
            np.array([0, 0, 0, 0]),
            np.array([1, 0, 2, 0]),
            np.array([2, 2, 1, 1]),
            np.array([3, 3, 3, 0]),
            np.array([3, 3, 3, 3]),  # everything full at buffer 3
        ]
        for i, q in enumerate(states):
            self._check(policy, q, rates, class_of, buffer=3, seed=i)

    def test_jfsq_blocks_only_when_all_full(self):
        rates = np.array([2.0, 1.0])
        g = BipartiteGraph.fully_connected(1, 2)
        dist, block = routing_distribution("jfsq", 0, np.array([3, 2]), g, rates, 3)
        assert block == 0.0 and dist == {1: 1.0}
        dist, block = routing_distribution("jfsq", 0, np.array([3, 3]), g, rates, 3)
        assert block == 1.0 and dist == {}

    def test_jfiq_block_mass_is_full_fraction(self):
        rates = np.ones(4)
        g = BipartiteGraph.fully_connected(1, 4)
        q = np.array([3, 3, 1, 2])
        dist, block = routing_distribution("jfiq", 0, q, g, rates, 3)
        assert block == pytest.approx(0.5)
        assert dist == {2: pytest.approx(0.25), 3: pytest.approx(0.25)}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["jfsq", "jfiq", "jsq", "jiq", "random"]))
def test_routed_target_is_always_a_neighbor(seed, policy):
    rng = np.random.default_rng(seed)
    g = generate_sim_random(6, 4, 0.55, seed=seed)
    rates = np.repeat([2.0, 1.0], 3)
    q = rng.integers(0, 3, size=6)
    pick_rng = make_rng(seed)
    for port in range(4):
        dest = route(policy, port, q, g, rates, pick_rng, 2)
        if dest != BLOCKED:
            assert dest in g.port_neighbors(port)
