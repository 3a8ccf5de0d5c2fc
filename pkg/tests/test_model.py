import math

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from bipartite_lb.model import (
    CapacityError,
    EpsilonRangeError,
    SystemSpec,
    buffer_window,
    build_system,
    check_buffer_window,
    derive_theory,
    evaluate_reference_bounds,
    make_classes,
)
from conftest import fig2_system, scaling_system


class TestClasses:
    def test_sorted_by_decreasing_rate(self):
        classes = make_classes(10, [1.0, 3.0, 2.0], [0.5, 0.2, 0.3])
        assert [c.rate for c in classes] == [3.0, 2.0, 1.0]
        assert [c.count for c in classes] == [2, 3, 5]

    def test_largest_remainder_counts_sum(self):
        classes = make_classes(10, [3.0, 2.0, 1.0], [1 / 3, 1 / 3, 1 / 3])
        assert sum(c.count for c in classes) == 10

    def test_equal_rates_rejected(self):
        with pytest.raises(ValueError):
            make_classes(10, [1.0, 1.0], [0.5, 0.5])

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            make_classes(10, [2.0, 1.0], [0.5, 0.4])

    def test_class_layout_is_class_major(self):
        spec = build_system(6, [2.0, 1.0], [0.5, 0.5], [1.0], 2)
        assert spec.class_of.tolist() == [0, 0, 0, 1, 1, 1]
        assert spec.server_rates.tolist() == [2.0, 2.0, 2.0, 1.0, 1.0, 1.0]

    def test_capacity_guard(self):
        with pytest.raises(CapacityError, match="insufficient capacity"):
            build_system(2, [2.0, 1.0], [0.5, 0.5], [3.0], 2)


class TestDeriveTheory:
    def test_fig2_load_half(self):
        # hand evaluation: fast prefix capacity 500*(25/9)*0.2 = 277.8 > 250
        th = derive_theory(fig2_system(0.5))
        assert th.k == 1
        assert th.c_star == pytest.approx(0.18, abs=1e-12)
        assert th.service_time_lb == pytest.approx(0.36, abs=1e-12)

    def test_fig2_load_nine_tenths(self):
        th = derive_theory(fig2_system(0.9))
        assert th.k == 2
        # 0.2 + (0.9 - 5/9) * (9/5)
        assert th.c_star == pytest.approx(0.2 + (0.9 - 5.0 / 9.0) * 1.8, rel=1e-12)
        assert th.service_time_lb == pytest.approx(0.82 / 0.9, rel=1e-12)

    def test_four_class_scaling_system(self):
        th = derive_theory(scaling_system(512))
        assert th.k == 3
        assert th.c_star == pytest.approx(0.6875, rel=1e-12)
        assert th.service_time_lb == pytest.approx(1.6296296296296295, rel=1e-12)

    def test_single_class(self):
        spec = build_system(1, [1.0], [1.0], [0.5], 5)
        th = derive_theory(spec)
        assert th.k == 1
        assert th.c_star == pytest.approx(0.5)
        assert th.service_time_lb == pytest.approx(1.0)

    def test_mean_field_balance_identity(self):
        th = derive_theory(scaling_system(512))
        mu = [1.0, 0.5, 0.25]
        balance = sum(m * c for m, c in zip(mu, th.c_star_per_class))
        assert balance == pytest.approx(th.lam, rel=1e-13)

    def test_assumption2_parameters(self):
        spec = scaling_system(512)
        th = derive_theory(spec)
        b = spec.buffer
        assert th.p1 == pytest.approx(th.epsilon / (6 * b * b), rel=1e-13)
        assert th.p2 == pytest.approx(th.beta_hat / 2, rel=1e-13)
        assert th.d_tilde_1 == pytest.approx(th.epsilon * 0.25 / (12 * b**3), rel=1e-13)
        assert th.d_tilde_2 == pytest.approx(th.epsilon * 0.25 / (2 * b), rel=1e-13)

    def test_lyapunov_constants(self):
        spec = scaling_system(512)
        th = derive_theory(spec)
        b, n = spec.buffer, 512
        mu1, mu_k, mu_m = 1.0, 0.25, 0.125
        delta = mu_k * th.epsilon / (6 * mu1 * b * b)
        assert th.delta == pytest.approx(delta, rel=1e-13)
        assert th.delta_bar == pytest.approx(th.tau_1k * delta, rel=1e-13)
        assert th.b1 == pytest.approx(th.tau_1k * delta, rel=1e-13)
        assert th.b2 == pytest.approx(0.5 * th.epsilon + th.delta_bar, rel=1e-13)
        assert th.chi == pytest.approx(96 * th.tau_1k * b**3 * math.log(n), rel=1e-13)
        inner = 5 * b * math.log(n) / n + 416 * th.tau_1k * b**4 / (
            th.beta_hat * th.epsilon * n
        )
        b3 = (th.d_tilde_2 * b + math.sqrt(mu1 * mu_m * inner)) / mu_m
        assert th.b3 == pytest.approx(b3, rel=1e-13)

    def test_epsilon_default_and_range(self):
        spec = fig2_system(0.9)
        th = derive_theory(spec)
        assert th.epsilon == pytest.approx(th.beta_hat / 4)
        derive_theory(spec, epsilon=th.beta_hat / 8)
        with pytest.raises(EpsilonRangeError, match="epsilon out of range"):
            derive_theory(spec, epsilon=th.beta_hat / 2)
        with pytest.raises(EpsilonRangeError):
            derive_theory(spec, epsilon=0.0)

    def test_d_tilde_override(self):
        spec = fig2_system(0.9)
        th_max = derive_theory(spec)
        th = derive_theory(spec, d_tilde_2=th_max.d_tilde_2 / 2)
        assert th.d_tilde_2 == pytest.approx(th_max.d_tilde_2 / 2)
        with pytest.raises(ValueError):
            derive_theory(spec, d_tilde_2=th_max.d_tilde_2 * 2)


def _counts_strategy():
    return st.lists(st.integers(1, 20), min_size=1, max_size=4)


def _rates_strategy(m):
    return st.lists(
        st.floats(0.1, 8.0), min_size=m, max_size=m, unique=True
    ).map(lambda xs: sorted(xs, reverse=True))


@st.composite
def _system(draw):
    counts = draw(_counts_strategy())
    rates = draw(_rates_strategy(len(counts)))
    # strictly-decreasing requirement; nearly-equal draws are discarded
    assume(all(a - b > 1e-6 for a, b in zip(rates, rates[1:])))
    load = draw(st.floats(0.05, 0.98))
    n = sum(counts)
    fractions = [c / n for c in counts]
    capacity = sum(r * c for r, c in zip(rates, counts))
    spec = build_system(n, rates, fractions, [load * capacity], 3)
    return spec, load


class TestTheoryProperties:
    @settings(max_examples=60, deadline=None)
    @given(_system())
    def test_k_minimality_and_balance(self, sys_load):
        spec, _ = sys_load
        th = derive_theory(spec)
        prefix = np.cumsum(spec.rates * spec.counts)
        assert prefix[th.k - 1] > spec.lambda_total
        if th.k > 1:
            assert prefix[th.k - 2] <= spec.lambda_total
        balance = float(np.dot(spec.rates[: th.k], th.c_star_per_class))
        assert balance == pytest.approx(th.lam, rel=1e-12, abs=1e-12)
        alpha = spec.fractions_realized
        for m in range(th.k - 1):
            assert th.c_star_per_class[m] == pytest.approx(alpha[m])
        assert 0 < th.c_star_per_class[th.k - 1] <= alpha[th.k - 1] + 1e-12

    @settings(max_examples=40, deadline=None)
    @given(_system(), st.floats(1.02, 1.6))
    def test_monotone_in_load(self, sys_load, factor):
        spec, load = sys_load
        new_load = load * factor
        if new_load >= 0.999:
            return
        heavier = SystemSpec(
            classes=spec.classes,
            port_rates=spec.port_rates * factor,
            buffer=spec.buffer,
        )
        th1, th2 = derive_theory(spec), derive_theory(heavier)
        assert th2.k >= th1.k
        assert th2.c_star >= th1.c_star - 1e-12

    @settings(max_examples=40, deadline=None)
    @given(_system())
    def test_lower_bound_floor(self, sys_load):
        spec, _ = sys_load
        th = derive_theory(spec)
        mu1 = spec.rates[0]
        assert th.service_time_lb >= 1.0 / mu1 - 1e-12
        if th.k == 1:
            assert th.service_time_lb == pytest.approx(1.0 / mu1, rel=1e-12)
        else:
            assert th.service_time_lb > 1.0 / mu1

    @settings(max_examples=30, deadline=None)
    @given(_system(), st.floats(0.05, 0.95))
    def test_epsilon_monotone_tightening(self, sys_load, shrink):
        spec, _ = sys_load
        th = derive_theory(spec)
        smaller = derive_theory(spec, epsilon=th.epsilon * shrink)
        assert smaller.p1 < th.p1
        assert smaller.d_tilde_1 < th.d_tilde_1
        assert smaller.d_tilde_2 < th.d_tilde_2


class TestBufferWindow:
    def test_large_n_window(self):
        w = buffer_window(0.1, 1.0, 10**12, 8)
        assert (w.b_min, w.b_max) == (6, 12)
        assert w.ok

    def test_small_n_empty_window(self):
        w = buffer_window(0.1, 1.0, 100, 8)
        assert w.b_max == 0 and w.b_max < w.b_min
        assert w.empty and not w.ok

    def test_upper_boundary(self):
        assert not buffer_window(0.1, 1.0, 10**12, 13).ok
        assert buffer_window(0.1, 1.0, 10**12, 12).ok
        assert not buffer_window(0.1, 1.0, 10**12, 5).ok

    def test_theory_wrapper(self):
        spec = scaling_system(512)
        th = derive_theory(spec)
        w = check_buffer_window(th, 512, spec.buffer)
        direct = buffer_window(th.epsilon, th.tau_1k, 512, spec.buffer)
        assert (w.ok, w.b_min, w.b_max) == (direct.ok, direct.b_min, direct.b_max)

    @settings(max_examples=40, deadline=None)
    @given(
        st.floats(0.01, 0.25),
        st.floats(1.0, 16.0),
        st.integers(3, 10**6),
        st.integers(1, 40),
    )
    def test_monotone_in_n(self, eps, tau, n, b):
        # N / ln N is increasing for N >= 3, so a passing (N, b) keeps passing
        w1 = buffer_window(eps, tau, n, b)
        w2 = buffer_window(eps, tau, 4 * n, b)
        assert w2.b_max >= w1.b_max
        if w1.ok:
            assert w2.ok


class TestReferenceBounds:
    def test_excess_bound_arithmetic(self):
        # 52 * 1 * 25 / (0.1 * 1e6)
        th = replace(derive_theory(scaling_system(512)), tau_1k=1.0, epsilon=0.1)
        tb = evaluate_reference_bounds(th, 10**6, 5)
        assert tb.jobs_excess_bound == pytest.approx(0.013, rel=1e-12)

    def test_blocking_bound_arithmetic(self):
        th = replace(
            derive_theory(scaling_system(512)),
            tau_1k=1.0,
            epsilon=0.1,
            d_tilde_2=0.0025,
            lam=0.9,
        )
        tb = evaluate_reference_bounds(th, 10**6, 5)
        assert tb.blocking_bound == pytest.approx(0.0025 / 0.9 + 0.013, rel=1e-12)

    def test_k_equals_m_flag(self):
        spec = build_system(4, [2.0, 1.0], [0.5, 0.5], [5.5], 3)
        th = derive_theory(spec)
        assert th.k == 2  # needs both classes
        tb = evaluate_reference_bounds(th, 4, 3)
        assert tb.k_equals_m and tb.total_jobs_bound is None
        assert tb.blocking_bound > 0

    def test_excess_bound_vanishes_in_n(self):
        spec = scaling_system(512)
        th = derive_theory(spec)
        values = [
            evaluate_reference_bounds(th, n, 5).jobs_excess_bound
            for n in (10**3, 10**4, 10**5, 10**6)
        ]
        assert all(a > b for a, b in zip(values, values[1:]))
