import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectra.utility import (DelayUtility, BarrierError, per_device_concave_max,
                             SumRateUtility, SumLogRateUtility, MinRateUtility)


def test_zero_load_utility_is_zero():
    u = DelayUtility([0.0, 0.0], 1e6)
    ev = u.evaluate([0.0, 5e6])
    assert ev.feasible and ev.value == 0.0


def test_single_queue_hand_value():
    # one device, tau = 1e6 bits, lambda = 1 pkt/s, r = 2e6 b/s:
    # margin = 1 pkt/s, backlog cost 1, mean delay 1 s.
    u = DelayUtility([1.0], 1e6)
    ev = u.evaluate([2e6])
    assert ev.feasible
    assert abs(ev.value + 1.0) <= 1e-12
    assert abs(u.average_delay([2e6]) - 1.0) <= 1e-12


def test_boundary_rate_is_infeasible():
    u = DelayUtility([1.0], 1e6)
    ev = u.evaluate([1e6])     # r/tau == lambda exactly
    assert not ev.feasible and ev.value == -math.inf
    assert u.average_delay([1e6]) == math.inf


def test_gradient_hand_value():
    u = DelayUtility([1.0], 1e6)
    g = u.gradient([2e6])
    assert abs(g[0] - 1e-6) <= 1e-18


def test_gradient_zero_load_zero():
    u = DelayUtility([0.0, 2.0], 1e6)
    g = u.gradient([1e5, 5e6])
    assert g[0] == 0.0 and g[1] > 0


def test_gradient_at_barrier_raises():
    u = DelayUtility([1.0], 1e6)
    with pytest.raises(BarrierError):
        u.gradient([0.5e6])


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(4)
    for _ in range(100):
        k = rng.integers(1, 6)
        lam = rng.uniform(0.0, 5.0, k)
        tau = float(rng.uniform(1e5, 2e6))
        u = DelayUtility(lam, tau)
        r = (lam + rng.uniform(0.5, 8.0, k)) * tau
        g = u.gradient(r)
        for j in range(k):
            hstep = max(abs(r[j]), tau) * 1e-6
            rp, rm = r.copy(), r.copy()
            rp[j] += hstep
            rm[j] -= hstep
            fd = (u.value(rp) - u.value(rm)) / (2 * hstep)
            denom = max(abs(fd), 1e-18)
            assert abs(g[j] - fd) / denom <= 1e-6


def test_gradient_positive_decreasing():
    u = DelayUtility([2.0], 1e6)
    g1 = u.gradient([4e6])[0]
    g2 = u.gradient([8e6])[0]
    assert g1 > g2 > 0


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_concavity_probe(k, seed):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0, 4, k)
    tau = 1e6
    u = DelayUtility(lam, tau)
    r1 = (lam + rng.uniform(0.2, 6, k)) * tau
    r2 = (lam + rng.uniform(0.2, 6, k)) * tau
    th = rng.uniform(0, 1)
    mix = u.value(th * r1 + (1 - th) * r2)
    assert mix >= th * u.value(r1) + (1 - th) * u.value(r2) - 1e-9


def test_elementwise_nondecreasing():
    rng = np.random.default_rng(10)
    lam = rng.uniform(0, 3, 4)
    u = DelayUtility(lam, 1e6)
    r = (lam + rng.uniform(0.5, 4, 4)) * 1e6
    base = u.value(r)
    for j in range(4):
        r2 = r.copy()
        r2[j] *= 1.25
        assert u.value(r2) >= base - 1e-12


# ---------------------------------------------------------------------------
# 1-D prox kernel
# ---------------------------------------------------------------------------

def test_kernel_zero_slope_returns_clipped_center():
    u = DelayUtility([2.0], 1e6)
    assert per_device_concave_max(u, 0, slope=0.0, center=0.7, rho=1.0) == 0.7
    assert per_device_concave_max(u, 0, slope=0.0, center=-0.3, rho=1.0) == 0.0


def test_kernel_unbounded_without_penalty():
    u = DelayUtility([2.0], 1e6)
    assert per_device_concave_max(u, 0, slope=1e6, center=0.0, rho=0.0) == math.inf


def test_kernel_matches_grid_scan():
    rng = np.random.default_rng(8)
    for _ in range(20):
        lam = float(rng.uniform(0.5, 4.0))
        tau = 1e6
        u = DelayUtility([lam], tau)
        slope = float(rng.uniform(2e6, 2e7))
        center = float(rng.uniform(-0.5, 1.5))
        rho = float(rng.uniform(0.5, 20.0))
        x = per_device_concave_max(u, 0, slope, center, rho)
        lo = lam * tau / slope
        grid = np.linspace(lo * (1 + 1e-9), max(3.0, x * 2, center + 2), 3_000_001)
        vals = -lam / (slope * grid / tau - lam) - 0.5 * rho * (grid - center) ** 2
        best = grid[np.argmax(vals)]
        assert abs(x - best) <= 1e-5


# ---------------------------------------------------------------------------
# plug-in utilities
# ---------------------------------------------------------------------------

def test_sum_rate_plugin():
    u = SumRateUtility()
    assert u.value([1.0, 2.0]) == 3.0
    assert np.allclose(u.gradient([1.0, 2.0]), [1, 1])


def test_sum_log_rate_plugin():
    u = SumLogRateUtility()
    assert abs(u.value([math.e, 1.0]) - 1.0) <= 1e-12
    assert not u.evaluate([0.0, 1.0]).feasible
    assert np.allclose(u.gradient([2.0, 4.0]), [0.5, 0.25])


def test_min_rate_plugin():
    u = MinRateUtility()
    assert u.value([3.0, 1.0, 2.0]) == 1.0
    g = u.gradient([3.0, 1.0, 2.0])
    assert g[1] == 1.0 and g.sum() == 1.0
