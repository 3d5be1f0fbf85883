import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spectra.convexcore import (
    QuadraticForm, project_simplex, project_capped_nonneg, solve_box_qp,
    projected_gradient_max, InfeasibleStart)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def simplex_qp_oracle(v, total):
    """Exhaustive active-set enumeration for the simplex projection, d <= 8."""
    d = len(v)
    best, best_val = None, math.inf
    for active in itertools.product([0, 1], repeat=d):
        free = [i for i in range(d) if not active[i]]
        if not free:
            continue
        x = np.zeros(d)
        # Equality-constrained optimum on the free set: x = v - theta.
        theta = (sum(v[i] for i in free) - total) / len(free)
        ok = True
        for i in free:
            x[i] = v[i] - theta
            if x[i] < -1e-12:
                ok = False
        if not ok:
            continue
        val = float(np.sum((x - v) ** 2))
        if val < best_val - 1e-15:
            best_val, best = val, x
    return best


def box_qp_oracle(H, c, w=None, cap=1.0):
    """Brute-force active-set QP oracle: min 1/2 x'Hx - c'x, x >= 0
    (optionally w'x <= cap), for d <= 8."""
    d = H.shape[0]
    best, best_val = None, math.inf
    for active in itertools.product([0, 1], repeat=d):
        free = [i for i in range(d) if not active[i]]
        for cap_active in ([False, True] if w is not None else [False]):
            x = np.zeros(d)
            if free:
                Hf = H[np.ix_(free, free)]
                cf = c[free]
                if cap_active:
                    wf = w[free]
                    KKT = np.block([[Hf, wf[:, None]], [wf[None, :], np.zeros((1, 1))]])
                    rhs = np.concatenate([cf, [cap]])
                    try:
                        sol = np.linalg.solve(KKT, rhs)
                    except np.linalg.LinAlgError:
                        continue
                    xf, mult = sol[:-1], sol[-1]
                    if mult < -1e-12:
                        continue
                else:
                    try:
                        xf = np.linalg.solve(Hf, cf)
                    except np.linalg.LinAlgError:
                        continue
                x[free] = xf
            if np.any(x < -1e-10):
                continue
            if w is not None and x @ w > cap + 1e-10:
                continue
            val = 0.5 * x @ H @ x - c @ x
            if val < best_val - 1e-13:
                best_val, best = val, x.copy()
    return best


# ---------------------------------------------------------------------------
# simplex projection
# ---------------------------------------------------------------------------

def test_simplex_feasible_input_unchanged():
    v = np.array([0.2, 0.3, 0.5])
    assert np.allclose(project_simplex(v, 1.0), v, atol=1e-14)


def test_simplex_clamp_then_shift():
    out = project_simplex(np.array([2.0, 0.0]), 1.0)
    assert np.allclose(out, [1.0, 0.0], atol=1e-14)


def test_simplex_against_active_set_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        d = rng.integers(2, 9)
        v = rng.normal(0, 2, d)
        total = float(rng.uniform(0.2, 3.0))
        got = project_simplex(v, total)
        want = simplex_qp_oracle(v, total)
        assert np.max(np.abs(got - want)) <= 1e-9
        # KKT form: x = max(v - theta, 0) for some scalar theta.
        active = got > 0
        thetas = (v - got)[active]
        assert np.ptp(thetas) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=10))
def test_simplex_idempotent_and_nonexpansive(vals):
    v = np.array(vals)
    p1 = project_simplex(v, 1.0)
    assert abs(p1.sum() - 1.0) <= 1e-9
    assert np.min(p1) >= 0
    p2 = project_simplex(p1, 1.0)
    assert np.max(np.abs(p1 - p2)) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=2, max_size=8),
       st.lists(st.floats(-4, 4), min_size=2, max_size=8))
def test_projections_nonexpansive_pairwise(a, b):
    d = min(len(a), len(b))
    u, v = np.array(a[:d]), np.array(b[:d])
    pu, pv = project_simplex(u, 1.0), project_simplex(v, 1.0)
    assert np.linalg.norm(pu - pv) <= np.linalg.norm(u - v) + 1e-10


def test_capped_nonneg_projection_oracle():
    rng = np.random.default_rng(3)
    for _ in range(40):
        d = rng.integers(2, 8)
        v = rng.normal(0, 1.5, d)
        w = rng.uniform(0.2, 3.0, d)
        got = project_capped_nonneg(v, w, 1.0)
        assert np.min(got) >= 0 and got @ w <= 1.0 + 1e-12
        # compare against the box-QP oracle with H = I, c = v
        want = box_qp_oracle(np.eye(d), v, w, 1.0)
        assert np.max(np.abs(got - want)) <= 1e-9


# ---------------------------------------------------------------------------
# box QP
# ---------------------------------------------------------------------------

def test_box_qp_unconstrained_optimum_feasible():
    H = np.diag([2.0, 4.0])
    c = np.array([2.0, 8.0])     # optimum (1, 2), feasible
    form = QuadraticForm.from_dense(np.linalg.cholesky(H).T,
                                    np.linalg.solve(np.linalg.cholesky(H).T, c))
    res = solve_box_qp(form, tol=1e-10)
    assert res.converged
    assert np.allclose(res.x, [1.0, 2.0], atol=1e-8)


def test_box_qp_single_variable_cap_active():
    # minimize (x - c)^2 with w x <= 1 and c > 1/w -> x = 1/w
    w = 0.5
    cvec = np.array([4.0])
    form = QuadraticForm.from_dense(np.eye(1), cvec)
    res = solve_box_qp(form, groups=[(None, np.array([w]), 1.0)], tol=1e-12)
    assert abs(res.x[0] - 2.0) <= 1e-9


def test_box_qp_random_instances_vs_oracle():
    rng = np.random.default_rng(11)
    for trial in range(25):
        d = rng.integers(2, 7)
        M = rng.normal(0, 1, (d + 2, d))
        b = rng.normal(0, 1, d + 2)
        H = M.T @ M
        c = M.T @ b
        w = rng.uniform(0.3, 2.0, d)
        form = QuadraticForm.from_dense(M, b)
        res = solve_box_qp(form, groups=[(None, w, 1.0)], tol=1e-11,
                           max_iter=50_000)
        want = box_qp_oracle(H, c, w, 1.0)
        assert want is not None
        assert np.max(np.abs(res.x - want)) <= 1e-7, f"trial {trial}"


def test_box_qp_iteration_cap_flags():
    rng = np.random.default_rng(5)
    M = rng.normal(0, 1, (6, 4))
    form = QuadraticForm.from_dense(M, rng.normal(0, 1, 6))
    res = solve_box_qp(form, tol=1e-16, max_iter=3)
    assert not res.converged
    assert res.iterations == 3


def test_quadratic_form_adjoint_probe():
    rng = np.random.default_rng(9)
    M = rng.normal(0, 1, (7, 5))
    form = QuadraticForm.from_dense(M, np.zeros(7))
    assert form.check_adjoint()
    bad = QuadraticForm(lambda x: M @ x, lambda r: (M + 0.1).T @ r, np.zeros(7), 5)
    assert not bad.check_adjoint()


# ---------------------------------------------------------------------------
# projected gradient
# ---------------------------------------------------------------------------

def test_pg_quadratic_matches_closed_form():
    # maximize -(x - t)'D(x - t) over the nonnegative orthant
    t = np.array([1.5, -2.0, 0.5])
    D = np.array([1.0, 2.0, 3.0])

    def vg(x):
        return -float(D @ (x - t) ** 2), -2.0 * D * (x - t)

    res = projected_gradient_max(vg, lambda x: np.maximum(x, 0.0),
                                 np.zeros(3), tol=1e-7)
    assert res.converged
    assert np.allclose(res.x, np.maximum(t, 0.0), atol=1e-7)


def test_pg_monotone_ascent():
    rng = np.random.default_rng(2)
    M = rng.normal(0, 1, (5, 5))
    H = M @ M.T + np.eye(5)
    t = rng.normal(0, 1, 5)

    def vg(x):
        d = x - t
        return -float(d @ H @ d), -2.0 * H @ d

    res = projected_gradient_max(vg, lambda x: np.maximum(x, 0.0),
                                 np.full(5, 3.0), tol=1e-9, keep_trace=True)
    trace = np.array(res.trace)
    assert np.all(np.diff(trace) >= -1e-12)


def test_pg_infeasible_start_raises():
    def vg(x):
        return -math.inf, None

    with pytest.raises(InfeasibleStart):
        projected_gradient_max(vg, lambda x: x, np.zeros(2))


def test_pg_two_variable_rate_prox_vs_grid():
    """Utility-prox shaped instances against a fine grid search."""
    from spectra.utility import DelayUtility
    rng = np.random.default_rng(7)
    for _ in range(5):
        lam, tau = 2.0, 1e6
        util = DelayUtility([lam], tau)
        s = rng.uniform(2e6, 8e6, 2)
        a = rng.uniform(-0.2, 0.8, 2)
        rho = 2.0

        def vg(x):
            r = float(s @ x)
            ev = util.evaluate([r])
            if not ev.feasible:
                return -math.inf, None
            grad = util.gradient([r])[0] * s - rho * (x - a)
            return ev.value - 0.5 * rho * float((x - a) @ (x - a)), grad

        res = projected_gradient_max(vg, lambda x: np.maximum(x, 0.0),
                                     np.full(2, 1.0), tol=1e-10, step0=1e-6)
        grid = np.linspace(0, 3, 501)
        best = -math.inf
        for x0 in grid:
            for x1 in grid:
                r = s[0] * x0 + s[1] * x1
                if r / tau <= lam:
                    continue
                val = -lam / (r / tau - lam) - 0.5 * rho * ((x0 - a[0]) ** 2
                                                            + (x1 - a[1]) ** 2)
                best = max(best, val)
        assert res.value >= best - 1e-4
