"""Shared convex kernels: projections, a box/cap QP solver, and a projected
gradient engine for smooth concave maximization.

Everything here is deterministic and free of problem-specific structure; the
solvers operate on callbacks so large index structures never need to be
materialized as dense matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Tolerances:
    """Default numerical tolerances shared by the kernels."""

    box_qp_kkt: float = 1e-8
    box_qp_max_iter: int = 10_000
    pg_residual: float = 1e-7
    pg_max_iter: int = 20_000
    newton_dx: float = 1e-10


DEFAULT_TOLS = Tolerances()


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------

def project_simplex(v, total=1.0):
    """Euclidean projection of ``v`` onto {x >= 0, sum(x) = total}.

    Sort-and-threshold; exact up to floating point. There is a theta with
    x_i = max(v_i - theta, 0) (the KKT form checked by the tests).
    """
    v = np.asarray(v, dtype=float)
    if total <= 0:
        raise ValueError("simplex total must be positive")
    if not np.all(np.isfinite(v)):
        raise ValueError("simplex projection requires finite input")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - total
    ks = np.arange(1, v.size + 1)
    cond = u - css / ks > 0
    k = np.nonzero(cond)[0][-1]
    theta = css[k] / (k + 1.0)
    return np.maximum(v - theta, 0.0)


def project_capped_nonneg(v, w=None, cap=1.0):
    """Project ``v`` onto {x >= 0, sum(w_i x_i) <= cap} with w > 0.

    If the clipped point already satisfies the cap it is returned as-is;
    otherwise the unique theta > 0 with x = max(v - theta*w, 0) and
    w'x = cap is found by sorting the breakpoints v_i / w_i.
    """
    v = np.asarray(v, dtype=float)
    if w is None:
        w = np.ones_like(v)
    else:
        w = np.asarray(w, dtype=float)
    x = np.maximum(v, 0.0)
    if float(x @ w) <= cap:
        return x
    # f(theta) = sum_i w_i max(v_i - theta w_i, 0) is piecewise linear and
    # decreasing with breakpoints at v_i / w_i; find the segment where it
    # crosses the cap.
    r = v / w
    order = np.argsort(r)[::-1]
    vr, wr, rr = v[order], w[order], r[order]
    cvw = np.cumsum(vr * wr)
    cw2 = np.cumsum(wr * wr)
    theta = (cvw - cap) / cw2
    r_next = np.append(rr[1:], -np.inf)
    ok = (theta <= rr) & (theta >= r_next)
    m = int(np.nonzero(ok)[0][0])
    t = max(float(theta[m]), 0.0)
    return np.maximum(v - t * w, 0.0)


def project_capped_nonneg_rows(V, W, cap=1.0):
    """Row-batched version of :func:`project_capped_nonneg`.

    Projects every row of ``V`` onto {x >= 0, sum(W_row * x) <= cap}; rows
    already feasible after clipping are returned clipped.
    """
    V = np.asarray(V, dtype=float)
    W = np.asarray(W, dtype=float)
    X = np.maximum(V, 0.0)
    dots = np.einsum("sp,sp->s", W, X)
    bad = dots > cap
    if not bad.any():
        return X
    v = V[bad]
    w = W[bad]
    r = v / w
    order = np.argsort(-r, axis=1)
    vr = np.take_along_axis(v, order, axis=1)
    wr = np.take_along_axis(w, order, axis=1)
    rr = np.take_along_axis(r, order, axis=1)
    cvw = np.cumsum(vr * wr, axis=1)
    cw2 = np.cumsum(wr * wr, axis=1)
    theta = (cvw - cap) / cw2
    r_next = np.concatenate([rr[:, 1:], np.full((rr.shape[0], 1), -np.inf)], axis=1)
    ok = (theta <= rr) & (theta >= r_next)
    first = np.argmax(ok, axis=1)
    t = np.maximum(theta[np.arange(theta.shape[0]), first], 0.0)
    X[bad] = np.maximum(v - t[:, None] * w, 0.0)
    return X


# ---------------------------------------------------------------------------
# Quadratic forms
# ---------------------------------------------------------------------------

class QuadraticForm:
    """Implicit quadratic objective  q(x) = 1/2 ||M x - b||^2.

    ``matvec`` applies M, ``rmatvec`` applies M'. The maps are never
    materialized; ``lipschitz`` returns an upper bound on ||M'M|| obtained by
    power iteration (cached).
    """

    def __init__(self, matvec: Callable, rmatvec: Callable, b, dim: int):
        self.matvec = matvec
        self.rmatvec = rmatvec
        self.b = np.asarray(b, dtype=float)
        self.dim = dim
        self._lip: Optional[float] = None

    @classmethod
    def from_dense(cls, M, b):
        M = np.asarray(M, dtype=float)
        return cls(lambda x: M @ x, lambda r: M.T @ r, b, M.shape[1])

    def value(self, x):
        r = self.matvec(x) - self.b
        return 0.5 * float(r @ r)

    def gradient(self, x):
        return self.rmatvec(self.matvec(x) - self.b)

    def lipschitz(self, iters: int = 60, seed: int = 0) -> float:
        if self._lip is None:
            rng = np.random.default_rng(seed)
            x = rng.standard_normal(self.dim)
            x /= np.linalg.norm(x) + 1e-300
            lam = 1.0
            for _ in range(iters):
                y = self.rmatvec(self.matvec(x))
                lam = float(np.linalg.norm(y))
                if lam <= 0:
                    break
                x = y / lam
            self._lip = max(lam * 1.05, 1e-12)
        return self._lip

    def check_adjoint(self, rng=None, tol=1e-8) -> bool:
        """<Mx, y> must equal <x, M'y> for random probes."""
        rng = rng or np.random.default_rng(0)
        x = rng.standard_normal(self.dim)
        mx = self.matvec(x)
        y = rng.standard_normal(np.shape(mx))
        lhs = float(np.vdot(mx, y))
        rhs = float(np.vdot(x, self.rmatvec(y)))
        scale = max(1.0, abs(lhs), abs(rhs))
        return abs(lhs - rhs) <= tol * scale


@dataclass
class BoxQpResult:
    x: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool


def _project_box_groups(x, lower, groups):
    # Clipping before the cap projection is exact here because for theta >= 0,
    # max(max(p,0) - theta*w, 0) == max(p - theta*w, 0) elementwise.
    x = np.maximum(x, lower)
    for idx, w, cap in groups:
        if idx is None:
            if float(x @ w) > cap:
                x = project_capped_nonneg(x, w, cap)
        else:
            seg = x[idx]
            if float(seg @ w) > cap:
                x[idx] = project_capped_nonneg(seg, w, cap)
    return x


def solve_box_qp(
    form: QuadraticForm,
    lower=0.0,
    groups: Optional[Sequence[tuple]] = None,
    x0=None,
    tol: float = DEFAULT_TOLS.box_qp_kkt,
    max_iter: int = DEFAULT_TOLS.box_qp_max_iter,
) -> BoxQpResult:
    """Minimize an implicit quadratic over {x >= lower} with optional
    per-group weighted-sum caps  sum_g w_i x_i <= cap.

    FISTA with adaptive restart; the projection is exact, so every iterate is
    feasible. Terminates on the projected-gradient fixed-point residual or at
    ``max_iter`` (returning the best iterate with ``converged=False``).
    """
    groups = list(groups) if groups else []
    if groups and np.any(np.asarray(lower) != 0.0):
        raise ValueError("group caps are only supported with zero lower bounds")
    L = form.lipschitz()
    step = 1.0 / L
    if x0 is None:
        x = np.full(form.dim, 0.0)
    else:
        x = np.array(x0, dtype=float)
    x = _project_box_groups(x, lower, groups)
    y = x.copy()
    t = 1.0
    prev_val = form.value(x)
    res = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = form.gradient(y)
        x_new = _project_box_groups(y - step * g, lower, groups)
        val = form.value(x_new)
        if val > prev_val:            # adaptive restart
            y = x.copy()
            t = 1.0
            g = form.gradient(y)
            x_new = _project_box_groups(y - step * g, lower, groups)
            val = form.value(x_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t, prev_val = x_new, t_new, val
        if it % 5 == 0 or it == 1:
            gx = form.gradient(x)
            res = float(np.max(np.abs(x - _project_box_groups(x - step * gx, lower, groups)))) * L
            if res <= tol:
                return BoxQpResult(x, res, it, True)
    gx = form.gradient(x)
    res = float(np.max(np.abs(x - _project_box_groups(x - step * gx, lower, groups)))) * L
    return BoxQpResult(x, res, it, res <= tol)


# ---------------------------------------------------------------------------
# Projected gradient ascent for smooth concave objectives
# ---------------------------------------------------------------------------

class InfeasibleStart(ValueError):
    """Raised when the objective is -inf at the starting point."""


@dataclass
class PgResult:
    x: np.ndarray
    value: float
    residual: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def projected_gradient_max(
    value_grad: Callable,
    project: Callable,
    x0,
    tol: float = DEFAULT_TOLS.pg_residual,
    max_iter: int = DEFAULT_TOLS.pg_max_iter,
    step0: float = 1.0,
    armijo: float = 1e-4,
    keep_trace: bool = False,
) -> PgResult:
    """Maximize a smooth concave objective over a convex set.

    ``value_grad(x) -> (value, grad)`` where value may be ``-inf`` outside the
    effective domain; ``project(x)`` is the exact Euclidean projection onto
    the feasible set. Steps use Armijo backtracking, so the objective is
    nondecreasing across iterations. The fixed-point residual is
    ``max|x - project(x + grad)|`` measured with a unit probe step.
    """
    x = project(np.array(x0, dtype=float))
    val, grad = value_grad(x)
    if not np.isfinite(val):
        raise InfeasibleStart("objective is infeasible at the starting point")
    step = step0
    trace = [val] if keep_trace else []
    it = 0
    for it in range(1, max_iter + 1):
        cand = project(x + step * grad)
        dx = cand - x
        ip = float(grad.ravel() @ dx.ravel())
        cval, cgrad = value_grad(cand)
        # Backtrack until the Armijo ascent condition holds (and cand is finite).
        bt = 0
        while (not np.isfinite(cval)) or cval < val + armijo * ip:
            step *= 0.5
            bt += 1
            if bt > 60:
                break
            cand = project(x + step * grad)
            dx = cand - x
            ip = float(grad.ravel() @ dx.ravel())
            cval, cgrad = value_grad(cand)
        if bt > 60 or not np.isfinite(cval) or cval < val:
            break
        x, val, grad = cand, cval, cgrad
        if keep_trace:
            trace.append(val)
        if bt == 0:
            step *= 2.0
        res = float(np.max(np.abs(x - project(x + grad))))
        if res <= tol:
            return PgResult(x, val, res, it, True, trace)
    res = float(np.max(np.abs(x - project(x + grad))))
    return PgResult(x, val, res, it, res <= tol, trace)
