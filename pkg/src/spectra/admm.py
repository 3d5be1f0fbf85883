"""Distributed consensus ADMM for the segmented local-pattern program.

Each iteration performs three bulk-synchronous steps:

  1. per-AP bandwidth-view update (a small box/cap QP per cluster, batched
     over segments);
  2. per-device rate update (an exact 1-D prox of the delay utility per
     device, run as damped parallel sweeps so the simultaneous pass is an
     ascent on the joint block), the closed-form pairwise consensus update,
     and the simplex segment-width update;
  3. dual ascent for the link, consistency and width multipliers.

The pairwise duals are stored once per unordered cluster pair; the reverse
direction is the exact negation, which the midpoint consensus update
preserves, so the antisymmetry invariant holds by representation.

Message passing is simulated in-process: an optional log counts the values
each step would exchange, split into cluster-local traffic and the
segment-width broadcast, so locality can be audited.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .convexcore import (project_capped_nonneg, project_capped_nonneg_rows,
                         project_simplex)
from .localform import LocalProblem, SegmentedAllocation


class AdmmDivergenceError(RuntimeError):
    """Residuals grew past the divergence guard; try a different rho."""


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    pair_rho_factor: float = 1.0   # penalty scaling of the consistency family
    row_rho_factor: float = 1.0    # penalty scaling of the width family
    tol: float = 1e-5              # rms stopping tolerance, unit-bandwidth scale
    max_iter: int = 2000
    min_iter: int = 5
    over_relax: float = 1.7        # standard over-relaxation, valid in (0, 2)
    z_passes: int = 2              # damped parallel sweeps per iteration
    z_pass_tol: float = 1e-12
    py_max_iter: int = 120         # per-iteration cap for the per-AP QP
    py_tol_floor: float = 1e-10    # fixed-point displacement units
    py_tol_factor: float = 0.002   # inner QP accuracy tracks the outer residual
    adapt_rho: bool = False        # residual-balancing x2 / /2 when ratio > 10
    track_messages: bool = False
    divergence_window: int = 100
    divergence_factor: float = 10.0
    projection_target: float = 1e-9
    projection_rounds: int = 2000


@dataclass
class AdmmState:
    y: list
    z: list
    h: np.ndarray
    v: list                 # one (S, slots) array per unordered pair
    alpha: list             # per cluster, (S, P_i/2)
    beta: list              # forward dual per pair; reverse is its negation
    gamma: np.ndarray       # (n, S)
    g: np.ndarray           # warm-started per-device utility multipliers
    rho: float
    pair_factor: float = 1.0
    row_factor: float = 1.0
    iteration: int = 0

    @property
    def rho_pair(self) -> float:
        return self.rho * self.pair_factor

    @property
    def rho_row(self) -> float:
        return self.rho * self.row_factor

    def beta_side(self, problem: LocalProblem, p_idx: int, who: int) -> np.ndarray:
        pm = problem.pairs[p_idx]
        b = self.beta[p_idx]
        return b if who == pm.i else -b

    def copy(self) -> "AdmmState":
        return AdmmState(
            y=[a.copy() for a in self.y], z=[a.copy() for a in self.z],
            h=self.h.copy(), v=[a.copy() for a in self.v],
            alpha=[a.copy() for a in self.alpha],
            beta=[a.copy() for a in self.beta],
            gamma=self.gamma.copy(), g=self.g.copy(),
            rho=self.rho, pair_factor=self.pair_factor,
            row_factor=self.row_factor, iteration=self.iteration)


@dataclass
class MessageLog:
    """Aggregate counts of values exchanged by the simulated message passing."""

    per_iteration: list = field(default_factory=list)
    pair_totals: dict = field(default_factory=dict)
    edge_totals: dict = field(default_factory=dict)

    def record(self, problem: LocalProblem, z_passes: int):
        S = problem.segments
        intra_edge = 0
        for i in range(problem.n):
            per_edge = 2 * S * problem.own_masks[i].size * z_passes
            for j in problem.edge_rows[i]:
                key = (i, int(j))
                self.edge_totals[key] = self.edge_totals.get(key, 0) + per_edge
                intra_edge += per_edge
        intra_pair = 0
        for pm in problem.pairs:
            cnt = 2 * S * pm.slots
            key = (pm.i, pm.m)
            self.pair_totals[key] = self.pair_totals.get(key, 0) + cnt
            intra_pair += cnt
        self.per_iteration.append({
            "intra_edge": intra_edge,
            "intra_pair": intra_pair,
            "broadcast_down": problem.n * S,
            "broadcast_up": 2 * S * problem.n,
        })


@dataclass
class AdmmResult:
    allocation: SegmentedAllocation
    state: AdmmState
    trace: list
    converged: bool
    iterations: int
    message_log: Optional[MessageLog] = None


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_state(problem: LocalProblem, config: "AdmmConfig",
               seed: Optional[int] = None) -> AdmmState:
    """Primal start with duals at zero (satisfying the antisymmetry premise).

    With a seed the per-pattern start is randomized: the capped program's
    optimum set is often symmetric across segments, and a deterministic
    uniform start would keep every segment identical forever. The seeded
    jitter plays the role of the random first-round weights in breaking that
    symmetry.
    """
    S = problem.segments
    h = np.full(S, 1.0 / S)
    rng = np.random.default_rng(seed) if seed is not None else None
    y = []
    z = []
    for i in range(problem.n):
        P = problem.pattern_count[i]
        if rng is None:
            yi = np.full((S, P), 1.0 / (S * P))
        else:
            yi = 1.0 - rng.random((S, P))
            yi *= (1.0 / S) / yi.sum(axis=1, keepdims=True)
        y.append(yi)
        u = problem.edge_rows[i].size
        z.append(np.repeat(yi[None, :, problem.own_masks[i]] / u, u, axis=0))
    v = [0.5 * (problem.pair_sum(pm, pm.i, y[pm.i]) + problem.pair_sum(pm, pm.m, y[pm.m]))
         for pm in problem.pairs]
    alpha = [np.zeros((S, problem.own_masks[i].size)) for i in range(problem.n)]
    beta = [np.zeros((S, pm.slots)) for pm in problem.pairs]
    gamma = np.zeros((problem.n, S))
    g = np.zeros(problem.k)
    return AdmmState(y=y, z=z, h=h, v=v, alpha=alpha, beta=beta, gamma=gamma,
                     g=g, rho=config.rho, pair_factor=config.pair_rho_factor,
                     row_factor=config.row_rho_factor)


# ---------------------------------------------------------------------------
# Step 1: per-AP bandwidth-view update (Py)
# ---------------------------------------------------------------------------

def _py_operator(problem: LocalProblem, i: int):
    """Constraint-row matrix for cluster i's quadratic (cached CSR).

    Rows: one per own pattern (the link-sum targets), one per shared
    sub-pattern of every overlapping pair (the consistency targets), and a
    final all-ones row (the segment-width target).
    """
    cache = getattr(problem, "_py_ops", None)
    if cache is None:
        cache = {}
        problem._py_ops = cache
    if i not in cache:
        P = problem.pattern_count[i]
        own = problem.own_masks[i]
        rows = [np.arange(own.size)]
        cols = [own.astype(np.int64)]
        base = own.size
        pair_slices = []
        for p_idx in problem.pairs_of[i]:
            pm = problem.pairs[p_idx]
            order, group = pm.side(i)
            rows.append(base + np.repeat(np.arange(pm.slots), group))
            cols.append(order[group:].astype(np.int64))
            pair_slices.append((p_idx, slice(base, base + pm.slots)))
            base += pm.slots
        rows.append(np.full(P, base))
        cols.append(np.arange(P, dtype=np.int64))
        base += 1
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        G = sp.csr_matrix((np.ones(r.size), (r, c)), shape=(base, P))
        cache[i] = (G, pair_slices, {})
    return cache[i]


def _py_lipschitz(problem, i, G, w2, key) -> float:
    """2 * ||G' diag(w2) G|| by power iteration, cached per weighting."""
    _, _, lips = problem._py_ops[i]
    if key not in lips:
        rng = np.random.default_rng(1234 + i)
        u = rng.standard_normal(G.shape[1])
        u /= np.linalg.norm(u)
        lam = 1.0
        for _ in range(80):
            w = G.T @ (w2 * (G @ u))
            lam = float(np.linalg.norm(w))
            if lam <= 0:
                break
            u = w / lam
        lips[key] = 2.0 * lam * 1.05 + 1e-9
    return lips[key]


def _py_project(y, weights_i):
    if weights_i is None:
        return np.maximum(y, 0.0)
    return project_capped_nonneg_rows(y, weights_i, 1.0)


def y_update(problem: LocalProblem, state: AdmmState, weights=None,
             tol: float = 1e-9, max_iter: int = 10_000) -> float:
    """Solve every per-AP subproblem at the current state (in place).

    Each cluster solves, independently and batched over segments,
      min    || G y - targets ||^2
      s.t.   y >= 0  and per-segment weighted caps when weights are given,
    by FISTA with gradient-based adaptive restart and exact projections.
    ``tol`` is on the projected fixed-point displacement at step 1/L (so a
    converged cluster moves less than ``tol`` per sweep); the worst residual
    across clusters is returned.
    """
    rho = state.rho
    worst = 0.0
    for i in range(problem.n):
        G, pair_slices, _ = _py_operator(problem, i)
        T = np.empty((G.shape[0], problem.segments))
        nown = problem.own_masks[i].size
        T[:nown] = (state.z[i].sum(axis=0) - state.alpha[i] / rho).T
        w2 = np.empty(G.shape[0])
        w2[:nown] = 1.0
        for p_idx, rows in pair_slices:
            T[rows] = (state.v[p_idx]
                       + state.beta_side(problem, p_idx, i) / state.rho_pair).T
            w2[rows] = state.pair_factor
        T[-1] = state.h - state.gamma[i] / state.rho_row
        w2[-1] = state.row_factor
        w2col = w2[:, None]
        w_i = weights[i] if weights is not None else None
        L = _py_lipschitz(problem, i, G, w2, (state.pair_factor, state.row_factor))
        step = 1.0 / L

        def grad(yy):
            return 2.0 * (G.T @ (w2col * (G @ yy.T - T))).T

        x = _py_project(state.y[i].copy(), w_i)
        yk = x.copy()
        tk = 1.0
        res = math.inf
        for it in range(1, max_iter + 1):
            gv = grad(yk)
            x_new = _py_project(yk - step * gv, w_i)
            # gradient-based restart: drop momentum when it points uphill
            if float(np.vdot(yk - x_new, x_new - x)) > 0.0:
                yk = x.copy()
                gv = grad(yk)
                x_new = _py_project(yk - step * gv, w_i)
                tk = 1.0
            t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * tk * tk))
            yk = x_new + ((tk - 1.0) / t_new) * (x_new - x)
            x, tk = x_new, t_new
            if it % 4 == 0 or it == max_iter:
                gx = grad(x)
                res = float(np.max(np.abs(x - _py_project(x - step * gx, w_i))))
                if res <= tol:
                    break
        state.y[i] = x
        worst = max(worst, res)
    return worst


# ---------------------------------------------------------------------------
# Step 2a: per-device rate update (Pz)
# ---------------------------------------------------------------------------

def solve_device_multipliers(lam, s, bounds, dev_of, m_dev, coef, g_init,
                             tol: float = 1e-11, max_iter: int = 90):
    """Batched scalar solves of  g = u_j'(r_j(g))  per device, where
    r_j(g) = sum_c s_c max(m_c + g * coef_c, 0) is nondecreasing in g.

    Devices with no load take g = 0 (pure projection). Bracketed Newton,
    warm-started from ``g_init``.
    """
    k = lam.size
    g = np.where(lam > 0, np.maximum(np.asarray(g_init, dtype=float), 0.0), 0.0)
    lo = np.zeros(k)
    hi = np.full(k, np.inf)
    active = lam > 0
    for _ in range(max_iter):
        if not active.any():
            break
        gs = g[dev_of]
        zc = m_dev + gs * coef
        pos = zc > 0
        r = np.add.reduceat(np.where(pos, s * zc, 0.0), bounds)
        rp = np.add.reduceat(np.where(pos, s * coef, 0.0), bounds)
        margin = r - lam
        below = active & (margin <= 0)
        ok = active & ~below
        safem = np.where(margin > 0, margin, 1.0)
        phi = g - lam / (safem * safem)
        conv = ok & (np.abs(phi) <= tol * np.maximum(1.0, np.abs(g)))
        active = active & ~conv
        ok = ok & ~conv
        lo = np.where(below, np.maximum(lo, g), lo)
        lo = np.where(ok & (phi < 0), np.maximum(lo, g), lo)
        hi = np.where(ok & (phi >= 0), np.minimum(hi, g), hi)
        phip = 1.0 + 2.0 * lam * rp / (safem ** 3)
        newton = g - phi / phip
        inside = ok & (newton > lo) & (newton < hi)
        fallback = np.where(np.isfinite(hi), 0.5 * (lo + hi),
                            np.maximum(2.0 * g, np.maximum(2.0 * lo, 1.0)))
        g_next = np.where(inside, newton, fallback)
        g = np.where(active, g_next, g)
    return g


def z_update(problem: LocalProblem, state: AdmmState, passes: int = 4,
             pass_tol: float = 1e-12, c_targets=None) -> float:
    """Damped parallel sweeps over the device subproblems (in place).

    Each sweep reads one shared snapshot (so results do not depend on device
    order), moves every device toward its own exact prox solution, and is an
    ascent step on the joint rate block; the sweep fixed point is the exact
    block optimum. Returns the last sweep's max z-change.
    """
    rho = state.rho
    coef = problem.dev_se / (rho * problem.dev_kappa)
    if c_targets is None:
        c = [state.y[i][:, problem.own_masks[i]] + state.alpha[i] / rho
             for i in range(problem.n)]
    else:
        c = c_targets
    delta = 0.0
    for _ in range(max(1, passes)):
        m = []
        for i in range(problem.n):
            u = problem.edge_rows[i].size
            diff = (c[i] - state.z[i].sum(axis=0)) / u
            m.append((state.z[i] + diff[None, :, :]).ravel())
        m_flat = np.concatenate(m) if m else np.zeros(0)
        m_dev = m_flat[problem.dev_take]
        g = solve_device_multipliers(problem.lam, problem.dev_se,
                                     problem.dev_bounds, problem.dev_of_slot,
                                     m_dev, coef, state.g)
        z_dev = np.maximum(m_dev + g[problem.dev_of_slot] * coef, 0.0)
        z_flat = np.empty_like(m_flat)
        z_flat[problem.dev_take] = z_dev
        new_z = problem.z_unflat(z_flat)
        delta = max(float(np.max(np.abs(new_z[i] - state.z[i]))) if new_z[i].size else 0.0
                    for i in range(problem.n))
        state.z = new_z
        state.g = g
        if delta <= pass_tol:
            break
    return delta


# ---------------------------------------------------------------------------
# Steps 2b/2c: consensus and segment widths
# ---------------------------------------------------------------------------

def v_update(problem: LocalProblem, state: AdmmState):
    """Closed-form symmetric consensus update; returns per-pair own-sums."""
    own_sums = []
    for p_idx, pm in enumerate(problem.pairs):
        oi = problem.pair_sum(pm, pm.i, state.y[pm.i])
        om = problem.pair_sum(pm, pm.m, state.y[pm.m])
        state.v[p_idx] = 0.5 * (oi + om)
        own_sums.append((oi, om))
    return own_sums


def h_update(problem: LocalProblem, state: AdmmState) -> np.ndarray:
    """Simplex projection of the mean per-segment cluster totals."""
    acc = np.zeros(problem.segments)
    for i in range(problem.n):
        acc += state.y[i].sum(axis=1) + state.gamma[i] / state.rho_row
    state.h = project_simplex(acc / problem.n, 1.0)
    return state.h


def dual_update(problem: LocalProblem, state: AdmmState, own_sums) -> dict:
    """Gradient ascent on the multipliers; returns squared primal residuals."""
    link_sq = 0.0
    link_n = 0
    for i in range(problem.n):
        r = state.y[i][:, problem.own_masks[i]] - state.z[i].sum(axis=0)
        state.alpha[i] += state.rho * r
        link_sq += float(np.sum(r * r))
        link_n += r.size
    pair_sq = 0.0
    pair_n = 0
    for p_idx, pm in enumerate(problem.pairs):
        oi, om = own_sums[p_idx]
        r_fwd = state.v[p_idx] - oi      # = -(v - om) since v is the midpoint
        state.beta[p_idx] += state.rho_pair * r_fwd
        pair_sq += 2.0 * float(np.sum(r_fwd * r_fwd))
        pair_n += 2 * r_fwd.size
    width_sq = 0.0
    width_n = 0
    for i in range(problem.n):
        r = state.y[i].sum(axis=1) - state.h
        state.gamma[i] += state.rho_row * r
        width_sq += float(np.sum(r * r))
        width_n += r.size
    return {"link_sq": link_sq, "pair_sq": pair_sq, "width_sq": width_sq,
            "count": max(1, link_n + pair_n + width_n)}


# ---------------------------------------------------------------------------
# Final feasibility projection
# ---------------------------------------------------------------------------

def _consistency_system(problem: LocalProblem):
    """Sparse matrix of the segment-separable y-equalities (cached).

    Row blocks: one row per (pair, shared sub-pattern) encoding
    own-sum(i) - own-sum(m) = 0, then one row per cluster encoding
    sum_b y_i[b] = h. Columns: all clusters' patterns concatenated.
    """
    cached = getattr(problem, "_consistency", None)
    if cached is not None:
        return cached
    offsets = np.concatenate([[0], np.cumsum(problem.pattern_count)]).astype(np.int64)
    rows, cols, vals = [], [], []
    base = 0
    for pm in problem.pairs:
        for who, sign in ((pm.i, 1.0), (pm.m, -1.0)):
            order, group = pm.side(who)
            rows.append(base + np.repeat(np.arange(pm.slots), group))
            cols.append(offsets[who] + order[group:].astype(np.int64))
            vals.append(np.full(order.size - group, sign))
        base += pm.slots
    for i in range(problem.n):
        P = problem.pattern_count[i]
        rows.append(np.full(P, base))
        cols.append(offsets[i] + np.arange(P, dtype=np.int64))
        vals.append(np.ones(P))
        base += 1
    A = sp.csr_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))),
                      shape=(base, int(offsets[-1])))
    problem._consistency = (A, offsets)
    return problem._consistency


def _batched_cg(matvec, B, rel_tol=1e-12, max_iter=600):
    """CG on one SPD operator with one right-hand side per column.

    Columns that converge (or break down) freeze while the rest continue.
    """
    X = np.zeros_like(B)
    R = B.copy()
    P = R.copy()
    rs = np.einsum("rs,rs->s", R, R)
    bnorm = np.sqrt(np.einsum("rs,rs->s", B, B))
    tol_sq = (rel_tol * np.maximum(1e-30, bnorm)) ** 2
    live = rs > tol_sq
    for _ in range(max_iter):
        if not live.any():
            break
        AP = matvec(P)
        denom = np.einsum("rs,rs->s", P, AP)
        live = live & (denom > 1e-300)
        alpha = np.where(live, rs / np.maximum(denom, 1e-300), 0.0)
        X += alpha[None, :] * P
        R -= alpha[None, :] * AP
        rs_new = np.einsum("rs,rs->s", R, R)
        beta = np.where(live, rs_new / np.maximum(rs, 1e-300), 0.0)
        P = np.where(live[None, :], R + beta[None, :] * P, P)
        rs = rs_new
        live = live & (rs > tol_sq)
    return X


def project_feasible(problem: LocalProblem, y, h, target: float = 1e-9,
                     rounds: int = 400):
    """Return a copy of y satisfying the pair-consistency and width equalities
    to ``target`` in max-norm with y >= 0 exactly.

    Solves the best-approximation problem onto {A y = b} ∩ {y >= 0} by
    operator splitting: the affine side is an exact projection through the
    (cached) factorized normal system, the orthant side is a clip, and a
    scaled dual couples them. Plain alternating projections stall on rough
    iterates; this converges linearly to the projection itself.
    """
    A, offsets = _consistency_system(problem)
    solver = _normal_solver(problem, A)
    S = problem.segments
    Yhat = np.hstack(y)                    # (S, total patterns)
    B = np.zeros((A.shape[0], S))
    B[-problem.n:, :] = h[None, :]

    def affine_project(Y):
        R = A @ Y.T - B
        return Y - (A.T @ solver(R)).T

    rp = 1.0          # penalty weight of the consensus between the two sides
    V = np.maximum(Yhat, 0.0)
    D = np.zeros_like(V)
    best_Y = V
    best_viol = float(np.max(np.abs(A @ V.T - B))) if V.size else 0.0
    for it in range(rounds):
        U = affine_project((Yhat + rp * (V - D)) / (1.0 + rp))
        V = np.maximum(U + D, 0.0)
        D += U - V
        if it % 20 == 19:
            Rv = A @ V.T - B
            viol = float(np.max(np.abs(Rv))) if Rv.size else 0.0
            if viol < best_viol:
                best_Y, best_viol = V.copy(), viol
            if viol <= target:
                break
    return ([best_Y[:, offsets[i]:offsets[i + 1]].copy() for i in range(problem.n)],
            best_viol)


def _normal_solver(problem: LocalProblem, A):
    """Solver for (A A' + eps I) M = R, factorized once when affordable.

    The tiny Tikhonov term keeps the (redundant, rank-deficient) normal
    system well posed; the leftover bias washes out across projection rounds.
    """
    cached = getattr(problem, "_proj_solver", None)
    if cached is not None:
        return cached
    diag_scale = float((A.multiply(A)).sum() / A.shape[0])
    eps = 1e-12 * max(diag_scale, 1.0)
    solver = None
    if A.shape[0] <= 20_000:
        normal = (A @ A.T).tocsc()
        if normal.nnz <= 4_000_000:
            normal = normal + eps * sp.identity(A.shape[0], format="csc")
            lu = sp.linalg.splu(normal)
            solver = lu.solve
    if solver is None:
        def solver(R, _A=A, _eps=eps):
            return _batched_cg(lambda X: _A @ (_A.T @ X) + _eps * X, R,
                               rel_tol=1e-12, max_iter=500)
    problem._proj_solver = solver
    return solver


def _transport_into_z(problem: LocalProblem, y, z):
    """Rescale each AP's device split so link sums match y exactly."""
    out = []
    for i in range(problem.n):
        own = y[i][:, problem.own_masks[i]]
        zi = np.maximum(z[i], 0.0)
        u = problem.edge_rows[i].size
        sums = zi.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(sums > 0, own / np.where(sums > 0, sums, 1.0), 0.0)
        zi = zi * factor[None, :, :]
        # Links with zero current share split the target evenly.
        empty = (sums <= 0) & (own > 0)
        if np.any(empty):
            fill = np.where(empty, own / u, 0.0)
            zi += fill[None, :, :]
        out.append(zi)
    return out


# ---------------------------------------------------------------------------
# Main loop
# ---------------------------------------------------------------------------

def admm_solve(problem: LocalProblem, weights=None,
               config: AdmmConfig = AdmmConfig(),
               warm: Optional[AdmmState] = None,
               init_seed: Optional[int] = None) -> AdmmResult:
    """Run the consensus ADMM on one convex instance.

    ``weights`` (per-cluster arrays, or None) activate the per-segment
    weighted caps. Returns the feasibility-projected allocation, the state
    (reusable as a warm start), and the residual trace.
    """
    state = warm.copy() if warm is not None else init_state(problem, config, init_seed)
    log = MessageLog() if config.track_messages else None
    ar = config.over_relax
    n = problem.n
    trace = []
    history = []
    converged = False
    prev = None
    py_tol = 1e-6
    it = 0
    for it in range(1, config.max_iter + 1):
        rho = state.rho
        sz_prev = [state.z[i].sum(axis=0) for i in range(n)]
        v_prev = [v.copy() for v in state.v]
        h_prev = state.h.copy()

        y_update(problem, state, weights, tol=py_tol, max_iter=config.py_max_iter)

        # Relaxed constraint-side values feed the second block and the duals.
        own_new = [state.y[i][:, problem.own_masks[i]] for i in range(n)]
        own_hat = [ar * own_new[i] + (1.0 - ar) * sz_prev[i] for i in range(n)]
        gy_new = []
        gy_hat = []
        for p_idx, pm in enumerate(problem.pairs):
            oi = problem.pair_sum(pm, pm.i, state.y[pm.i])
            om = problem.pair_sum(pm, pm.m, state.y[pm.m])
            gy_new.append((oi, om))
            gy_hat.append((ar * oi + (1.0 - ar) * v_prev[p_idx],
                           ar * om + (1.0 - ar) * v_prev[p_idx]))
        rows_new = np.stack([state.y[i].sum(axis=1) for i in range(n)])
        rows_hat = ar * rows_new + (1.0 - ar) * h_prev[None, :]

        z_update(problem, state, passes=config.z_passes, pass_tol=config.z_pass_tol,
                 c_targets=[own_hat[i] + state.alpha[i] / rho for i in range(n)])
        for p_idx in range(len(problem.pairs)):
            state.v[p_idx] = 0.5 * (gy_hat[p_idx][0] + gy_hat[p_idx][1])
        state.h = project_simplex(
            (rows_hat + state.gamma / state.rho_row).mean(axis=0), 1.0)

        # Dual ascent on the relaxed residuals; report the true ones.
        primal_sq = 0.0
        count = 0
        for i in range(n):
            sz_new = state.z[i].sum(axis=0)
            state.alpha[i] += rho * (own_hat[i] - sz_new)
            r_true = own_new[i] - sz_new
            primal_sq += float(np.sum(r_true * r_true))
            count += r_true.size
        for p_idx, pm in enumerate(problem.pairs):
            state.beta[p_idx] += state.rho_pair * (state.v[p_idx] - gy_hat[p_idx][0])
            r_i = state.v[p_idx] - gy_new[p_idx][0]
            r_m = state.v[p_idx] - gy_new[p_idx][1]
            primal_sq += float(np.sum(r_i * r_i)) + float(np.sum(r_m * r_m))
            count += 2 * r_i.size
        state.gamma += state.rho_row * (rows_hat - state.h[None, :])
        r_row = rows_new - state.h[None, :]
        primal_sq += float(np.sum(r_row * r_row))
        count += r_row.size
        primal_rms = math.sqrt(primal_sq / max(1, count))

        snapshot = _dual_snapshot(problem, state)
        dual_rms = _dual_residual(problem, state, prev, snapshot)
        prev = snapshot
        state.iteration += 1
        obj = problem.utility_value(state.z)
        trace.append((it, primal_rms, dual_rms, obj))
        if log is not None:
            log.record(problem, config.z_passes)
        combined = primal_rms + (dual_rms if math.isfinite(dual_rms) else 0.0)
        history.append(combined)
        py_tol = max(config.py_tol_floor, config.py_tol_factor * combined)
        if it >= config.min_iter and primal_rms <= config.tol and dual_rms <= config.tol:
            converged = True
            break
        if (len(history) > config.divergence_window
                and combined > config.divergence_factor
                * min(history[-config.divergence_window:])
                and combined > 10 * config.tol):
            raise AdmmDivergenceError(
                f"residuals grew {config.divergence_factor}x over the last "
                f"{config.divergence_window} iterations (primal {primal_rms:.2e}, "
                f"dual {dual_rms:.2e}); consider a different penalty rho "
                f"(current {state.rho}) or enabling adapt_rho")
        if config.adapt_rho and it % 10 == 0:
            if primal_rms > 10.0 * dual_rms:
                state.rho *= 2.0
            elif dual_rms > 10.0 * primal_rms:
                state.rho /= 2.0
    allocation = finalize(problem, state, config)
    allocation.flags["converged"] = converged
    allocation.flags["iterations"] = it
    return AdmmResult(allocation=allocation, state=state, trace=trace,
                      converged=converged, iterations=it, message_log=log)


def _dual_snapshot(problem, state):
    return {
        "sz": [state.z[i].sum(axis=0).copy() for i in range(problem.n)],
        "v": [v.copy() for v in state.v],
        "h": state.h.copy(),
    }


def _dual_residual(problem, state, prev, cur) -> float:
    if prev is None:
        return math.inf
    sq = 0.0
    count = 0
    for a, b in zip(prev["sz"], cur["sz"]):
        sq += float(np.sum((a - b) ** 2))
        count += a.size
    for a, b in zip(prev["v"], cur["v"]):
        sq += 2.0 * float(np.sum((a - b) ** 2))
        count += 2 * a.size
    sq += problem.n * float(np.sum((prev["h"] - cur["h"]) ** 2))
    count += problem.n * cur["h"].size
    return state.rho * math.sqrt(sq / max(1, count))


def finalize(problem: LocalProblem, state: AdmmState,
             config: AdmmConfig = AdmmConfig()) -> SegmentedAllocation:
    """Project the current iterate onto the exact constraint polytope."""
    h = project_simplex(state.h, 1.0)
    y, viol = project_feasible(problem, state.y, h,
                               target=config.projection_target,
                               rounds=config.projection_rounds)
    z = _transport_into_z(problem, y, state.z)
    rates = problem.rates_bits(z)
    return SegmentedAllocation(problem=problem, y=y, z=z, h=h, rates=rates,
                               flags={"projection_violation": viol})
