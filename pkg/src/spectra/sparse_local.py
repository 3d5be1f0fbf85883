"""Scalable segmented formulation: the reweighted-l1 outer loop, dominating-
pattern extraction, and the small refinement program it hands off to.

The cardinality requirement (one active local pattern per cluster and
segment) is approached by repeatedly solving the convex capped program with
weights inversely proportional to the previous bandwidths, then hardened by
extraction and a final allocation polish over the extracted patterns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog

from .netmodel import Topology, Neighborhoods, members_from_mask
from .scenario import TrafficProfile
from .localform import LocalProblem, SegmentedAllocation, ACTIVE_EPS
from .admm import AdmmConfig, AdmmState, AdmmResult, admm_solve

WEIGHT_MAX = 1e9
WEIGHT_MIN = 1e-6

DEFAULT_OUTER_ITERATIONS = 8
DEFAULT_Y_CHANGE_TOL = 1e-4


@dataclass
class L1State:
    """Reweighting state of the outer loop."""

    weights: list            # per cluster, (S, P_i), all positive
    mu: float
    iteration: int
    max_iterations: int

    def __post_init__(self):
        if not (0.0 < self.mu < 1.0):
            raise ValueError("mu must lie in (0, 1)")
        for w in self.weights:
            if np.any(w <= 0):
                raise ValueError("weights must be positive")


def initial_weights(problem: LocalProblem, seed: int, mu: float = 0.1,
                    max_iterations: int = 8) -> L1State:
    """Random weights in (0, 1): the asymmetry that breaks segment symmetry."""
    rng = np.random.default_rng(seed)
    weights = [1.0 - rng.random((problem.segments, p)) for p in problem.pattern_count]
    return L1State(weights=weights, mu=mu, iteration=0,
                   max_iterations=max_iterations)


def reweight(state: L1State, seg: SegmentedAllocation) -> L1State:
    """New weights 1 / (y + mu*h), clamped to [WEIGHT_MIN, WEIGHT_MAX].

    The clamp covers collapsed segments (y = h = 0), where the bare formula
    divides by zero. When the previous iterate is spread over many patterns,
    the bare weights can make the next capped program infeasible (even the
    cheapest pattern would overrun its cap); each (cluster, segment) weight
    row is then rescaled so that concentrating the full width on the
    cheapest pattern costs exactly 1/(1+mu) of the cap, which is the cost
    the formula itself assigns at its concentrated fixed point.
    """
    mu = state.mu
    new = []
    for i in range(seg.problem.n):
        denom = seg.y[i] + mu * seg.h[:, None]
        with np.errstate(divide="ignore"):
            w = np.where(denom > 0, 1.0 / np.maximum(denom, 1e-300), WEIGHT_MAX)
        w = np.clip(w, WEIGHT_MIN, WEIGHT_MAX)
        floor_cost = (1.0 + mu) * seg.h * w.min(axis=1)   # per segment
        factor = np.maximum(floor_cost, 1.0)
        w = w / factor[:, None]
        new.append(np.clip(w, WEIGHT_MIN, WEIGHT_MAX))
    return L1State(weights=new, mu=mu, iteration=state.iteration + 1,
                   max_iterations=state.max_iterations)


def solve_p2(problem: LocalProblem, weights, config: Optional[AdmmConfig] = None,
             warm: Optional[AdmmState] = None,
             init_seed: Optional[int] = None) -> AdmmResult:
    """One capped convex solve (the inner step of the outer loop)."""
    cfg = config or AdmmConfig(rho=8.0, over_relax=1.7, tol=1e-6, max_iter=1500)
    return admm_solve(problem, weights=weights, config=cfg, warm=warm,
                      init_seed=init_seed)


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

@dataclass
class ExtractedPlan:
    """Hardened per-segment plan: one global pattern per segment."""

    problem: LocalProblem
    segment_patterns: list        # global bitmask per segment
    local_patterns: list          # per cluster: list of local masks per segment
    h: np.ndarray                 # segment widths after refinement
    x: list                       # per cluster: (|U_i|, S) link bandwidth
    rates: np.ndarray             # bits/s per device
    utility: float
    feasible: bool
    flags: dict = field(default_factory=dict)

    def active_pattern_count(self, eps: float = ACTIVE_EPS) -> int:
        return len({m for m, hv in zip(self.segment_patterns, self.h) if hv > eps})

    def association(self, eps: float = ACTIVE_EPS) -> list:
        """Serving APs per device: those carrying bandwidth on some segment."""
        pr = self.problem
        serving = [set() for _ in range(pr.k)]
        for i in range(pr.n):
            for r, j in enumerate(pr.edge_rows[i]):
                if float(np.sum(self.x[i][r])) > eps:
                    serving[int(j)].add(i)
        return [tuple(sorted(s)) for s in serving]

    def to_dict(self) -> dict:
        pr = self.problem
        return {
            "segments": [
                {"index": l, "width": float(self.h[l]),
                 "pattern": sorted(members_from_mask(self.segment_patterns[l]))}
                for l in range(pr.segments)],
            "links": [
                {"ap": i, "device": int(j),
                 "bandwidth": [float(b) for b in self.x[i][r]]}
                for i in range(pr.n) for r, j in enumerate(pr.edge_rows[i])],
            "rates_bits_per_s": [float(r) for r in self.rates],
            "utility": self.utility if math.isfinite(self.utility) else None,
            "feasible": self.feasible,
        }


def extract_patterns(seg: SegmentedAllocation, eps: float = ACTIVE_EPS):
    """Dominating local pattern per (cluster, segment) and their union.

    Ties break toward the smallest bitmask; segments with no bandwidth map to
    the empty pattern.
    """
    pr = seg.problem
    local = []
    for i in range(pr.n):
        # argmax returns the first (= smallest mask) maximizer.
        local.append([int(np.argmax(seg.y[i][l])) for l in range(pr.segments)])
    unions = []
    for l in range(pr.segments):
        mask = 0
        if seg.h[l] > eps:
            for i in range(pr.n):
                lm = local[i][l]
                for pos, ap in enumerate(pr.clusters[i]):
                    if lm >> pos & 1:
                        mask |= 1 << ap
        unions.append(mask)
    return local, unions


# ---------------------------------------------------------------------------
# Refinement over fixed per-segment patterns
# ---------------------------------------------------------------------------

class P3Infeasible(RuntimeError):
    """No allocation over the extracted patterns can carry the traffic."""


def _p3_structure(problem: LocalProblem, segment_patterns):
    """Per-segment transmitting APs and per-link efficiencies (packets/s)."""
    pr = problem
    se = []        # per cluster: (|U_i|, S) efficiency under the segment pattern
    on = []        # per cluster: bool (S,), transmitting in segment l
    for i in range(pr.n):
        tab = np.zeros((pr.edge_rows[i].size, pr.segments))
        act = np.zeros(pr.segments, dtype=bool)
        for l, mask in enumerate(segment_patterns):
            if not (mask >> i & 1):
                continue
            act[l] = True
            local_mask = 0
            for pos, ap in enumerate(pr.clusters[i]):
                if mask >> ap & 1:
                    local_mask |= 1 << pos
            red = int(np.searchsorted(pr.own_masks[i], local_mask))
            for r, j in enumerate(pr.edge_rows[i]):
                # Zero value when the pattern misses the device neighborhood.
                if mask & _aj_mask(pr, int(j)):
                    tab[r, l] = pr.se[i][r, red]
        se.append(tab)
        on.append(act)
    return se, on


def _aj_mask(problem: LocalProblem, j: int) -> int:
    mask = 0
    for i in problem.nbhd.device_nbhd[j]:
        mask |= 1 << i
    return mask


def _p3_feasible_start(problem, se, on):
    """Phase 1: max-margin LP via linprog; None when P3 is infeasible."""
    pr = problem
    cols = []      # (i, r, l) for active slots
    for i in range(pr.n):
        for r in range(pr.edge_rows[i].size):
            for l in range(pr.segments):
                if on[i][l]:
                    cols.append((i, r, l))
    ncols = len(cols)
    S = pr.segments
    nvar = ncols + S + 1           # x, h, t
    c = np.zeros(nvar)
    c[-1] = -1.0                   # maximize t
    A_eq = []
    b_eq = []
    for i in range(pr.n):
        for l in range(pr.segments):
            if not on[i][l]:
                continue
            row = np.zeros(nvar)
            for idx, (ii, r, ll) in enumerate(cols):
                if ii == i and ll == l:
                    row[idx] = 1.0
            row[ncols + l] = -1.0
            A_eq.append(row)
            b_eq.append(0.0)
    row = np.zeros(nvar)
    row[ncols:ncols + S] = 1.0
    A_eq.append(row)
    b_eq.append(1.0)
    A_ub = []
    b_ub = []
    for j in range(pr.k):
        lam = pr.lam[j]
        if lam == 0:
            continue
        row = np.zeros(nvar)
        for idx, (i, r, l) in enumerate(cols):
            if int(pr.edge_rows[i][r]) == j:
                row[idx] = -se[i][r, l]
        row[-1] = 1.0
        A_ub.append(row)
        b_ub.append(-lam)
    res = linprog(c, A_ub=np.array(A_ub) if A_ub else None,
                  b_ub=np.array(b_ub) if A_ub else None,
                  A_eq=np.array(A_eq), b_eq=np.array(b_eq),
                  bounds=[(0, None)] * ncols + [(0, None)] * S + [(None, None)],
                  method="highs")
    if not res.success or res.x[-1] <= 0:
        return None, cols
    return res.x, cols


def _project_simplex_weighted(m, w):
    """Minimize sum w_l (h_l - m_l)^2 over the unit simplex (w > 0).

    KKT form h_l = max(m_l - theta / w_l, 0) with the total pinned at one;
    theta found by bisection on the monotone total.
    """
    m = np.asarray(m, dtype=float)
    w = np.asarray(w, dtype=float)

    def total(theta):
        return float(np.sum(np.maximum(m - theta / w, 0.0)))

    t_lo = float(np.min((m - 1.0) * w))
    t_hi = float(np.max(m * w))
    while total(t_lo) < 1.0:
        t_lo -= max(1.0, abs(t_lo))
    while total(t_hi) > 1.0:
        t_hi += max(1.0, abs(t_hi))
    for _ in range(100):
        mid = 0.5 * (t_lo + t_hi)
        if total(mid) > 1.0:
            t_lo = mid
        else:
            t_hi = mid
    h = np.maximum(m - 0.5 * (t_lo + t_hi) / w, 0.0)
    s = h.sum()
    return h / s if s > 0 else np.full(m.size, 1.0 / m.size)


def solve_p3(problem: LocalProblem, segment_patterns, rho: float = 4.0,
             tol: float = 1e-10, max_iter: int = 4000) -> ExtractedPlan:
    """Optimize segment widths and link splits for fixed per-segment patterns.

    Every AP in a segment's pattern spends exactly the segment width across
    its admissible devices. Solved by a small consensus ADMM: device-side
    exact prox updates of the delay utility against the per-(AP, segment)
    width targets, and a weighted simplex projection for the widths. The
    result is projected onto the exact constraints before rates are reported.
    """
    pr = problem
    se, on = _p3_structure(pr, segment_patterns)
    start, cols = _p3_feasible_start(pr, se, on)
    loaded = pr.lam > 0
    if start is None and loaded.any():
        raise P3Infeasible("no allocation over the extracted patterns "
                           "carries the offered traffic")
    S = pr.segments
    ncols = len(cols)
    col_dev = np.array([int(pr.edge_rows[i][r]) for (i, r, l) in cols], dtype=int)
    col_se = np.array([se[i][r, l] for (i, r, l) in cols])
    col_seg = np.array([l for (i, r, l) in cols], dtype=int)
    group_ids = {}
    col_group = np.empty(ncols, dtype=int)
    for idx, (i, r, l) in enumerate(cols):
        col_group[idx] = group_ids.setdefault((i, l), len(group_ids))
    ngroups = len(group_ids)
    group_seg = np.empty(ngroups, dtype=int)
    group_size = np.zeros(ngroups)
    for (i, l), gid in group_ids.items():
        group_seg[gid] = l
    for idx in range(ncols):
        group_size[col_group[idx]] += 1
    seg_groups = np.bincount(group_seg, minlength=S).astype(float)

    # Device-major ordering for the batched scalar solves.
    order = np.argsort(col_dev, kind="stable")
    inv_order = np.empty_like(order)
    inv_order[order] = np.arange(ncols)
    d_se = col_se[order]
    d_group = col_group[order]
    d_sizes = np.bincount(col_dev, minlength=pr.k)
    d_bounds = np.concatenate([[0], np.cumsum(d_sizes)[:-1]]).astype(np.int64)
    d_of = np.repeat(np.arange(pr.k), d_sizes)
    kappa = group_size[d_group]
    coef = d_se / (rho * kappa)

    if start is not None:
        x = start[:ncols][order].copy()
        h = start[ncols:ncols + S].copy()
    else:
        h = np.full(S, 1.0 / S)
        x = (h[group_seg] / np.maximum(group_size, 1.0))[d_group]
    dual = np.zeros(ngroups)
    g_warm = np.zeros(pr.k)
    from .admm import solve_device_multipliers
    it = 0
    for it in range(1, max_iter + 1):
        # device block: damped parallel prox sweeps against width targets
        for _ in range(2):
            sums = np.bincount(d_group, weights=x, minlength=ngroups)
            c = h[group_seg] - dual / rho
            m = x + ((c - sums) / np.maximum(group_size, 1.0))[d_group]
            g_warm = solve_device_multipliers(pr.lam, d_se, d_bounds, d_of,
                                              m, coef, g_warm)
            x = np.maximum(m + g_warm[d_of] * coef, 0.0)
        sums = np.bincount(d_group, weights=x, minlength=ngroups)
        # width block: weighted simplex projection of the group means
        target = np.bincount(group_seg, weights=sums + dual / rho, minlength=S)
        w_l = np.maximum(seg_groups, 1e-12)
        h = _project_simplex_weighted(target / w_l, w_l)
        resid = sums - h[group_seg]
        dual += rho * resid
        if it % 10 == 0:
            rms = math.sqrt(float(resid @ resid) / max(1, ngroups))
            if rms <= tol:
                break
    # Exact feasibility: widths on the simplex, groups rescaled to match.
    sums = np.bincount(d_group, weights=x, minlength=ngroups)
    factor = np.where(sums > 0, h[group_seg] / np.where(sums > 0, sums, 1.0), 0.0)
    x = x * factor[d_group]
    short = (sums <= 0) & (h[group_seg] > 0)
    if short.any():
        add = np.where(short, h[group_seg] / np.maximum(group_size, 1.0), 0.0)
        x = x + add[d_group]
    x_cols = x[inv_order]
    x_out = [np.zeros((pr.edge_rows[i].size, S)) for i in range(pr.n)]
    for idx, (i, r, l) in enumerate(cols):
        x_out[i][r, l] = x_cols[idx]
    rates_pkt = np.bincount(col_dev, weights=col_se * x_cols, minlength=pr.k)
    margins = rates_pkt - pr.lam
    feasible = bool(np.all(margins[loaded] > 0))
    util = -float(np.sum(pr.lam[loaded] / margins[loaded])) if feasible else -math.inf
    return ExtractedPlan(problem=pr,
                         segment_patterns=list(segment_patterns),
                         local_patterns=[],
                         h=h.copy(), x=x_out,
                         rates=rates_pkt * pr.tau,
                         utility=util, feasible=feasible,
                         flags={"admm_iterations": it})


# ---------------------------------------------------------------------------
# The outer loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Algorithm1Config:
    mu: float = 0.1
    max_iterations: int = DEFAULT_OUTER_ITERATIONS
    seed: int = 0
    segment_count: Optional[int] = None     # None: one segment per device + 1
    y_change_tol: float = DEFAULT_Y_CHANGE_TOL
    se_mode: str = "pessimistic"
    postprocess_each_iteration: bool = True
    admm: AdmmConfig = AdmmConfig(rho=8.0, over_relax=1.7, adapt_rho=False,
                                  tol=1e-6, max_iter=700, z_passes=2)


@dataclass
class IterationRecord:
    iteration: int
    p2_utility: float
    utility: float              # post-processed; -inf when infeasible
    delay: float                # arrival-weighted mean sojourn; inf infeasible
    feasible: bool
    y_change: float
    admm_iterations: int
    active_patterns: int


@dataclass
class Algorithm1Result:
    plan: Optional[ExtractedPlan]
    trace: list
    allocation: SegmentedAllocation
    problem: LocalProblem
    weights: L1State
    flags: dict = field(default_factory=dict)

    @property
    def utility(self) -> float:
        return self.plan.utility if self.plan is not None else -math.inf

    def delay(self) -> float:
        if self.plan is None or not self.plan.feasible:
            return math.inf
        lam = self.problem.lam
        total = float(lam.sum())
        return -self.plan.utility / total if total > 0 else 0.0


def build_problem(topology: Topology, nbhd: Neighborhoods, traffic: TrafficProfile,
                  segment_count: Optional[int] = None,
                  se_mode: str = "pessimistic") -> LocalProblem:
    S = segment_count if segment_count is not None else traffic.arrival_rates.size + 1
    return LocalProblem(topology, nbhd, traffic, segment_count=S, se_mode=se_mode)


def run_algorithm1(topology: Topology, nbhd: Neighborhoods, traffic: TrafficProfile,
                   config: Algorithm1Config = Algorithm1Config(),
                   problem: Optional[LocalProblem] = None) -> Algorithm1Result:
    """Iterative reweighted-l1 search for a one-pattern-per-segment plan.

    Repeats capped convex solves with weights 1/(y + mu*h) until the local
    bandwidths stop moving or the iteration budget runs out, post-processing
    every iterate (extraction + refinement) so the trace carries an honest
    delay for each round. A post-processing failure on an intermediate
    iterate is recorded, not fatal; on the final iterate it is reported via
    ``plan=None`` and flags.
    """
    pr = problem if problem is not None else build_problem(
        topology, nbhd, traffic, config.segment_count, config.se_mode)
    wstate = initial_weights(pr, config.seed, config.mu, config.max_iterations)
    warm = None
    prev_y = None
    trace = []
    seg = None
    plan = None
    total_lam = float(pr.lam.sum())
    for t in range(1, config.max_iterations + 1):
        res = solve_p2(pr, wstate.weights, config=config.admm, warm=warm,
                       init_seed=config.seed if t == 1 else None)
        seg = res.allocation
        warm = res.state
        p2_util = seg.utility()
        plan_t = None
        if config.postprocess_each_iteration or t == config.max_iterations:
            _, unions = extract_patterns(seg)
            try:
                plan_t = solve_p3(pr, unions)
            except P3Infeasible:
                plan_t = None
        if plan_t is not None and plan_t.feasible:
            util = plan_t.utility
            delay = -util / total_lam if total_lam > 0 else 0.0
            feasible = True
            plan = plan_t
        else:
            util, delay, feasible = -math.inf, math.inf, False
        y_change = math.inf
        if prev_y is not None:
            y_change = max(float(np.max(np.abs(seg.y[i] - prev_y[i])))
                           for i in range(pr.n))
        prev_y = [a.copy() for a in seg.y]
        trace.append(IterationRecord(
            iteration=t, p2_utility=p2_util, utility=util, delay=delay,
            feasible=feasible, y_change=y_change,
            admm_iterations=res.iterations,
            active_patterns=plan_t.active_pattern_count() if plan_t else 0))
        if y_change < config.y_change_tol:
            break
        wstate = reweight(wstate, seg)

    # The returned plan is the final iterate's; its failure is reported, and
    # the last feasible intermediate plan (if any) rides along in the flags.
    if config.postprocess_each_iteration:
        final_plan = plan_t
    else:
        _, unions = extract_patterns(seg)
        try:
            final_plan = solve_p3(pr, unions)
        except P3Infeasible:
            final_plan = None
    flags = {}
    if final_plan is None or not final_plan.feasible:
        flags["final_postprocess_infeasible"] = True
        flags["last_feasible_iteration"] = next(
            (r.iteration for r in reversed(trace) if r.feasible), None)
        if plan is not None:
            flags["fallback_plan_utility"] = plan.utility
    return Algorithm1Result(plan=final_plan, trace=trace, allocation=seg,
                            problem=pr, weights=wstate, flags=flags)
