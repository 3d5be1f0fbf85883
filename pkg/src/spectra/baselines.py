"""Comparison schemes: full-spectrum reuse with strongest-AP association,
optimal orthogonal allocation, and optimized association under full reuse.

All three are restrictions of the joint program, so their utilities bound it
from below; the harness asserts those dominance relations on every scenario.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .netmodel import Topology, Neighborhoods
from .scenario import TrafficProfile
from .localform import LocalProblem
from .convexcore import project_simplex, project_capped_nonneg, \
    projected_gradient_max, InfeasibleStart
from .sparse_local import solve_p3, P3Infeasible


@dataclass
class BaselineResult:
    scheme: str
    rates: np.ndarray              # bits/s per device
    utility: float
    delay: float
    association: list              # per device: tuple of serving AP ids
    feasible: bool
    max_load_scale: Optional[float] = None   # largest supportable traffic multiple
    flags: dict = field(default_factory=dict)


def _result(scheme, problem, rates_pkt, association, extra=None):
    lam, tau = problem.lam, problem.tau
    margins = rates_pkt - lam
    loaded = lam > 0
    feasible = bool(np.all(margins[loaded] > 0))
    if feasible:
        util = -float(np.sum(lam[loaded] / margins[loaded]))
        total = float(lam.sum())
        delay = -util / total if total > 0 else 0.0
    else:
        util, delay = -math.inf, math.inf
    return BaselineResult(scheme=scheme, rates=rates_pkt * tau, utility=util,
                          delay=delay, association=association,
                          feasible=feasible, flags=extra or {})


def _full_pattern_se(problem: LocalProblem):
    """Packets/s per unit bandwidth on every admissible link when all APs
    transmit (identical under true and pessimistic interference)."""
    se = {}
    for i in range(problem.n):
        full = problem.pattern_count[i] - 1
        red = int(np.searchsorted(problem.own_masks[i], full))
        for r, j in enumerate(problem.edge_rows[i]):
            se[(i, int(j))] = float(problem.se[i][r, red])
    return se


def _singleton_se(problem: LocalProblem):
    se = {}
    for i in range(problem.n):
        pos = problem.own_bitpos[i]
        red = int(np.searchsorted(problem.own_masks[i], 1 << pos))
        for r, j in enumerate(problem.edge_rows[i]):
            se[(i, int(j))] = float(problem.se[i][r, red])
    return se


def maxrsrp_association(topology: Topology, nbhd: Neighborhoods):
    """Device -> strongest admissible AP by received PSD, low index on ties."""
    rp = topology.received_psd()
    assoc = []
    for j in range(topology.device_count):
        aps = nbhd.device_nbhd[j]
        best = max(aps, key=lambda i: (rp[j, i], -i))
        assoc.append(int(best))
    return assoc


def maxrsrp_max_scale(problem: LocalProblem, assoc) -> float:
    """Largest traffic multiple the fixed association can carry."""
    se = _full_pattern_se(problem)
    worst = math.inf
    for i in range(problem.n):
        demand = sum(problem.lam[j] / se[(i, j)]
                     for j in range(problem.k) if assoc[j] == i and problem.lam[j] > 0)
        if demand > 0:
            worst = min(worst, 1.0 / demand)
    return worst


def orthogonal_max_scale(problem: LocalProblem) -> float:
    """Largest traffic multiple any orthogonal allocation can carry."""
    se = _singleton_se(problem)
    demand = 0.0
    for j in range(problem.k):
        if problem.lam[j] == 0:
            continue
        best = max(se[(i, j)] for i in problem.nbhd.device_nbhd[j])
        demand += problem.lam[j] / best
    return math.inf if demand == 0 else 1.0 / demand


def _concave_split(problem, device_ids, slopes, budget, tol=1e-10, max_iter=5000):
    """Maximize sum_j u_j(slope_j x_j) over the scaled simplex (one AP)."""
    lam = problem.lam[device_ids]
    loaded = lam > 0
    slopes = np.asarray(slopes)
    if not loaded.any():
        x = np.full(len(device_ids), budget / len(device_ids))
        return x, True
    need = np.where(loaded, lam / slopes, 0.0)
    slack = budget - float(need.sum())
    if slack <= 0:
        return None, False
    x0 = need + slack / len(device_ids)

    def value_grad(x):
        margins = slopes * x - lam
        if np.any(margins[loaded] <= 0):
            return -math.inf, None
        val = -float(np.sum(lam[loaded] / margins[loaded]))
        g = np.zeros_like(x)
        g[loaded] = slopes[loaded] * lam[loaded] / margins[loaded] ** 2
        return val, g

    res = projected_gradient_max(value_grad, lambda v: project_simplex(v, budget),
                                 x0, tol=tol, max_iter=max_iter, step0=1e-3)
    return res.x, True


def solve_maxrsrp_full_reuse(topology: Topology, nbhd: Neighborhoods,
                             traffic: TrafficProfile,
                             problem: Optional[LocalProblem] = None) -> BaselineResult:
    """Every AP transmits over the whole band; each device attaches to its
    strongest AP; each AP splits its band utility-optimally."""
    pr = problem or LocalProblem(topology, nbhd, traffic, segment_count=1)
    assoc = maxrsrp_association(topology, nbhd)
    se = _full_pattern_se(pr)
    rates = np.zeros(pr.k)
    feasible = True
    for i in range(pr.n):
        mine = [j for j in range(pr.k) if assoc[j] == i]
        if not mine:
            continue
        slopes = [se[(i, j)] for j in mine]
        x, ok = _concave_split(pr, np.asarray(mine), slopes, 1.0)
        if not ok:
            feasible = False
            # Saturated AP: spread bandwidth by load share to report rates.
            w = np.array([pr.lam[j] for j in mine])
            w = w / w.sum() if w.sum() > 0 else np.full(len(mine), 1.0 / len(mine))
            x = w
        for idx, j in enumerate(mine):
            rates[j] = se[(i, j)] * x[idx]
    out = _result("maxrsrp", pr, rates, [(a,) for a in assoc])
    out.max_load_scale = maxrsrp_max_scale(pr, assoc)
    if not feasible:
        out.feasible = False
        out.utility, out.delay = -math.inf, math.inf
    return out


def solve_optimal_orthogonal(topology: Topology, nbhd: Neighborhoods,
                             traffic: TrafficProfile,
                             problem: Optional[LocalProblem] = None,
                             tol: float = 1e-10, max_iter: int = 20000) -> BaselineResult:
    """Joint bandwidth and association when every AP owns its spectrum
    exclusively (singleton patterns only, idle spectrum allowed)."""
    pr = problem or LocalProblem(topology, nbhd, traffic, segment_count=1)
    se = _singleton_se(pr)
    links = sorted(se)
    l_ap = np.array([i for (i, j) in links])
    l_dev = np.array([j for (i, j) in links])
    l_se = np.array([se[key] for key in links])
    lam = pr.lam
    loaded = lam > 0
    max_scale = orthogonal_max_scale(pr)
    if max_scale <= 1.0:
        out = _result("orthogonal", pr, np.zeros(pr.k), [()] * pr.k)
        out.max_load_scale = max_scale
        return out
    # Start: cheapest-bandwidth service per device plus spread slack.
    x0 = np.zeros(len(links))
    for j in np.nonzero(loaded)[0]:
        cands = [idx for idx in range(len(links)) if l_dev[idx] == j]
        best = max(cands, key=lambda idx: l_se[idx])
        x0[best] = lam[j] / l_se[best]
    x0 += (1.0 - x0.sum()) / len(links)

    def value_grad(x):
        r = np.bincount(l_dev, weights=l_se * x, minlength=pr.k)
        margins = r - lam
        if np.any(margins[loaded] <= 0):
            return -math.inf, None
        val = -float(np.sum(lam[loaded] / margins[loaded]))
        gr = np.zeros(pr.k)
        gr[loaded] = lam[loaded] / margins[loaded] ** 2
        return val, l_se * gr[l_dev]

    res = projected_gradient_max(
        value_grad, lambda v: project_capped_nonneg(v, None, 1.0), x0,
        tol=tol, max_iter=max_iter, step0=1e-3)
    rates = np.bincount(l_dev, weights=l_se * res.x, minlength=pr.k)
    assoc = [tuple(sorted(int(l_ap[idx]) for idx in range(len(links))
                          if l_dev[idx] == j and res.x[idx] > 1e-9))
             for j in range(pr.k)]
    out = _result("orthogonal", pr, rates, assoc,
                  extra={"pg_iterations": res.iterations})
    out.max_load_scale = max_scale
    return out


def solve_optimized_association_full_reuse(topology: Topology, nbhd: Neighborhoods,
                                           traffic: TrafficProfile,
                                           problem: Optional[LocalProblem] = None) -> BaselineResult:
    """Joint link splits under the everyone-transmits pattern: exactly the
    pattern-refinement program with a single full segment."""
    pr = problem or LocalProblem(topology, nbhd, traffic, segment_count=1)
    full_mask = (1 << pr.n) - 1
    one_seg = pr if pr.segments == 1 else LocalProblem(
        topology, nbhd, traffic, segment_count=1, se_mode=pr.se_mode)
    try:
        plan = solve_p3(one_seg, [full_mask])
    except P3Infeasible:
        out = _result("assoc-full-reuse", one_seg, np.zeros(one_seg.k), [()] * one_seg.k)
        return out
    rates_pkt = plan.rates / one_seg.tau
    out = _result("assoc-full-reuse", one_seg, rates_pkt, plan.association(),
                  extra={"pg_iterations": plan.flags.get("pg_iterations")})
    return out
