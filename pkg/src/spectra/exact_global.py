"""Exact global-pattern formulation at enumeration scale.

The global program optimizes bandwidth over all 2^n AP subsets jointly with
the per-link splits. It is solved by the same consensus engine as the
segmented formulation, instantiated degenerately: every cluster is the full
AP set, one segment, no weighted caps. At enumeration scale this is exact up
to solver tolerance and provides the reference against which the scalable
path is validated, together with the solution-transport constructions that
move allocations between the two forms without changing any device's rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .netmodel import Topology, Neighborhoods, EnumerationCapError, members_from_mask
from .scenario import TrafficProfile
from .localform import LocalProblem, SegmentedAllocation, ACTIVE_EPS
from .admm import AdmmConfig, admm_solve

DEFAULT_ENUM_BUDGET = 12
HARD_ENUM_CAP = 20


class GlobalScaleError(EnumerationCapError):
    """The exact global solver was asked for more APs than its budget."""


@dataclass
class GlobalAllocation:
    """Bandwidth per global pattern plus per-link splits.

    ``masks`` may contain duplicates (tests exercise recombination); solver
    outputs are duplicate-free. ``x[p]`` maps (ap, device) -> bandwidth for
    pattern ``masks[p]``.
    """

    masks: list                # global pattern bitmasks
    y: np.ndarray              # bandwidth fraction per listed pattern
    x: list                    # per pattern: dict (i, j) -> fraction
    rates: np.ndarray          # bits/s per device
    utility: float
    feasible: bool = True
    flags: dict = field(default_factory=dict)

    def active_patterns(self, eps: float = ACTIVE_EPS):
        return [(m, float(v)) for m, v in zip(self.masks, self.y) if v > eps]

    def normalized(self) -> "GlobalAllocation":
        """Merge duplicate pattern entries (summing bandwidth and splits)."""
        order = {}
        for p, m in enumerate(self.masks):
            order.setdefault(m, []).append(p)
        masks, ys, xs = [], [], []
        for m, idxs in order.items():
            masks.append(m)
            ys.append(float(sum(self.y[p] for p in idxs)))
            merged = {}
            for p in idxs:
                for key, val in self.x[p].items():
                    merged[key] = merged.get(key, 0.0) + val
            xs.append(merged)
        return GlobalAllocation(masks=masks, y=np.asarray(ys), x=xs,
                                rates=self.rates.copy(), utility=self.utility,
                                feasible=self.feasible, flags=dict(self.flags))


def build_global_problem(topology: Topology, nbhd: Neighborhoods,
                         traffic: TrafficProfile, se_mode: str = "global",
                         enum_budget: int = DEFAULT_ENUM_BUDGET) -> LocalProblem:
    n = topology.ap_count
    if n > min(enum_budget, HARD_ENUM_CAP):
        raise GlobalScaleError(
            f"exact global solve over 2^{n} patterns exceeds the enumeration "
            f"budget of {min(enum_budget, HARD_ENUM_CAP)} APs; use the "
            "segmented local formulation instead")
    clusters = tuple(tuple(range(n)) for _ in range(n))
    return LocalProblem(topology, nbhd, traffic, segment_count=1,
                        se_mode=se_mode, clusters=clusters)


def _extract_global(problem: LocalProblem, alloc: SegmentedAllocation) -> GlobalAllocation:
    """Read the consensus y and the per-link splits off the degenerate form."""
    n = problem.n
    P = problem.pattern_count[0]
    y_cons = np.mean([alloc.y[i][0] for i in range(n)], axis=0)
    masks, ys, xs = [], [], []
    for mask in range(P):
        if mask == 0:
            band = float(max(0.0, 1.0 - y_cons[1:].sum()))
        else:
            band = float(y_cons[mask])
        if mask != 0 and band <= 0.0:
            continue
        entry = {}
        for i in members_from_mask(mask):
            red = int(np.searchsorted(problem.own_masks[i], mask))
            for r, j in enumerate(problem.edge_rows[i]):
                entry[(i, int(j))] = float(alloc.z[i][r, 0, red])
        masks.append(mask)
        ys.append(band)
        xs.append(entry)
    rates = alloc.rates.copy()
    lam, tau = problem.lam, problem.tau
    margins = rates / tau - lam
    feasible = bool(np.all(margins[lam > 0] > 0))
    util = -float(np.sum(lam[lam > 0] / margins[lam > 0])) if feasible else -math.inf
    return GlobalAllocation(masks=masks, y=np.asarray(ys), x=xs, rates=rates,
                            utility=util, feasible=feasible)


def solve_p0(topology: Topology, nbhd: Neighborhoods, traffic: TrafficProfile,
             se_mode: str = "global", enum_budget: int = DEFAULT_ENUM_BUDGET,
             config: Optional[AdmmConfig] = None):
    """Exact solve of the global-pattern program (enumeration scale).

    ``se_mode`` picks true pattern-dependent interference ("global") or the
    pessimistic local approximation ("local" / "pessimistic"); the latter is
    the form the segmented formulation is equivalent to.
    """
    if se_mode in ("local", "local-pessimistic"):
        se_mode = "pessimistic"
    problem = build_global_problem(topology, nbhd, traffic, se_mode=se_mode,
                                   enum_budget=enum_budget)
    cfg = config or AdmmConfig(rho=1.0, over_relax=1.7, adapt_rho=True,
                               tol=3e-7, max_iter=4000)
    result = admm_solve(problem, weights=None, config=cfg)
    out = _extract_global(problem, result.allocation)
    out.flags["iterations"] = result.iterations
    out.flags["converged"] = result.converged
    out.flags["residuals"] = result.allocation.residuals()
    if not out.feasible:
        out.flags["infeasible_devices"] = [
            int(j) for j in np.nonzero(
                (traffic.arrival_rates > 0)
                & (out.rates / traffic.mean_packet_bits <= traffic.arrival_rates))[0]]
    return out, problem


# ---------------------------------------------------------------------------
# Sparsity (Caratheodory walk on the rate-equality face)
# ---------------------------------------------------------------------------

def _pattern_rate_contributions(problem: LocalProblem, alloc: GlobalAllocation) -> np.ndarray:
    """c[j, p] = rate (bits/s) pattern p delivers to device j."""
    k = problem.k
    c = np.zeros((k, len(alloc.masks)))
    for p, (mask, x) in enumerate(zip(alloc.masks, alloc.x)):
        for (i, j), val in x.items():
            if val == 0.0:
                continue
            red = int(np.searchsorted(problem.own_masks[i], mask))
            r = int(np.searchsorted(problem.edge_rows[i], j))
            c[j, p] += problem.se[i][r, red] * problem.tau * val
    return c


def sparsify_solution(alloc: GlobalAllocation, problem: LocalProblem,
                      eps: float = ACTIVE_EPS) -> GlobalAllocation:
    """Reduce the active-pattern support to at most k+1 without moving any
    device's rate (hence without changing the utility).

    Holding rates fixed, scaling each active pattern's whole block (its y and
    every link split) by a common multiplier keeps all structural
    constraints; rates and total bandwidth stay put when the multiplier
    direction lies in the null space of a (k+1) x p matrix, which exists
    while p > k+1 active patterns remain. Each step drives one pattern's
    multiplier to zero. On numerical rank trouble the input is returned
    unchanged with a flag.
    """
    alloc = alloc.normalized()
    k = problem.k
    contrib = _pattern_rate_contributions(problem, alloc)   # (k, p)
    y = alloc.y.astype(float).copy()
    scale = np.ones(y.size)
    live = scale * y > 0.0
    for _ in range(y.size):
        idx = np.nonzero(live)[0]
        if idx.size <= k + 1:
            break
        # Direction in multiplier space that moves neither rates nor the
        # bandwidth total: null vector of the (k+1) x live matrix.
        M = np.vstack([contrib[:, idx], y[idx][None, :]])
        _, _, vt = np.linalg.svd(M, full_matrices=True)
        d = vt[-1]
        if float(np.max(np.abs(M @ d))) > 1e-7 * max(1.0, float(np.abs(M).max())):
            return _scaled(alloc, scale, flag="pivot-failure")
        if not (d < -1e-13).any():
            d = -d
        neg = d < -1e-13
        if not neg.any():
            return _scaled(alloc, scale, flag="pivot-failure")
        # Move until the first multiplier hits zero.
        steps = -scale[idx][neg] / d[neg]
        t = float(np.min(steps))
        scale[idx] = np.maximum(scale[idx] + t * d, 0.0)
        kill = idx[neg][np.argmin(steps)]
        scale[kill] = 0.0
        live = scale * y > 0.0
    return _scaled(alloc, scale, flag=None)


def _scaled(alloc: GlobalAllocation, scale, flag) -> GlobalAllocation:
    masks, ys, xs = [], [], []
    for p, m in enumerate(alloc.masks):
        s = float(scale[p])
        if m != 0 and s * alloc.y[p] <= 0.0:
            continue
        masks.append(m)
        ys.append(s * float(alloc.y[p]))
        xs.append({key: s * val for key, val in alloc.x[p].items()})
    out = GlobalAllocation(masks=masks, y=np.asarray(ys), x=xs,
                           rates=alloc.rates.copy(), utility=alloc.utility,
                           feasible=alloc.feasible, flags=dict(alloc.flags))
    if flag:
        out.flags["sparsify"] = flag
    return out


# ---------------------------------------------------------------------------
# Solution transport between the global and segmented forms
# ---------------------------------------------------------------------------

class TransportError(RuntimeError):
    """The constructed solution violated its target formulation (a bug)."""


def transport_p0_to_p1(alloc: GlobalAllocation, problem: LocalProblem) -> SegmentedAllocation:
    """Lay a sparse global allocation onto the segmented local form.

    The q'th active pattern occupies segment q with its full bandwidth; every
    cluster sees that pattern through its own membership, so each (cluster,
    segment) carries exactly one local pattern and every device keeps its
    rate. Requires at most as many active patterns as segments and a problem
    built with the pessimistic local efficiencies (the regime in which the
    two formulations agree).
    """
    alloc = alloc.normalized()
    active = [(m, v, alloc.x[p]) for p, (m, v) in enumerate(zip(alloc.masks, alloc.y))
              if v > ACTIVE_EPS]
    S = problem.segments
    if len(active) > S:
        raise TransportError(
            f"{len(active)} active patterns do not fit in {S} segments; "
            "sparsify the allocation first")
    y = problem.zeros_like_y()
    z = problem.zeros_like_z()
    h = np.zeros(S)
    for l, (mask, band, x) in enumerate(active):
        h[l] = band
        for i in range(problem.n):
            local_mask = 0
            for pos, ap in enumerate(problem.clusters[i]):
                if mask >> ap & 1:
                    local_mask |= 1 << pos
            y[i][l, local_mask] = band
            if mask >> i & 1:
                red = int(np.searchsorted(problem.own_masks[i], local_mask))
                for r, j in enumerate(problem.edge_rows[i]):
                    z[i][r, l, red] = x.get((i, int(j)), 0.0)
    # Leftover bandwidth idles in the last unused segment as the empty pattern.
    slack = 1.0 - h.sum()
    if slack > 0 and len(active) < S:
        h[len(active)] = slack
        for i in range(problem.n):
            y[i][len(active), 0] = slack
    out = SegmentedAllocation(problem=problem, y=y, z=z, h=h,
                              rates=problem.rates_bits(z))
    res = out.residuals()
    if max(res["link"], res["pair"], res["rowsum"], res["simplex"]) > 1e-8:
        raise TransportError(f"constructed segmented solution infeasible: {res}")
    return out


def transport_p1_to_p0(seg: SegmentedAllocation, eps: float = ACTIVE_EPS) -> GlobalAllocation:
    """Recover global variables from a one-pattern-per-segment allocation.

    Each segment's global pattern is the union of its clusters' active local
    patterns; segments mapping to the same global pattern merge. Inputs whose
    clusters carry more than one active local pattern on some segment are
    rejected (the map is only rate-preserving on the structured set).
    """
    pr = seg.problem
    S = pr.segments
    by_mask = {}
    for l in range(S):
        if seg.h[l] <= eps:
            continue
        union = 0
        for i in range(pr.n):
            row = seg.y[i][l]
            active = np.nonzero(row > eps)[0]
            if active.size > 1:
                raise TransportError(
                    f"cluster {i}, segment {l} carries {active.size} active "
                    "local patterns; transport needs the one-per-segment form")
            if active.size == 1:
                local_mask = int(active[0])
                for pos, ap in enumerate(pr.clusters[i]):
                    if local_mask >> pos & 1:
                        union |= 1 << ap
        entry = by_mask.setdefault(union, {"y": 0.0, "x": {}})
        entry["y"] += float(seg.h[l])
        for i in range(pr.n):
            if union >> i & 1:
                local_mask = 0
                for pos, ap in enumerate(pr.clusters[i]):
                    if union >> ap & 1:
                        local_mask |= 1 << pos
                red = int(np.searchsorted(pr.own_masks[i], local_mask))
                for r, j in enumerate(pr.edge_rows[i]):
                    val = float(seg.z[i][r, l, red])
                    if val != 0.0:
                        key = (i, int(j))
                        entry["x"][key] = entry["x"].get(key, 0.0) + val
    masks = sorted(by_mask)
    y = np.array([by_mask[m]["y"] for m in masks])
    xs = [by_mask[m]["x"] for m in masks]
    total = float(y.sum())
    if total < 1.0 - 1e-9:
        masks.append(0)
        y = np.append(y, 1.0 - total)
        xs.append({})
    lam, tau = pr.lam, pr.tau
    rates = seg.rates.copy()
    margins = rates / tau - lam
    feasible = bool(np.all(margins[lam > 0] > 0))
    util = -float(np.sum(lam[lam > 0] / margins[lam > 0])) if feasible else -math.inf
    return GlobalAllocation(masks=list(masks), y=y, x=xs, rates=rates,
                            utility=util, feasible=feasible)
