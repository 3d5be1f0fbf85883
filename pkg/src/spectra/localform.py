"""Structure of the segmented local-pattern formulation.

A LocalProblem holds everything fixed about one convex instance: the cluster
pattern spaces, per-link spectral-efficiency tables, the cross-cluster
consistency maps, and the traffic profile. Bandwidth variables:

  y[i][l, b]    bandwidth of local pattern b (bitmask over sorted N_i,
                including the empty pattern and patterns not containing i)
                in segment l, as seen by AP i's cluster;
  z[i][r, l, u] bandwidth AP i spends serving its r-th device on segment l
                under its u-th own pattern (patterns containing i);
  h[l]          width of segment l.

Linear constraints (all enforced by the solver, audited by `residuals`):
  sum_r z[i][r, l, u] = y[i][l, own_mask(u)]          per (i, u, l)
  pair consistency: for clusters with overlapping membership, the bandwidth
    totals they attribute to each shared sub-pattern agree   per (pair, C, l)
  sum_b y[i][l, b] = h[l]                              per (i, l)
  sum_l h[l] = 1,   z >= 0,   y >= 0

Rates are handled in packets/s internally (spectral efficiency divided by
the mean packet size) so utility curvature and bandwidth live on comparable
scales.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .netmodel import Topology, Neighborhoods, LN2
from .scenario import TrafficProfile

ACTIVE_EPS = 1e-9   # bandwidth below this is treated as zero everywhere


def _compact_bits(values: np.ndarray, positions: Sequence[int]) -> np.ndarray:
    """Gather selected bit positions of each value into a dense low mask."""
    out = np.zeros_like(values)
    for newbit, pos in enumerate(positions):
        out |= ((values >> pos) & 1) << newbit
    return out


@dataclass
class PairMap:
    """Consistency bookkeeping for one unordered cluster pair (i < m)."""

    i: int
    m: int
    overlap: tuple            # sorted shared AP ids
    slots: int                # number of nonempty shared sub-patterns C
    order_i: np.ndarray       # pattern permutation of cluster i grouping by C
    order_m: np.ndarray
    group_i: int              # patterns per C-group on side i
    group_m: int

    def side(self, who: int):
        if who == self.i:
            return self.order_i, self.group_i
        return self.order_m, self.group_m


class LocalProblem:
    """Fixed structure of one convex allocation instance."""

    def __init__(self, topology: Topology, nbhd: Neighborhoods,
                 traffic: TrafficProfile, segment_count: int,
                 se_mode: str = "pessimistic",
                 clusters: Optional[tuple] = None):
        if segment_count < 1:
            raise ValueError("need at least one segment")
        self.topology = topology
        self.nbhd = nbhd
        self.traffic = traffic
        self.segments = int(segment_count)
        self.se_mode = se_mode
        self.n = topology.ap_count
        self.k = topology.device_count
        self.lam = np.asarray(traffic.arrival_rates, dtype=float)
        self.tau = float(traffic.mean_packet_bits)
        self.clusters = tuple(tuple(c) for c in (clusters if clusters is not None
                                                 else nbhd.clusters))
        self._build_clusters()
        self._build_se_tables()
        self._build_pairs()
        self._build_device_maps()

    # -- structure ----------------------------------------------------------

    def _build_clusters(self):
        n = self.n
        self.cluster_size = [len(c) for c in self.clusters]
        self.pattern_count = [1 << d for d in self.cluster_size]
        self.own_bitpos = []
        self.own_masks = []          # full local mask per own-pattern index
        self.members = [np.asarray(c, dtype=int) for c in self.clusters]
        for i in range(n):
            pos = {ap: p for p, ap in enumerate(self.clusters[i])}
            if i not in pos:
                raise ValueError(f"cluster of AP {i} does not contain itself")
            bp = pos[i]
            self.own_bitpos.append(bp)
            d = self.cluster_size[i]
            red = np.arange(1 << (d - 1), dtype=np.int64)
            low = red & ((1 << bp) - 1)
            high = (red >> bp) << (bp + 1)
            self.own_masks.append(high | (1 << bp) | low)

    def _build_se_tables(self):
        """s[i][r, u]: packets/s per unit bandwidth on link i->U_i[r] under
        own pattern u. Depends on the pattern only through its A_j bits."""
        top, nbhd = self.topology, self.nbhd
        rp = top.received_psd()
        w_over_tau = top.bandwidth_hz / self.tau
        self.se = []
        self.edge_rows = []   # U_i as arrays
        for i in range(self.n):
            devs = np.asarray(nbhd.ap_nbhd[i], dtype=int)
            self.edge_rows.append(devs)
            cluster = self.clusters[i]
            pos = {ap: p for p, ap in enumerate(cluster)}
            tab = np.empty((devs.size, self.own_masks[i].size))
            for r, j in enumerate(devs):
                aj = set(nbhd.device_nbhd[j])
                if self.se_mode == "global":
                    interferers = [a for a in cluster if a != i]
                    base = float(top.noise_psd[j])
                elif self.se_mode in ("pessimistic", "optimistic"):
                    interferers = [a for a in cluster if a != i and a in aj]
                    base = float(top.noise_psd[j])
                    if self.se_mode == "pessimistic":
                        base += float(sum(rp[j, a] for a in range(self.n) if a not in aj))
                else:
                    raise ValueError(f"unknown se mode {self.se_mode!r}")
                tpos = [pos[a] for a in interferers]
                # Subset-sum DP over the interferer bits of the pattern.
                sums = np.zeros(1 << len(tpos))
                for b, a in enumerate(interferers):
                    half = 1 << b
                    sums[half:2 * half] = sums[:half] + rp[j, a]
                t_idx = _compact_bits(self.own_masks[i], tpos)
                denom = base + sums[t_idx]
                tab[r] = w_over_tau * np.log1p(rp[j, i] / denom) / LN2
            self.se.append(tab)

    def _build_pairs(self):
        self.pairs = []
        for i in range(self.n):
            for m in range(i + 1, self.n):
                shared = tuple(sorted(set(self.clusters[i]) & set(self.clusters[m])))
                if not shared:
                    continue
                self.pairs.append(self._make_pair(i, m, shared))
        self.pairs_of = [[] for _ in range(self.n)]
        for p_idx, pm in enumerate(self.pairs):
            self.pairs_of[pm.i].append(p_idx)
            self.pairs_of[pm.m].append(p_idx)

    def _make_pair(self, i, m, shared):
        def side(c_idx):
            cluster = self.clusters[c_idx]
            pos = {ap: p for p, ap in enumerate(cluster)}
            spos = [pos[a] for a in shared]
            masks = np.arange(self.pattern_count[c_idx], dtype=np.int64)
            proj = _compact_bits(masks, spos)          # C-mask per pattern
            order = np.argsort(proj, kind="stable")
            group = self.pattern_count[c_idx] >> len(shared)
            return order, group
        order_i, group_i = side(i)
        order_m, group_m = side(m)
        return PairMap(i=i, m=m, overlap=shared, slots=(1 << len(shared)) - 1,
                       order_i=order_i, order_m=order_m,
                       group_i=group_i, group_m=group_m)

    def _build_device_maps(self):
        """Flat device-major view of the z storage for batched rate work."""
        S = self.segments
        sizes = [self.edge_rows[i].size * S * self.own_masks[i].size for i in range(self.n)]
        self.z_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.z_total = int(self.z_offsets[-1])
        per_dev_chunks = [[] for _ in range(self.k)]
        for i in range(self.n):
            block = S * self.own_masks[i].size
            for r, j in enumerate(self.edge_rows[i]):
                start = self.z_offsets[i] + r * block
                per_dev_chunks[j].append((i, r, start, block))
        take, s_dev, kappa_dev, bounds = [], [], [], [0]
        for j in range(self.k):
            for (i, r, start, block) in per_dev_chunks[j]:
                take.append(np.arange(start, start + block, dtype=np.int64))
                s_dev.append(np.tile(self.se[i][r], S))
                kappa_dev.append(np.full(block, float(self.edge_rows[i].size)))
            bounds.append(bounds[-1] + sum(b for (_, _, _, b) in per_dev_chunks[j]))
        self.dev_take = np.concatenate(take) if take else np.zeros(0, dtype=np.int64)
        self.dev_se = np.concatenate(s_dev) if s_dev else np.zeros(0)
        self.dev_kappa = np.concatenate(kappa_dev) if kappa_dev else np.zeros(0)
        self.dev_bounds = np.asarray(bounds[:-1], dtype=np.int64)
        self.dev_sizes = np.diff(np.append(self.dev_bounds, self.dev_take.size))
        self.dev_of_slot = np.repeat(np.arange(self.k), self.dev_sizes)
        self.dev_chunks = per_dev_chunks

    # -- helpers ------------------------------------------------------------

    def variable_counts(self) -> dict:
        S = self.segments
        return {
            "z": self.z_total,
            "y": int(sum(S * p for p in self.pattern_count)),
            "v": int(sum(S * pm.slots for pm in self.pairs)),
            "h": S,
        }

    def zeros_like_y(self):
        return [np.zeros((self.segments, p)) for p in self.pattern_count]

    def zeros_like_z(self):
        return [np.zeros((self.edge_rows[i].size, self.segments, self.own_masks[i].size))
                for i in range(self.n)]

    def z_flat(self, z):
        return np.concatenate([z[i].ravel() for i in range(self.n)])

    def z_unflat(self, flat):
        out = []
        for i in range(self.n):
            seg = flat[self.z_offsets[i]:self.z_offsets[i + 1]]
            out.append(seg.reshape(self.edge_rows[i].size, self.segments,
                                   self.own_masks[i].size).copy())
        return out

    def pair_sum(self, pm: PairMap, who: int, y_i: np.ndarray) -> np.ndarray:
        """Group totals per shared sub-pattern C, shape (rows, slots)."""
        order, group = pm.side(who)
        rows = y_i.shape[0]
        arr = y_i[:, order].reshape(rows, pm.slots + 1, group)
        return arr[:, 1:, :].sum(axis=2)

    def pair_scatter(self, pm: PairMap, who: int, vals: np.ndarray) -> np.ndarray:
        """Adjoint of pair_sum: spread (rows, slots) values back onto patterns."""
        order, group = pm.side(who)
        rows = vals.shape[0]
        full = np.zeros((rows, pm.slots + 1, group))
        full[:, 1:, :] = vals[:, :, None]
        out = np.empty((rows, order.size))
        out[:, order] = full.reshape(rows, order.size)
        return out

    def rates_packets(self, z) -> np.ndarray:
        """Exact per-device service rates (packets/s) implied by z."""
        flat = self.z_flat(z)[self.dev_take]
        if flat.size == 0:
            return np.zeros(self.k)
        return np.add.reduceat(self.dev_se * flat, self.dev_bounds)

    def rates_bits(self, z) -> np.ndarray:
        return self.rates_packets(z) * self.tau

    def utility_value(self, z) -> float:
        margins = self.rates_packets(z) - self.lam
        loaded = self.lam > 0
        if np.any(margins[loaded] <= 0):
            return -math.inf
        return -float(np.sum(self.lam[loaded] / margins[loaded]))


@dataclass
class SegmentedAllocation:
    """A feasible point of the segmented formulation."""

    problem: LocalProblem
    y: list            # per cluster, (S, P_i)
    z: list            # per cluster, (|U_i|, S, P_i/2)
    h: np.ndarray      # (S,)
    rates: np.ndarray  # bits/s per device
    flags: dict = field(default_factory=dict)

    def utility(self) -> float:
        return self.problem.utility_value(self.z)

    def residuals(self) -> dict:
        """Max-norm violation of every linear constraint family."""
        pr = self.problem
        link = 0.0
        rowsum = 0.0
        for i in range(pr.n):
            own = self.y[i][:, pr.own_masks[i]]
            if self.z[i].size:
                link = max(link, float(np.max(np.abs(self.z[i].sum(axis=0) - own))))
            rowsum = max(rowsum, float(np.max(np.abs(self.y[i].sum(axis=1) - self.h))))
        pair = 0.0
        for pm in pr.pairs:
            a = pr.pair_sum(pm, pm.i, self.y[pm.i])
            b = pr.pair_sum(pm, pm.m, self.y[pm.m])
            if a.size:
                pair = max(pair, float(np.max(np.abs(a - b))))
        nonneg = 0.0
        for i in range(pr.n):
            nonneg = max(nonneg, float(max(0.0, -self.y[i].min(initial=0.0))),
                         float(max(0.0, -self.z[i].min(initial=0.0))))
        total = abs(float(self.h.sum()) - 1.0)
        rate_gap = float(np.max(np.abs(self.rates - pr.rates_bits(self.z)))) \
            / max(1.0, float(np.max(np.abs(self.rates))))
        return {"link": link, "pair": pair, "rowsum": rowsum,
                "simplex": total, "nonneg": nonneg, "rate_rel": rate_gap}
