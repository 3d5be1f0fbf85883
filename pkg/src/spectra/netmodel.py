"""Core network model: topology, the admissible-link bipartite graph, derived
neighborhoods and interference clusters, transmission patterns, and spectral
efficiency under global and local patterns.

All values are immutable after construction and safe for concurrent reads.
APs are indexed 0..n-1 and devices 0..k-1 throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

LN2 = math.log(2.0)

ENUMERATION_CAP_BITS = 20


class IsolatedTerminalError(ValueError):
    """An AP or device ended up with no admissible links."""


class PatternContractError(ValueError):
    """A spectral-efficiency value was requested outside its domain."""


class EnumerationCapError(ValueError):
    """Pattern enumeration was requested beyond the configured cap."""


def _validate_edges(n: int, k: int, edges) -> None:
    ap_seen = np.zeros(n, dtype=bool)
    dev_seen = np.zeros(k, dtype=bool)
    for (i, j) in edges:
        if not (0 <= i < n and 0 <= j < k):
            raise ValueError(f"edge ({i}->{j}) out of range")
        ap_seen[i] = True
        dev_seen[j] = True
    for i in range(n):
        if not ap_seen[i]:
            raise IsolatedTerminalError(f"AP {i} is isolated (serves no device)")
    for j in range(k):
        if not dev_seen[j]:
            raise IsolatedTerminalError(f"device {j} is isolated (no serving AP)")


@dataclass(frozen=True)
class Topology:
    """Physical network state for one slow-timescale period.

    gains[j, i] is the dimensionless power gain of link i -> j; PSDs are in
    uW/Hz and bandwidth in Hz. ``edges`` is the admissible-link set E and may
    be None when a neighborhood policy will derive it.
    """

    ap_positions: np.ndarray
    device_positions: np.ndarray
    ap_psd: np.ndarray
    noise_psd: np.ndarray
    bandwidth_hz: float
    gains: np.ndarray
    edges: Optional[frozenset] = None

    def __post_init__(self):
        object.__setattr__(self, "ap_positions", np.asarray(self.ap_positions, dtype=float))
        object.__setattr__(self, "device_positions", np.asarray(self.device_positions, dtype=float))
        object.__setattr__(self, "ap_psd", np.asarray(self.ap_psd, dtype=float))
        object.__setattr__(self, "noise_psd", np.asarray(self.noise_psd, dtype=float))
        object.__setattr__(self, "gains", np.asarray(self.gains, dtype=float))
        n, k = self.ap_count, self.device_count
        if self.gains.shape != (k, n):
            raise ValueError(f"gains must have shape (k={k}, n={n})")
        if self.bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        if np.any(self.ap_psd <= 0) or np.any(self.noise_psd <= 0):
            raise ValueError("PSDs must be positive")
        if np.any(self.gains <= 0):
            raise ValueError("link gains must be positive")
        if self.edges is not None:
            object.__setattr__(self, "edges", frozenset((int(i), int(j)) for i, j in self.edges))
            _validate_edges(n, k, self.edges)

    @property
    def ap_count(self) -> int:
        return self.ap_positions.shape[0]

    @property
    def device_count(self) -> int:
        return self.device_positions.shape[0]

    def received_psd(self) -> np.ndarray:
        """p_i * g_{i->j} for every pair, shape (k, n)."""
        return self.gains * self.ap_psd[None, :]


# ---------------------------------------------------------------------------
# Neighborhood policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExplicitEdges:
    """Use the topology's own admissible-link set."""


@dataclass(frozen=True)
class StrongestM:
    """Each device is served by the m APs with the highest received PSD."""

    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("strongest-m policy needs m >= 1")


@dataclass(frozen=True)
class Neighborhoods:
    """Derived sets: A_j (serving APs per device), U_i (served devices per
    AP), and the interference cluster N_i = union of A_j over j in U_i."""

    device_nbhd: tuple     # A_j, sorted tuples of AP ids
    ap_nbhd: tuple         # U_i, sorted tuples of device ids
    clusters: tuple        # N_i, sorted tuples of AP ids
    max_device_degree: int  # n0 = max_j |A_j|
    max_ap_degree: int      # k0 = max_i |U_i|

    @property
    def edges(self) -> frozenset:
        return frozenset((i, j) for j, aps in enumerate(self.device_nbhd) for i in aps)

    def cluster_position(self, i: int) -> dict:
        """AP id -> bit position within sorted N_i."""
        return {ap: pos for pos, ap in enumerate(self.clusters[i])}


def build_neighborhoods(topology: Topology, policy=ExplicitEdges()) -> Neighborhoods:
    """Derive A_j, U_i and N_i under the given admissibility policy.

    Raises IsolatedTerminalError when any terminal ends up isolated, naming
    the terminal (no silent pruning).
    """
    n, k = topology.ap_count, topology.device_count
    if isinstance(policy, StrongestM):
        m = min(policy.m, n)
        rsrp = topology.received_psd()
        device_nbhd = []
        for j in range(k):
            # Ties broken toward the lower AP index for determinism.
            order = np.lexsort((np.arange(n), -rsrp[j]))
            device_nbhd.append(tuple(sorted(int(i) for i in order[:m])))
        edges = [(i, j) for j, aps in enumerate(device_nbhd) for i in aps]
    elif isinstance(policy, ExplicitEdges):
        if topology.edges is None:
            raise ValueError("topology has no explicit edge set")
        edges = sorted(topology.edges)
        device_nbhd = [tuple(sorted(i for (i, jj) in edges if jj == j)) for j in range(k)]
    else:
        raise TypeError(f"unknown neighborhood policy {policy!r}")

    _validate_edges(n, k, edges)
    ap_nbhd = [tuple(sorted(j for (ii, j) in edges if ii == i)) for i in range(n)]
    clusters = []
    for i in range(n):
        members = set()
        for j in ap_nbhd[i]:
            members.update(device_nbhd[j])
        clusters.append(tuple(sorted(members)))
    return Neighborhoods(
        device_nbhd=tuple(device_nbhd),
        ap_nbhd=tuple(ap_nbhd),
        clusters=tuple(clusters),
        max_device_degree=max(len(a) for a in device_nbhd),
        max_ap_degree=max(len(u) for u in ap_nbhd),
    )


# ---------------------------------------------------------------------------
# Patterns
# ---------------------------------------------------------------------------

def mask_from_members(members: Iterable[int]) -> int:
    mask = 0
    for i in members:
        mask |= 1 << int(i)
    return mask


def members_from_mask(mask: int) -> tuple:
    out = []
    pos = 0
    while mask:
        if mask & 1:
            out.append(pos)
        mask >>= 1
        pos += 1
    return tuple(out)


def enumerate_patterns(size: int, cap: int = ENUMERATION_CAP_BITS) -> range:
    """All 2^size subset bitmasks in ascending order.

    Refuses beyond ``cap`` bits: use the local-segment formulation instead of
    enumerating global patterns at that scale.
    """
    if size < 0:
        raise ValueError("pattern scope size must be nonnegative")
    if size > cap:
        raise EnumerationCapError(
            f"enumerating 2^{size} patterns exceeds the cap of 2^{cap}; "
            "use the local-segment formulation for networks this large"
        )
    return range(1 << size)


# ---------------------------------------------------------------------------
# Spectral efficiency
# ---------------------------------------------------------------------------

def _shannon(bandwidth_hz: float, signal: float, interference_plus_noise: float) -> float:
    return bandwidth_hz * math.log1p(signal / interference_plus_noise) / LN2


def spectral_efficiency_global(topology: Topology, nbhd: Neighborhoods, i: int, j: int,
                               pattern: Iterable[int]) -> float:
    """Shannon spectral efficiency of link i->j under a global pattern, in
    bits/s per unit of (fractional) bandwidth.

    Undefined unless i is an active pattern member admissible for j; asking
    for an undefined value is a hard contract error.
    """
    members = set(int(a) for a in pattern)
    if i not in members:
        raise PatternContractError(f"AP {i} is not a member of the pattern")
    if i not in nbhd.device_nbhd[j]:
        raise PatternContractError(f"link {i}->{j} is not admissible")
    rp = topology.received_psd()
    signal = rp[j, i]
    interference = sum(rp[j, a] for a in members if a != i)
    return _shannon(topology.bandwidth_hz, signal, interference + topology.noise_psd[j])


def spectral_efficiency_local(topology: Topology, nbhd: Neighborhoods, i: int, j: int,
                              local_pattern: Iterable[int], mode: str = "pessimistic") -> float:
    """Spectral efficiency of link i->j under a local pattern B of cluster i.

    Pessimistic mode treats every AP outside the device neighborhood A_j as an
    always-on interferer (the default); optimistic mode ignores all remote
    interference. Either way the value depends on B only through B & A_j.
    """
    members = set(int(a) for a in local_pattern)
    cluster = set(nbhd.clusters[i])
    if not members <= cluster:
        raise PatternContractError(f"pattern {sorted(members)} is not local to cluster of AP {i}")
    if i not in members:
        raise PatternContractError(f"AP {i} is not a member of the pattern")
    aj = set(nbhd.device_nbhd[j])
    if i not in aj:
        raise PatternContractError(f"link {i}->{j} is not admissible")
    rp = topology.received_psd()
    signal = rp[j, i]
    inter_members = (members & aj) - {i}
    interference = sum(rp[j, a] for a in inter_members)
    if mode == "pessimistic":
        remote = [a for a in range(topology.ap_count) if a not in aj]
        interference += sum(rp[j, a] for a in remote)
    elif mode != "optimistic":
        raise ValueError(f"unknown spectral-efficiency mode {mode!r}")
    return _shannon(topology.bandwidth_hz, signal, interference + topology.noise_psd[j])
