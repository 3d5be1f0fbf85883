import itertools
import math

import numpy as np
import pytest

from spectra.netmodel import (
    Topology, build_neighborhoods, StrongestM, ExplicitEdges,
    IsolatedTerminalError, PatternContractError, EnumerationCapError,
    enumerate_patterns, mask_from_members, members_from_mask,
    spectral_efficiency_global, spectral_efficiency_local)
from spectra.scenario import ScenarioConfig, generate


def three_ap_two_device():
    """The textbook 3-AP / 2-device layout: E = {0->0, 1->0, 1->1, 2->1}."""
    return Topology(
        ap_positions=[[0, 0], [50, 0], [100, 0]],
        device_positions=[[20, 0], [80, 0]],
        ap_psd=[5.0, 1.0, 1.0],
        noise_psd=[1e-7, 1e-7],
        bandwidth_hz=20e6,
        gains=[[2e-5, 6e-6, 1e-7], [1e-7, 8e-6, 4e-5]],
        edges={(0, 0), (1, 0), (1, 1), (2, 1)})


def test_three_ap_neighborhoods():
    nbhd = build_neighborhoods(three_ap_two_device(), ExplicitEdges())
    assert nbhd.ap_nbhd == ((0,), (0, 1), (1,))
    assert nbhd.device_nbhd == ((0, 1), (1, 2))
    assert nbhd.clusters == ((0, 1), (0, 1, 2), (1, 2))
    assert nbhd.max_device_degree == 2 and nbhd.max_ap_degree == 2


def test_singleton_graph():
    top = Topology(ap_positions=[[0, 0]], device_positions=[[5, 0]],
                   ap_psd=[1.0], noise_psd=[1e-7], bandwidth_hz=20e6,
                   gains=[[1e-4]], edges={(0, 0)})
    nbhd = build_neighborhoods(top, ExplicitEdges())
    assert nbhd.device_nbhd == ((0,),)
    assert nbhd.ap_nbhd == ((0,),)
    assert nbhd.clusters == ((0,),)


def test_strongest_m_matches_bruteforce_union():
    cfg = ScenarioConfig(ap_count=10, device_count=23, rng_seed=0, strongest_m=4)
    scn = generate(cfg)
    nbhd = build_neighborhoods(scn.topology, StrongestM(4))
    rp = scn.topology.received_psd()
    for j in range(23):
        assert len(nbhd.device_nbhd[j]) == 4
        # strongest-4 by received PSD
        want = set(np.argsort(-rp[j], kind="stable")[:4])
        assert set(nbhd.device_nbhd[j]) == want
    # independent set-union oracle for the clusters
    for i in range(10):
        union = set()
        for j in range(23):
            if i in nbhd.device_nbhd[j]:
                union |= set(nbhd.device_nbhd[j])
        assert set(nbhd.clusters[i]) == union
        assert i in nbhd.clusters[i]


def test_symmetry_and_cluster_closure_exhaustive():
    cfg = ScenarioConfig(ap_count=8, device_count=15, rng_seed=2, strongest_m=3)
    scn = generate(cfg)
    nbhd = build_neighborhoods(scn.topology, StrongestM(3))
    for i in range(8):
        for j in range(15):
            assert (i in nbhd.device_nbhd[j]) == (j in nbhd.ap_nbhd[i])
    for i in range(8):
        for j in nbhd.ap_nbhd[i]:
            assert set(nbhd.device_nbhd[j]) <= set(nbhd.clusters[i])


def test_isolated_ap_rejected_with_name():
    top = Topology(ap_positions=[[0, 0], [50, 0]], device_positions=[[5, 0]],
                   ap_psd=[1.0, 1.0], noise_psd=[1e-7], bandwidth_hz=20e6,
                   gains=[[1e-4, 1e-5]])
    with pytest.raises(IsolatedTerminalError, match="AP 1"):
        build_neighborhoods(top, StrongestM(1))


def test_isolated_device_rejected_in_explicit_edges():
    with pytest.raises(IsolatedTerminalError, match="device 1"):
        Topology(ap_positions=[[0, 0]], device_positions=[[5, 0], [9, 0]],
                 ap_psd=[1.0], noise_psd=[1e-7, 1e-7], bandwidth_hz=20e6,
                 gains=[[1e-4], [1e-5]], edges={(0, 0)})


# ---------------------------------------------------------------------------
# spectral efficiency
# ---------------------------------------------------------------------------

def test_se_no_interferers_closed_form():
    top = three_ap_two_device()
    nbhd = build_neighborhoods(top, ExplicitEdges())
    got = spectral_efficiency_global(top, nbhd, 0, 0, {0})
    want = 20e6 * math.log2(1 + 5.0 * 2e-5 / 1e-7)
    assert abs(got - want) / want <= 1e-12


def test_se_table_one_values():
    # macro PSD 5 uW/Hz, noise 1e-7 uW/Hz, gain 1e-5, W = 20 MHz, no
    # interferers: 20e6 * log2(1 + 500) = 1.794e8 bits/s.
    top = Topology(ap_positions=[[0, 0]], device_positions=[[10, 0]],
                   ap_psd=[5.0], noise_psd=[1e-7], bandwidth_hz=20e6,
                   gains=[[1e-5]], edges={(0, 0)})
    nbhd = build_neighborhoods(top, ExplicitEdges())
    got = spectral_efficiency_global(top, nbhd, 0, 0, {0})
    assert abs(got - 1.7937333586e8) <= 1e3


def test_se_interferer_strictly_decreases():
    top = three_ap_two_device()
    nbhd = build_neighborhoods(top, ExplicitEdges())
    alone = spectral_efficiency_global(top, nbhd, 1, 0, {1})
    with_0 = spectral_efficiency_global(top, nbhd, 1, 0, {0, 1})
    with_02 = spectral_efficiency_global(top, nbhd, 1, 0, {0, 1, 2})
    assert alone > with_0 > with_02


def test_se_monotone_in_pattern_inclusion():
    top = three_ap_two_device()
    nbhd = build_neighborhoods(top, ExplicitEdges())
    masks = [m for m in enumerate_patterns(3) if m & 0b010]
    for a in masks:
        for b in masks:
            if a & b == a:   # a subset of b
                sa = spectral_efficiency_global(top, nbhd, 1, 0, members_from_mask(a))
                sb = spectral_efficiency_global(top, nbhd, 1, 0, members_from_mask(b))
                assert sa >= sb - 1e-9


def test_se_contract_violations():
    top = three_ap_two_device()
    nbhd = build_neighborhoods(top, ExplicitEdges())
    with pytest.raises(PatternContractError):
        spectral_efficiency_global(top, nbhd, 0, 0, {1})     # i not in pattern
    with pytest.raises(PatternContractError):
        spectral_efficiency_global(top, nbhd, 2, 0, {2})     # link not admissible
    with pytest.raises(PatternContractError):
        spectral_efficiency_local(top, nbhd, 0, 0, {0, 2})   # not local to cluster


def test_local_se_equals_global_when_neighborhood_is_everything():
    # two APs, device served by both: A_j = N, so no remote APs exist.
    top = Topology(ap_positions=[[0, 0], [50, 0]], device_positions=[[25, 0]],
                   ap_psd=[2.0, 1.0], noise_psd=[1e-7], bandwidth_hz=20e6,
                   gains=[[1e-5, 2e-5]], edges={(0, 0), (1, 0)})
    nbhd = build_neighborhoods(top, ExplicitEdges())
    for mask in [0b01, 0b11]:
        member = members_from_mask(mask)
        got = spectral_efficiency_local(top, nbhd, 0, 0, member, "pessimistic")
        want = spectral_efficiency_global(top, nbhd, 0, 0, member)
        assert abs(got - want) <= 1e-9 * want


def test_local_pessimistic_leq_optimistic():
    top = three_ap_two_device()
    nbhd = build_neighborhoods(top, ExplicitEdges())
    for b in [{1}, {0, 1}]:
        p = spectral_efficiency_local(top, nbhd, 1, 0, b, "pessimistic")
        o = spectral_efficiency_local(top, nbhd, 1, 0, b, "optimistic")
        assert p <= o + 1e-12


def test_locality_se_depends_only_on_device_intersection():
    # 4-AP chain; enumerate all local patterns of one cluster and group by
    # their intersection with the device neighborhood.
    cfg = ScenarioConfig(ap_count=4, device_count=5, rng_seed=6, strongest_m=2)
    scn = generate(cfg)
    nbhd = build_neighborhoods(scn.topology, StrongestM(2))
    for i in range(4):
        cluster = nbhd.clusters[i]
        for j in nbhd.ap_nbhd[i]:
            aj = set(nbhd.device_nbhd[j])
            values = {}
            for r in range(len(cluster) + 1):
                for sub in itertools.combinations(cluster, r):
                    if i not in sub:
                        continue
                    key = frozenset(set(sub) & aj)
                    se = spectral_efficiency_local(scn.topology, nbhd, i, j, sub)
                    values.setdefault(key, se)
                    assert abs(values[key] - se) <= 1e-9 * max(se, 1.0)


# ---------------------------------------------------------------------------
# patterns
# ---------------------------------------------------------------------------

def test_enumerate_small():
    assert list(enumerate_patterns(2)) == [0b00, 0b01, 0b10, 0b11]
    assert len(list(enumerate_patterns(3))) == 8
    assert len(enumerate_patterns(10)) == 1024


def test_enumerate_cap_refusal():
    with pytest.raises(EnumerationCapError, match="local"):
        enumerate_patterns(21)


def test_mask_roundtrip():
    members = (0, 3, 17, 63)
    assert members_from_mask(mask_from_members(members)) == members
