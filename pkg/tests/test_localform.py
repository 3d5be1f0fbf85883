import numpy as np

from spectra.netmodel import (Topology, build_neighborhoods, ExplicitEdges,
                              spectral_efficiency_local, members_from_mask)
from spectra.scenario import ScenarioConfig, TrafficProfile, generate
from spectra.localform import LocalProblem, _compact_bits


def test_compact_bits():
    vals = np.array([0b1010, 0b0110, 0b1111])
    # gather bits at positions 1 and 3 into low bits
    out = _compact_bits(vals, [1, 3])
    assert list(out) == [0b11, 0b01, 0b11]


def test_se_tables_match_public_api():
    cfg = ScenarioConfig(ap_count=4, device_count=6, area_side=300.0,
                         rng_seed=2, strongest_m=2, mean_arrival_rate=1.0)
    scn = generate(cfg)
    nbhd = scn.neighborhoods()
    for mode in ("pessimistic", "optimistic"):
        pr = LocalProblem(scn.topology, nbhd, scn.traffic, segment_count=1,
                          se_mode=mode)
        for i in range(4):
            cluster = pr.clusters[i]
            for r, j in enumerate(pr.edge_rows[i]):
                for red, mask in enumerate(pr.own_masks[i]):
                    members = [cluster[p] for p in members_from_mask(int(mask))]
                    want = spectral_efficiency_local(
                        scn.topology, nbhd, i, int(j), members, mode)
                    got = pr.se[i][r, red] * pr.tau
                    assert abs(got - want) <= 1e-6 * max(want, 1.0)


def test_rates_identity_and_utility():
    cfg = ScenarioConfig(ap_count=3, device_count=3, area_side=250.0,
                         rng_seed=6, strongest_m=2, mean_arrival_rate=1.0)
    scn = generate(cfg)
    nbhd = scn.neighborhoods()
    pr = LocalProblem(scn.topology, nbhd, scn.traffic, segment_count=2)
    rng = np.random.default_rng(0)
    z = pr.zeros_like_z()
    for i in range(pr.n):
        z[i][:] = rng.uniform(0, 0.1, z[i].shape)
    # brute-force the rate sum
    want = np.zeros(pr.k)
    for i in range(pr.n):
        for r, j in enumerate(pr.edge_rows[i]):
            for l in range(2):
                for red in range(pr.own_masks[i].size):
                    want[j] += pr.se[i][r, red] * z[i][r, l, red]
    got = pr.rates_packets(z)
    assert np.max(np.abs(got - want)) <= 1e-9 * max(1.0, float(np.max(want)))
    margins = got - pr.lam
    if np.all(margins[pr.lam > 0] > 0):
        u = -float(np.sum(pr.lam[pr.lam > 0] / margins[pr.lam > 0]))
        assert abs(pr.utility_value(z) - u) <= 1e-12 * max(1.0, abs(u))


def test_pair_sum_scatter_adjoint():
    cfg = ScenarioConfig(ap_count=4, device_count=6, area_side=300.0,
                         rng_seed=2, strongest_m=2, mean_arrival_rate=1.0)
    scn = generate(cfg)
    pr = LocalProblem(scn.topology, scn.neighborhoods(), scn.traffic, 2)
    rng = np.random.default_rng(1)
    for pm in pr.pairs:
        for who in (pm.i, pm.m):
            y = rng.normal(0, 1, (2, pr.pattern_count[who]))
            s = rng.normal(0, 1, (2, pm.slots))
            lhs = float(np.sum(pr.pair_sum(pm, who, y) * s))
            rhs = float(np.sum(y * pr.pair_scatter(pm, who, s)))
            assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_pair_groups_partition_patterns():
    cfg = ScenarioConfig(ap_count=4, device_count=6, area_side=300.0,
                         rng_seed=2, strongest_m=2, mean_arrival_rate=1.0)
    scn = generate(cfg)
    pr = LocalProblem(scn.topology, scn.neighborhoods(), scn.traffic, 1)
    for pm in pr.pairs:
        shared = set(pm.overlap)
        for who in (pm.i, pm.m):
            y = np.zeros((1, pr.pattern_count[who]))
            cluster = pr.clusters[who]
            # put one unit on a single pattern; exactly one slot receives it
            for mask in range(pr.pattern_count[who]):
                y[:] = 0.0
                y[0, mask] = 1.0
                sums = pr.pair_sum(pm, who, y)
                members = {cluster[p] for p in members_from_mask(mask)}
                inter = members & shared
                assert float(sums.sum()) == (1.0 if inter else 0.0)


def test_z_flat_roundtrip():
    cfg = ScenarioConfig(ap_count=3, device_count=3, area_side=250.0,
                         rng_seed=6, strongest_m=2, mean_arrival_rate=1.0)
    scn = generate(cfg)
    pr = LocalProblem(scn.topology, scn.neighborhoods(), scn.traffic, 3)
    rng = np.random.default_rng(3)
    z = pr.zeros_like_z()
    for i in range(pr.n):
        z[i][:] = rng.uniform(0, 1, z[i].shape)
    back = pr.z_unflat(pr.z_flat(z))
    for a, b in zip(z, back):
        assert np.array_equal(a, b)
