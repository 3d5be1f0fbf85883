"""Command-line front end.

Subcommands
-----------
generate   draw a random scenario and write the scenario file
sweep      solve selected schemes over an ascending arrival-rate grid (CSV)
trace      per-iteration utility/delay trace of the iterative plan search
inspect    human-readable report of a plan dump

Exit codes: 0 success, 2 usage error, 3 infeasible result, 4 solver/parse
failure. ``SPECTRA_SEED`` provides the seed when ``--seed`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import scenario as scn_mod
from .scenario import ScenarioConfig, generate as generate_scenario
from .localform import LocalProblem, ACTIVE_EPS
from .admm import AdmmConfig
from .sparse_local import (Algorithm1Config, run_algorithm1, build_problem)
from .baselines import (solve_maxrsrp_full_reuse, solve_optimal_orthogonal,
                        solve_optimized_association_full_reuse)
from .exact_global import solve_p0, GlobalScaleError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_SOLVER = 4

SWEEP_HEADER = ["load", "scheme", "utility", "avg_delay", "feasible",
                "wall_time_s", "active_patterns", "error"]
TRACE_HEADER = ["iteration", "utility", "delay", "feasible"]

SCHEMES = ("p0", "alg1", "alg1-admm", "maxrsrp", "orthogonal", "assoc-full-reuse")


def _seed_default(value):
    if value is not None:
        return int(value)
    return int(os.environ.get("SPECTRA_SEED", "0"))


def _fmt_float(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(float(x), ".10g")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = ScenarioConfig(
        area_side=args.area, ap_count=args.n, device_count=args.k,
        macro_count=args.macros, pathloss_exponent=args.pathloss,
        shadow_sigma_db=args.shadow, macro_psd=args.macro_psd,
        pico_psd=args.pico_psd, noise_psd=args.noise_psd,
        bandwidth_hz=args.bandwidth, mean_packet_bits=args.packet_bits,
        mean_arrival_rate=args.rate, rng_seed=_seed_default(args.seed),
        strongest_m=args.strongest)
    scn = generate_scenario(cfg)
    try:
        scn.neighborhoods()
    except Exception as exc:
        print(f"generated scenario rejected: {exc}", file=sys.stderr)
        print("try a different --seed or fewer APs", file=sys.stderr)
        return EXIT_INFEASIBLE
    scn_mod.save(scn, args.out)
    print(f"wrote {args.out}: n={cfg.ap_count} k={cfg.device_count} "
          f"area={cfg.area_side:g}m seed={cfg.rng_seed} strongest={cfg.strongest_m}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _solve_point(path, load, scheme, segments, seed, admm_iters, admm_tol,
                 outer_iters, plan_prefix):
    scn = scn_mod.load(path)
    nbhd = scn.neighborhoods()
    traffic = scn.traffic.scaled_to_mean(load)
    start = time.time()
    row = {"load": load, "scheme": scheme, "error": ""}
    try:
        if scheme in ("maxrsrp", "orthogonal", "assoc-full-reuse"):
            fn = {"maxrsrp": solve_maxrsrp_full_reuse,
                  "orthogonal": solve_optimal_orthogonal,
                  "assoc-full-reuse": solve_optimized_association_full_reuse}[scheme]
            res = fn(scn.topology, nbhd, traffic)
            util, delay, feas = res.utility, res.delay, res.feasible
            npat = 1 if scheme != "orthogonal" else scn.topology.ap_count
        elif scheme == "p0":
            alloc, _ = solve_p0(scn.topology, nbhd, traffic, se_mode="global")
            util, feas = alloc.utility, alloc.feasible
            lam_total = float(traffic.arrival_rates.sum())
            delay = (-util / lam_total) if feas and lam_total > 0 else math.inf
            npat = len([1 for m, v in alloc.active_patterns() if m != 0])
        elif scheme in ("alg1", "alg1-admm"):
            admm = AdmmConfig(rho=8.0, over_relax=1.7,
                              tol=admm_tol if scheme == "alg1-admm" else admm_tol / 3.0,
                              max_iter=admm_iters if scheme == "alg1-admm"
                              else int(admm_iters * 1.5),
                              z_passes=2,
                              track_messages=(scheme == "alg1-admm"))
            cfg = Algorithm1Config(seed=seed, segment_count=segments, admm=admm,
                                   max_iterations=outer_iters)
            res = run_algorithm1(scn.topology, nbhd, traffic, cfg)
            feas = res.plan is not None and res.plan.feasible
            util = res.utility
            delay = res.delay()
            npat = res.plan.active_pattern_count() if res.plan is not None else 0
            if plan_prefix and res.plan is not None:
                out = f"{plan_prefix}-{scheme}-{load:g}.json"
                with open(out, "w") as fh:
                    json.dump(res.plan.to_dict(), fh, indent=1)
        else:
            raise ValueError(f"unknown scheme {scheme}")
        row.update(utility=util, avg_delay=delay, feasible=feas,
                   active_patterns=npat)
    except Exception as exc:   # a failed point must not kill the sweep
        row.update(utility=None, avg_delay=None, feasible=False,
                   active_patterns=None, error=f"{type(exc).__name__}: {exc}")
    row["wall_time_s"] = time.time() - start
    return row


def cmd_sweep(args) -> int:
    try:
        loads = [float(x) for x in args.loads.split(",") if x]
    except ValueError:
        print("bad --loads grid", file=sys.stderr)
        return EXIT_USAGE
    if not loads or any(l <= 0 for l in loads) or loads != sorted(loads):
        print("--loads must be an ascending positive grid", file=sys.stderr)
        return EXIT_USAGE
    schemes = [s for s in args.schemes.split(",") if s]
    if not schemes:
        print("empty scheme list", file=sys.stderr)
        return EXIT_USAGE
    for s in schemes:
        if s not in SCHEMES:
            print(f"unknown scheme {s!r}; choose from {', '.join(SCHEMES)}",
                  file=sys.stderr)
            return EXIT_USAGE
    seed = _seed_default(args.seed)
    points = [(load, scheme) for load in loads for scheme in schemes]
    work = [(args.scenario, load, scheme, args.segments, seed, args.admm_iters,
             args.admm_tol, args.outer_iters, args.plan_prefix)
            for load, scheme in points]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_solve_point, *zip(*work)))
    else:
        rows = [_solve_point(*w) for w in work]
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(SWEEP_HEADER)
        for row in rows:
            wr.writerow([
                _fmt_float(row["load"]), row["scheme"], _fmt_float(row["utility"]),
                _fmt_float(row["avg_delay"]),
                int(bool(row["feasible"])),
                _fmt_float(row["wall_time_s"]),
                "" if row["active_patterns"] is None else row["active_patterns"],
                row["error"]])
    # Report saturation points (last finite-delay load per scheme).
    for scheme in schemes:
        ok = [r["load"] for r in rows if r["scheme"] == scheme and r["feasible"]]
        top = f"{max(ok):g}" if ok else "none"
        print(f"{scheme}: max supported load on grid = {top}")
    print(f"wrote {args.out} ({len(rows)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------

def cmd_trace(args) -> int:
    scn = scn_mod.load(args.scenario)
    nbhd = scn.neighborhoods()
    traffic = scn.traffic.scaled_to_mean(args.load)
    admm = AdmmConfig(rho=8.0, over_relax=1.7, tol=args.admm_tol,
                      max_iter=args.admm_iters, z_passes=2)
    cfg = Algorithm1Config(seed=_seed_default(args.seed), segment_count=args.segments,
                           admm=admm, max_iterations=args.outer_iters)
    try:
        res = run_algorithm1(scn.topology, nbhd, scn.traffic.scaled_to_mean(args.load), cfg)
    except Exception as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(TRACE_HEADER)
        for r in res.trace:
            wr.writerow([r.iteration, _fmt_float(r.utility),
                         _fmt_float(r.delay), int(r.feasible)])
    print(f"wrote {args.out} ({len(res.trace)} iterations)")
    if args.plan_out and res.plan is not None:
        with open(args.plan_out, "w") as fh:
            json.dump(res.plan.to_dict(), fh, indent=1)
        print(f"wrote {args.plan_out}")
    if res.plan is None or not res.plan.feasible:
        print("final post-processing infeasible at this load", file=sys.stderr)
        return EXIT_INFEASIBLE
    return EXIT_OK


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    try:
        with open(args.plan) as fh:
            doc = json.load(fh)
        segments = doc["segments"]
        links = doc["links"]
        rates = doc["rates_bits_per_s"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"malformed plan dump: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    total = sum(s["width"] for s in segments)
    active = {tuple(s["pattern"]) for s in segments
              if s["width"] > ACTIVE_EPS and s["pattern"]}
    print(f"{len(segments)} segments, total width {total:.9f}, "
          f"{len(active)} active patterns")
    for s in segments:
        aps = ",".join(str(a) for a in s["pattern"]) or "-"
        print(f"  segment {s['index']:3d}: width {s['width']:.6f}  APs [{aps}]")
    per_dev = {}
    for link in links:
        band = sum(link["bandwidth"])
        if band > ACTIVE_EPS:
            per_dev.setdefault(link["device"], []).append((link["ap"], band))
    print("associations:")
    for j, rate in enumerate(rates):
        serving = ", ".join(f"AP{a} ({b:.4f})"
                            for a, b in sorted(per_dev.get(j, [])))
        print(f"  device {j:3d}: rate {rate / 1e6:8.2f} Mb/s  <- {serving or 'none'}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spectra", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="draw and save a random scenario")
    g.add_argument("--n", type=int, required=True, help="number of APs")
    g.add_argument("--k", type=int, required=True, help="number of devices")
    g.add_argument("--area", type=float, default=500.0, help="square side, meters")
    g.add_argument("--macros", type=int, default=1)
    g.add_argument("--pathloss", type=float, default=3.0)
    g.add_argument("--shadow", type=float, default=3.0, help="shadowing sigma, dB")
    g.add_argument("--macro-psd", type=float, default=5.0, help="uW/Hz")
    g.add_argument("--pico-psd", type=float, default=1.0, help="uW/Hz")
    g.add_argument("--noise-psd", type=float, default=1e-7, help="uW/Hz")
    g.add_argument("--bandwidth", type=float, default=20e6, help="Hz")
    g.add_argument("--packet-bits", type=float, default=1e6)
    g.add_argument("--rate", type=float, default=1.0,
                   help="mean per-device arrival rate, packets/s")
    g.add_argument("--strongest", type=int, default=4,
                   help="serving-set size per device")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sweep", help="delay-vs-load sweep over schemes")
    s.add_argument("--scenario", required=True)
    s.add_argument("--loads", required=True,
                   help="comma-separated ascending mean arrival rates")
    s.add_argument("--schemes", required=True,
                   help="comma-separated subset of: " + ",".join(SCHEMES))
    s.add_argument("--segments", type=int, default=None,
                   help="spectrum segments for alg1 (default: devices + 1)")
    s.add_argument("--outer-iters", type=int, default=8)
    s.add_argument("--admm-iters", type=int, default=600)
    s.add_argument("--admm-tol", type=float, default=1e-6)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--plan-prefix", default=None,
                   help="write per-point plan dumps with this path prefix")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("trace", help="per-iteration convergence trace")
    t.add_argument("--scenario", required=True)
    t.add_argument("--load", type=float, required=True)
    t.add_argument("--segments", type=int, default=None)
    t.add_argument("--outer-iters", type=int, default=8)
    t.add_argument("--admm-iters", type=int, default=600)
    t.add_argument("--admm-tol", type=float, default=1e-6)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--plan-out", default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_trace)

    i = sub.add_parser("inspect", help="summarize a plan dump")
    i.add_argument("--plan", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
