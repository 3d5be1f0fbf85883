"""Random scenario generation and file persistence.

A scenario couples a Topology with a traffic profile. Generation follows the
usual heterogeneous-network drop: one macro AP at the center of a square
area, pico APs uniform over the area, devices on randomly chosen lattice
points, log-distance pathloss with log-normal shadowing (sigma in dB).
Everything is deterministic under the configured seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field, replace
from typing import Optional

import numpy as np

from .netmodel import Topology, StrongestM, ExplicitEdges, build_neighborhoods

MIN_DISTANCE_M = 1.0   # pathloss reference: unit gain at 1 m, clamped below


@dataclass(frozen=True)
class ScenarioConfig:
    area_side: float = 500.0
    ap_count: int = 10
    device_count: int = 23
    macro_count: int = 1
    pathloss_exponent: float = 3.0
    shadow_sigma_db: float = 3.0
    macro_psd: float = 5.0          # uW/Hz
    pico_psd: float = 1.0           # uW/Hz
    noise_psd: float = 1e-7         # uW/Hz
    bandwidth_hz: float = 20e6
    mean_packet_bits: float = 1e6
    mean_arrival_rate: float = 1.0  # packets/s per device, fleet average
    rng_seed: int = 0
    strongest_m: int = 4
    lattice_points_per_side: Optional[int] = None

    def __post_init__(self):
        positive = [self.area_side, self.pathloss_exponent + 1.0, self.macro_psd,
                    self.pico_psd, self.noise_psd, self.bandwidth_hz,
                    self.mean_packet_bits, self.mean_arrival_rate]
        if any(v <= 0 for v in positive) or self.shadow_sigma_db < 0:
            raise ValueError("physical quantities must be positive")
        if self.ap_count < self.macro_count or self.macro_count < 1:
            raise ValueError("need ap_count >= macro_count >= 1")
        if self.device_count < 1:
            raise ValueError("need at least one device")


@dataclass(frozen=True)
class TrafficProfile:
    arrival_rates: np.ndarray   # packets/s per device
    mean_packet_bits: float

    def __post_init__(self):
        object.__setattr__(self, "arrival_rates", np.asarray(self.arrival_rates, dtype=float))
        if np.any(self.arrival_rates < 0) or self.mean_packet_bits <= 0:
            raise ValueError("invalid traffic profile")

    def scaled_to_mean(self, mean_rate: float) -> "TrafficProfile":
        """Rescale so the per-device mean arrival rate equals ``mean_rate``."""
        cur = float(np.mean(self.arrival_rates))
        if cur <= 0:
            raise ValueError("cannot rescale an all-zero traffic profile")
        return TrafficProfile(self.arrival_rates * (mean_rate / cur), self.mean_packet_bits)


@dataclass(frozen=True)
class Scenario:
    config: ScenarioConfig
    topology: Topology
    traffic: TrafficProfile
    ap_kinds: tuple   # "macro" / "pico" per AP

    def neighborhoods(self):
        if self.topology.edges is not None:
            return build_neighborhoods(self.topology, ExplicitEdges())
        return build_neighborhoods(self.topology, StrongestM(self.config.strongest_m))


def generate(config: ScenarioConfig) -> Scenario:
    """Draw a scenario from the configured distribution, deterministically."""
    rng = np.random.default_rng(config.rng_seed)
    n, k, a = config.ap_count, config.device_count, config.area_side

    ap_pos = np.empty((n, 2))
    kinds = []
    for m in range(config.macro_count):
        ap_pos[m] = (a / 2.0, a / 2.0) if m == 0 else rng.uniform(0, a, 2)
        kinds.append("macro")
    ap_pos[config.macro_count:] = rng.uniform(0, a, size=(n - config.macro_count, 2))
    kinds.extend("pico" for _ in range(n - config.macro_count))

    side = config.lattice_points_per_side or math.ceil(math.sqrt(2 * k))
    if side * side < k:
        raise ValueError(
            f"lattice of {side}x{side} points cannot host {k} devices without replacement")
    chosen = rng.choice(side * side, size=k, replace=False)
    step = a / side
    dev_pos = np.column_stack(((chosen % side + 0.5) * step,
                               (chosen // side + 0.5) * step))

    dist = np.linalg.norm(dev_pos[:, None, :] - ap_pos[None, :, :], axis=2)
    shadow_db = rng.normal(0.0, config.shadow_sigma_db, size=(k, n))
    gains = np.maximum(dist, MIN_DISTANCE_M) ** (-config.pathloss_exponent) \
        * 10.0 ** (shadow_db / 10.0)

    # Per-device load weights in (0, 1], normalized to the configured mean.
    weights = 1.0 - rng.random(k)
    rates = config.mean_arrival_rate * weights / weights.mean()

    psd = np.where(np.arange(n) < config.macro_count, config.macro_psd, config.pico_psd)
    topology = Topology(
        ap_positions=ap_pos,
        device_positions=dev_pos,
        ap_psd=psd,
        noise_psd=np.full(k, config.noise_psd),
        bandwidth_hz=config.bandwidth_hz,
        gains=gains,
    )
    traffic = TrafficProfile(rates, config.mean_packet_bits)
    return Scenario(config=config, topology=topology, traffic=traffic, ap_kinds=tuple(kinds))


# ---------------------------------------------------------------------------
# Persistence (schema 1)
# ---------------------------------------------------------------------------

class ScenarioFormatError(ValueError):
    """Scenario file violates the schema; the message names the field path."""


def _fmt(value):
    """Render a document with floats at 17 significant digits (round-trip exact)."""
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, (int, str)):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    if isinstance(value, dict):
        items = (f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in value.items())
        return "{" + ", ".join(items) + "}"
    raise TypeError(f"cannot serialize {type(value)!r}")


def save(scenario: Scenario, path) -> None:
    cfg = asdict(scenario.config)
    top = scenario.topology
    doc = {
        "schema": 1,
        "config": cfg,
        "aps": [
            {"id": i, "xy": list(map(float, top.ap_positions[i])),
             "psd": float(top.ap_psd[i]), "kind": scenario.ap_kinds[i]}
            for i in range(top.ap_count)
        ],
        "devices": [
            {"id": j, "xy": list(map(float, top.device_positions[j])),
             "noise_psd": float(top.noise_psd[j]),
             "arrival_rate": float(scenario.traffic.arrival_rates[j])}
            for j in range(top.device_count)
        ],
        "gains": [[float(g) for g in row] for row in top.gains],
    }
    if top.edges is not None:
        doc["edges"] = sorted([int(i), int(j)] for (i, j) in top.edges)
    with open(path, "w") as fh:
        fh.write(_fmt(doc))
        fh.write("\n")


def _need(mapping, key, path, kind=None):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ScenarioFormatError(f"missing field {path}.{key}" if path else f"missing field {key}")
    value = mapping[key]
    where = f"{path}.{key}" if path else key
    if kind is not None and not isinstance(value, kind):
        raise ScenarioFormatError(f"field {where} has wrong type {type(value).__name__}")
    return value


def load(path) -> Scenario:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioFormatError(f"not valid JSON: {exc}") from exc
    if _need(doc, "schema", "") != 1:
        raise ScenarioFormatError("field schema must be 1")
    raw_cfg = _need(doc, "config", "", dict)
    try:
        config = ScenarioConfig(**raw_cfg)
    except (TypeError, ValueError) as exc:
        raise ScenarioFormatError(f"bad config section: {exc}") from exc

    aps = _need(doc, "aps", "", list)
    devices = _need(doc, "devices", "", list)
    gains = _need(doc, "gains", "", list)
    n, k = len(aps), len(devices)
    if n != config.ap_count or k != config.device_count:
        raise ScenarioFormatError("aps/devices sections disagree with config counts")

    ap_pos, psd, kinds = np.empty((n, 2)), np.empty(n), []
    for idx, ap in enumerate(aps):
        where = f"aps[{idx}]"
        ap_pos[idx] = _need(ap, "xy", where, list)
        psd[idx] = _need(ap, "psd", where, (int, float))
        kinds.append(_need(ap, "kind", where, str))

    dev_pos, noise, rates = np.empty((k, 2)), np.empty(k), np.empty(k)
    for idx, dev in enumerate(devices):
        where = f"devices[{idx}]"
        dev_pos[idx] = _need(dev, "xy", where, list)
        noise[idx] = _need(dev, "noise_psd", where, (int, float))
        rates[idx] = _need(dev, "arrival_rate", where, (int, float))

    gm = np.asarray(gains, dtype=float)
    if gm.shape != (k, n):
        raise ScenarioFormatError(f"field gains must be a {k}x{n} row-major matrix")

    edges = None
    if "edges" in doc:
        edges = frozenset((int(i), int(j)) for i, j in doc["edges"])
    try:
        topology = Topology(ap_positions=ap_pos, device_positions=dev_pos, ap_psd=psd,
                            noise_psd=noise, bandwidth_hz=config.bandwidth_hz,
                            gains=gm, edges=edges)
    except ValueError as exc:
        raise ScenarioFormatError(str(exc)) from exc
    traffic = TrafficProfile(rates, config.mean_packet_bits)
    return Scenario(config=config, topology=topology, traffic=traffic, ap_kinds=tuple(kinds))
