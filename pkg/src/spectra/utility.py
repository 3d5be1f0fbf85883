"""Network utility functions on per-device rate vectors.

The primary utility is the negative aggregate M/M/1 backlog cost
``-sum_j lambda_j / (r_j/tau - lambda_j)^+`` for Poisson arrivals at
``lambda_j`` packets/s and exponential packets of ``tau`` bits on average.
Infeasible rate vectors (some loaded device at or below its arrival rate)
evaluate to an explicit infeasible marker rather than a bare float, so
solvers can branch deterministically.

Sum-rate, sum-log-rate and min-rate utilities are provided as value/gradient
plug-ins; only the delay utility has full solver support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .convexcore import DEFAULT_TOLS


@dataclass(frozen=True)
class UtilityEval:
    """Extended-real utility value; ``value`` is ``-inf`` iff not feasible."""

    value: float
    feasible: bool


class BarrierError(ValueError):
    """Raised when a derivative is requested at or inside the delay barrier."""


class DelayUtility:
    """Arrival-weighted M/M/1 delay utility.

    Rates are in bits/s; internally each device's service rate is r_j / tau
    packets/s. Devices with lambda_j == 0 contribute nothing.
    """

    def __init__(self, arrival_rates, mean_packet_bits: float):
        lam = np.asarray(arrival_rates, dtype=float)
        if np.any(lam < 0):
            raise ValueError("arrival rates must be nonnegative")
        if mean_packet_bits <= 0:
            raise ValueError("mean packet size must be positive")
        self.arrival_rates = lam
        self.mean_packet_bits = float(mean_packet_bits)

    @property
    def device_count(self) -> int:
        return self.arrival_rates.size

    def scaled(self, factor: float) -> "DelayUtility":
        return DelayUtility(self.arrival_rates * factor, self.mean_packet_bits)

    # -- evaluation ---------------------------------------------------------

    def margins(self, rates) -> np.ndarray:
        """Per-device queue margins r_j/tau - lambda_j in packets/s."""
        r = np.asarray(rates, dtype=float)
        return r / self.mean_packet_bits - self.arrival_rates

    def feasible(self, rates) -> bool:
        m = self.margins(rates)
        return bool(np.all(m[self.arrival_rates > 0] > 0))

    def evaluate(self, rates) -> UtilityEval:
        lam = self.arrival_rates
        m = self.margins(rates)
        loaded = lam > 0
        if np.any(m[loaded] <= 0):
            return UtilityEval(-math.inf, False)
        val = -float(np.sum(lam[loaded] / m[loaded]))
        return UtilityEval(val, True)

    def value(self, rates) -> float:
        return self.evaluate(rates).value

    def gradient(self, rates) -> np.ndarray:
        """d u / d r_j = lambda_j / (tau * (r_j/tau - lambda_j)^2)."""
        lam = self.arrival_rates
        m = self.margins(rates)
        if np.any(m[lam > 0] <= 0):
            raise BarrierError("gradient requested at or inside the delay barrier")
        g = np.zeros_like(m)
        loaded = lam > 0
        g[loaded] = lam[loaded] / (self.mean_packet_bits * m[loaded] ** 2)
        return g

    def average_delay(self, rates) -> float:
        """Arrival-weighted mean sojourn time, +inf when infeasible."""
        lam = self.arrival_rates
        total = float(np.sum(lam))
        if total == 0:
            return 0.0
        ev = self.evaluate(rates)
        if not ev.feasible:
            return math.inf
        return -ev.value / total

    # -- scalar kernels (single device) -------------------------------------

    def marginal(self, j: int, rate: float) -> float:
        lam = float(self.arrival_rates[j])
        if lam == 0:
            return 0.0
        m = rate / self.mean_packet_bits - lam
        if m <= 0:
            raise BarrierError("marginal utility undefined at the barrier")
        return lam / (self.mean_packet_bits * m * m)


def per_device_concave_max(
    utility: DelayUtility,
    j: int,
    slope: float,
    center: float,
    rho: float,
    tol: float = DEFAULT_TOLS.newton_dx,
    max_iter: int = 200,
) -> float:
    """Maximize  u_j(slope * x) - (rho/2)(x - center)^2  over x >= 0.

    The 1-D kernel used by the per-device rate subproblems. Returns ``inf``
    when the objective is unbounded above (rho == 0 with positive load), so
    the caller can apply its own budget cap.
    """
    lam = float(utility.arrival_rates[j])
    tau = utility.mean_packet_bits
    if slope < 0 or rho < 0:
        raise ValueError("slope and penalty must be nonnegative")
    if lam == 0.0 or slope == 0.0:
        if rho == 0.0:
            return max(center, 0.0)
        return max(center, 0.0)
    if rho == 0.0:
        return math.inf
    # Stationarity: slope * u'(slope x) = rho (x - center) on x > barrier,
    # where barrier = lam * tau / slope. The left side decreases from +inf,
    # the right side increases, so the root is unique; bracketed Newton.
    barrier = lam * tau / slope

    def fval(x):
        m = slope * x / tau - lam
        return slope * lam / (tau * m * m) - rho * (x - center)

    lo = barrier * (1.0 + 1e-12)
    hi = max(barrier * 2.0, center + 1.0, 1.0)
    while fval(hi) > 0:
        hi *= 2.0
        if hi > 1e30:
            return math.inf
    x = min(max(center, lo * 1.5), hi)
    for _ in range(max_iter):
        m = slope * x / tau - lam
        f = slope * lam / (tau * m * m) - rho * (x - center)
        if f > 0:
            lo = x
        else:
            hi = x
        fp = -2.0 * slope * slope * lam / (tau * tau * m ** 3) - rho
        step = f / fp
        x_new = x - step
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= tol * max(1.0, abs(x)):
            return x_new
        x = x_new
    return x


# ---------------------------------------------------------------------------
# Alternative utilities (value/gradient only)
# ---------------------------------------------------------------------------

class SumRateUtility:
    def evaluate(self, rates) -> UtilityEval:
        return UtilityEval(float(np.sum(rates)), True)

    def value(self, rates) -> float:
        return self.evaluate(rates).value

    def gradient(self, rates) -> np.ndarray:
        return np.ones_like(np.asarray(rates, dtype=float))


class SumLogRateUtility:
    def evaluate(self, rates) -> UtilityEval:
        r = np.asarray(rates, dtype=float)
        if np.any(r <= 0):
            return UtilityEval(-math.inf, False)
        return UtilityEval(float(np.sum(np.log(r))), True)

    def value(self, rates) -> float:
        return self.evaluate(rates).value

    def gradient(self, rates) -> np.ndarray:
        r = np.asarray(rates, dtype=float)
        if np.any(r <= 0):
            raise BarrierError("log-rate gradient undefined at zero rate")
        return 1.0 / r


class MinRateUtility:
    def evaluate(self, rates) -> UtilityEval:
        return UtilityEval(float(np.min(rates)), True)

    def value(self, rates) -> float:
        return self.evaluate(rates).value

    def gradient(self, rates) -> np.ndarray:
        """A supergradient: the indicator of (one of) the minimizing devices."""
        r = np.asarray(rates, dtype=float)
        g = np.zeros_like(r)
        g[int(np.argmin(r))] = 1.0
        return g
