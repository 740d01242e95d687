"""Hardware clocks with piecewise-constant rates, logical clock state, PLL lock."""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

SLOW = "slow"
FAST = "fast"


class HorizonError(ValueError):
    pass


class HardwareRegression(RuntimeError):
    pass


class RateSchedule:
    """Piecewise-constant rate; segment i covers [breakpoints[i], breakpoints[i+1])."""

    def __init__(self, breakpoints: Sequence[float], rates: Sequence[float],
                 horizon: float = math.inf, lo: float = 1.0, hi: Optional[float] = None):
        if len(breakpoints) != len(rates) or not breakpoints:
            raise ValueError("need one rate per breakpoint")
        if breakpoints[0] != 0.0:
            raise ValueError("first breakpoint must be 0")
        for a, b in zip(breakpoints, breakpoints[1:]):
            if not b > a:
                raise ValueError("breakpoints must be strictly increasing")
        for r in rates:
            if r < lo - 1e-12 or (hi is not None and r > hi + 1e-12):
                raise ValueError(f"rate {r} outside [{lo}, {hi}]")
        self.breakpoints = [float(b) for b in breakpoints]
        self.rates = [float(r) for r in rates]
        self.horizon = float(horizon)
        acc = [0.0]
        for i in range(1, len(self.breakpoints)):
            acc.append(acc[-1] + self.rates[i - 1] * (self.breakpoints[i] - self.breakpoints[i - 1]))
        self._cum = acc

    @classmethod
    def constant(cls, rate: float, horizon: float = math.inf) -> "RateSchedule":
        return cls([0.0], [rate], horizon)

    def _seg(self, t: float) -> int:
        return bisect.bisect_right(self.breakpoints, t) - 1

    def value(self, t: float) -> float:
        if t < 0 or t > self.horizon:
            raise HorizonError(f"time {t} outside [0, {self.horizon}]")
        i = self._seg(t)
        return self._cum[i] + self.rates[i] * (t - self.breakpoints[i])

    def rate_at(self, t: float) -> float:
        return self.rates[self._seg(max(t, 0.0))]

    def inverse(self, h: float) -> float:
        """Real time at which the clock reads ``h``."""
        if h <= 0:
            return 0.0
        i = bisect.bisect_right(self._cum, h) - 1
        return self.breakpoints[i] + (h - self._cum[i]) / self.rates[i]

    def max_rate(self) -> float:
        return max(self.rates)

    def min_rate(self) -> float:
        return min(self.rates)

    def to_dict(self) -> dict:
        return {"breakpoints": self.breakpoints, "rates": self.rates}

    def __eq__(self, other):
        return (isinstance(other, RateSchedule) and self.breakpoints == other.breakpoints
                and self.rates == other.rates)


def hardware_value(s: RateSchedule, t: float) -> float:
    return s.value(t)


@dataclass(frozen=True)
class LogicalClockState:
    L: float = 0.0
    H_last: float = 0.0
    mode: str = SLOW

    def rate(self, mu: float) -> float:
        return 1.0 + mu if self.mode == FAST else 1.0


def logical_value(st: LogicalClockState, H_now: float, mu: float) -> float:
    """Read the clock without touching state."""
    if H_now < st.H_last:
        raise HardwareRegression(f"hardware clock went back: {H_now} < {st.H_last}")
    return st.L + st.rate(mu) * (H_now - st.H_last)


def advance(st: LogicalClockState, H_now: float, mu: float) -> LogicalClockState:
    """Fold the elapsed hardware time into L using the current mode."""
    return LogicalClockState(logical_value(st, H_now, mu), H_now, st.mode)


# ------------------------------------------------------------------ PLL

@dataclass
class SyntonizedClock:
    base: RateSchedule
    correction: List[Tuple[float, float]]  # (start time, multiplicative factor)
    period: float
    nu: float
    kappa: float = 1.0
    lock_time: float = 0.0
    max_error: float = 0.0
    schedule: RateSchedule = field(default=None)

    def band(self) -> float:
        """Declared post-lock bound on |rate - reference rate|."""
        return self.nu + self.kappa * self.max_error / self.period

    def value(self, t: float) -> float:
        return self.schedule.value(t)

    def rates_after_lock(self) -> List[Tuple[float, float]]:
        s = self.schedule
        out = []
        for i, b in enumerate(s.breakpoints):
            end = s.breakpoints[i + 1] if i + 1 < len(s.breakpoints) else math.inf
            if end > self.lock_time:
                out.append((max(b, self.lock_time), s.rates[i]))
        return out

    def as_hardware(self) -> RateSchedule:
        """Rescaled copy whose rates never drop below 1 once locked."""
        b = self.band()
        scale = 1.0 / (1.0 - b) if b < 1 else 1.0
        return RateSchedule(self.schedule.breakpoints, [r * scale for r in self.schedule.rates],
                            self.schedule.horizon, lo=0.0)


def syntonize(base: RateSchedule, reference_offsets: Sequence[Tuple[float, float]], P: float,
              nu: float, lock_time: float, kappa: float = 1.0, max_error: float = 0.0,
              theta: Optional[float] = None) -> SyntonizedClock:
    """One-pole frequency lock.

    ``reference_offsets`` holds (t_k, y_k) with y_k the measured offset of the base
    clock against the reference, i.e. H(t_k) - t_k plus measurement error.  Over
    [t_k, t_k+1) the base rate is multiplied by the inverse of the frequency ratio
    observed over the previous period, clamped to [1/theta, 1].
    """
    theta = base.max_rate() if theta is None else theta
    pts = sorted(reference_offsets)
    for (a, _), (b, _) in zip(pts, pts[1:]):
        gap = b - a
        if gap < 0.5 * P or gap > 1.5 * P:
            raise ValueError(f"measurement spacing {gap} not within [P/2, 3P/2] of P={P}")
    corr: List[Tuple[float, float]] = []
    for (t0, y0), (t1, y1) in zip(pts, pts[1:]):
        if t1 < lock_time:
            continue
        ratio = ((y1 + t1) - (y0 + t0)) / (t1 - t0)
        c = min(1.0, max(1.0 / theta, 1.0 / ratio))
        corr.append((t1, c))
    # merge base breakpoints with correction start times
    times = sorted(set(base.breakpoints) | {t for t, _ in corr})
    starts = [t for t, _ in corr]
    rates = []
    for t in times:
        j = bisect.bisect_right(starts, t) - 1
        c = corr[j][1] if j >= 0 else 1.0
        rates.append(base.rate_at(t) * c)
    sched = RateSchedule(times, rates, base.horizon, lo=0.0)
    return SyntonizedClock(base, corr, P, nu, kappa, lock_time, max_error, sched)
