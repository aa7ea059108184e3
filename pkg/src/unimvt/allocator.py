"""Coupon decision engine.

Sweep a discrete grid of candidate intensities, score each by expected net
gain (click value times predicted uplift, minus the coupon cost) and by
uplift-to-cost ratio, then issue at the best intensity when both the ratio
threshold and positive-net-gain conditions hold.

Two simulation modes exist because training calibrates the unit uplift as a
logit-space shift while the additive probability form is the natural
decision-time reading: ``logit`` (default) computes
sigmoid(logit(p0) + eta * q); ``additive`` computes min(p0 + eta * q, cap).
Both are nondecreasing in q.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import PROB_EPS
from .errors import ConfigError
from .htenet import counterfactual_treat

MODES = ("additive", "logit")


@dataclass(frozen=True)
class AllocationGrid:
    q_min: float
    q_max: float
    step: float

    def __post_init__(self) -> None:
        if not (0.0 < self.q_min <= self.q_max):
            raise ConfigError("need 0 < q_min <= q_max")
        if self.step <= 0.0:
            raise ConfigError("grid step must be positive")

    def values(self) -> np.ndarray:
        count = int(np.floor((self.q_max - self.q_min) / self.step + 1e-9)) + 1
        return self.q_min + self.step * np.arange(count)

    @classmethod
    def parse(cls, text: str) -> "AllocationGrid":
        """Parse a qmin:qmax:step CLI argument."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid must be qmin:qmax:step, got {text!r}")
        return cls(*(float(p) for p in parts))


@dataclass
class AllocationDecision:
    issue: bool
    q_star: float            # 0 when withheld
    expected_uplift: float   # uplift at the best candidate intensity
    ratio: float             # value * uplift / cost at the best candidate
    net_gain: float          # value * uplift - cost at the best candidate
    mode: str

    def to_csv_fields(self, index: int) -> str:
        return ",".join([
            str(index), str(int(self.issue)), repr(self.q_star),
            repr(self.expected_uplift), repr(self.ratio), repr(self.net_gain),
        ])


def simulate(prediction, q: float, mode: str = "logit") -> float:
    """Uplifted click probability at candidate intensity q; nondecreasing in q."""
    if mode not in MODES:
        raise ConfigError(f"unknown simulation mode {mode!r}")
    if q < 0:
        raise ConfigError("candidate intensity must be nonnegative")
    p0, eta = float(prediction.p0_hat), float(prediction.eta_hat)
    if mode == "additive":
        return float(min(p0 + eta * q, 1.0 - PROB_EPS))
    return float(counterfactual_treat(p0, q, eta))


def decide(prediction, grid: AllocationGrid, value_per_click: float,
           threshold: float, mode: str = "logit") -> AllocationDecision:
    """Pick q* = argmax net gain over the grid (ties go to the cheapest q);
    issue iff ratio(q*) >= threshold and net_gain(q*) > 0."""
    if value_per_click <= 0:
        raise ConfigError("value_per_click must be positive")
    qs = grid.values()
    if qs.size == 0:
        raise ConfigError("allocation grid is empty")
    p0 = float(prediction.p0_hat)

    best = None
    for q in qs:
        uplift = simulate(prediction, float(q), mode) - p0
        net_gain = value_per_click * uplift - q
        ratio = value_per_click * uplift / q
        if best is None or net_gain > best[0]:
            best = (net_gain, float(q), uplift, ratio)
    net_gain, q_star, uplift, ratio = best
    issue = ratio >= threshold and net_gain > 0
    return AllocationDecision(
        issue=issue,
        q_star=q_star if issue else 0.0,
        expected_uplift=uplift,
        ratio=ratio,
        net_gain=net_gain,
        mode=mode,
    )
