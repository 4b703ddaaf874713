"""Construction of skip-coefficient profiles.

A profile combines three ingredients, all multiplicative and all in (0, 1]:

* a layerwise linear ramp from ``rho_bottom`` (deepest tap) to ``rho_top``,
* an optional noise-level schedule that moves the whole profile toward 1
  at one end of the sigma range,
* an optional sigma window outside of which the profile is identity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .diffusion import NoiseSchedule, karras_grid
from .errors import ConfigError, DomainError
from .unet import ScalingMode


class TimeSchedule(enum.Enum):
    CONSTANT = "constant"
    INCREASING = "increasing"  # rho_0 at sigma_min rising to 1 at sigma_max
    DECREASING = "decreasing"  # 1 at sigma_min falling to rho_0 at sigma_max


def rho_layers(rho_bottom, rho_top, k, reach_top=False):
    """Per-tap coefficients, bottom -> top.

    The default ramp uses delta = (rho_top - rho_bottom) / k with
    rho_i = rho_bottom + delta * i for i in 0..k-1, so the top tap stops one
    increment short of rho_top.  ``reach_top`` switches the divisor to k - 1
    so the last tap hits rho_top exactly.
    """
    for name, v in (("rho_bottom", rho_bottom), ("rho_top", rho_top)):
        if not 0.0 < v <= 1.0:
            raise DomainError(f"{name} must be in (0, 1], got {v}")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")
    if k == 1:
        return [float(rho_bottom)]
    div = (k - 1) if reach_top else k
    delta = (rho_top - rho_bottom) / div
    return [float(rho_bottom + delta * i) for i in range(k)]


def rho_time(schedule, rho_0, sigma, schedule_domain):
    """Noise-level multiplier in (0, 1], linear in sigma across the domain."""
    lo, hi = schedule_domain
    if schedule is TimeSchedule.CONSTANT:
        return 1.0
    if not 0.0 < rho_0 <= 1.0:
        raise DomainError(f"rho_0 must be in (0, 1], got {rho_0}")
    frac = (float(sigma) - lo) / (hi - lo)
    frac = min(1.0, max(0.0, frac))
    if schedule is TimeSchedule.INCREASING:
        return rho_0 + (1.0 - rho_0) * frac
    if schedule is TimeSchedule.DECREASING:
        return 1.0 - (1.0 - rho_0) * frac
    raise ConfigError(f"unknown time schedule {schedule!r}")


def window_partition(sigma_min=0.002, sigma_max=80.0, n_windows=13, steps_per_window=4,
                     karras_exponent=7.0):
    """Split [sigma_min, sigma_max] into consecutive windows along a Karras grid.

    The grid has n_windows * steps_per_window steps; window boundaries are grid
    nodes.  Windows are returned highest-sigma first as (sigma_low, sigma_high)
    pairs that tile the interval.
    """
    if n_windows < 1 or steps_per_window < 1:
        raise ConfigError("need at least one window and one step per window")
    schedule = NoiseSchedule(sigma_min=sigma_min, sigma_max=sigma_max,
                             karras_exponent=karras_exponent)
    grid = karras_grid(schedule, n_windows * steps_per_window + 1)
    return [
        (float(grid[(j + 1) * steps_per_window]), float(grid[j * steps_per_window]))
        for j in range(n_windows)
    ]


@dataclass(frozen=True)
class SkipProfile:
    """Complete skip-scaling configuration applied during sampling.

    ``window=None`` applies everywhere; a (low, high) interval restricts the
    profile to low < sigma <= high (the top window also includes its lower
    boundary via sigma_min); an empty interval (low >= high) disables it
    everywhere.  Inside vs outside is decided per forward pass from the
    sigma handed to ``layer_coefficients``.
    """

    rho_bottom: float
    rho_top: float
    k: int
    time_schedule: TimeSchedule = TimeSchedule.CONSTANT
    rho_0: float = 1.0
    window: Optional[Tuple[float, float]] = None
    mode: ScalingMode = ScalingMode.AT_CONCAT
    schedule_domain: Tuple[float, float] = (0.002, 80.0)
    reach_top: bool = False

    def __post_init__(self):
        rho_layers(self.rho_bottom, self.rho_top, self.k, self.reach_top)  # validates
        if self.time_schedule is not TimeSchedule.CONSTANT and not 0.0 < self.rho_0 <= 1.0:
            raise DomainError(f"rho_0 must be in (0, 1], got {self.rho_0}")

    @classmethod
    def identity(cls, k, mode=ScalingMode.AT_CONCAT):
        return cls(rho_bottom=1.0, rho_top=1.0, k=k, mode=mode)

    def sigma_inside_window(self, sigma):
        if self.window is None:
            return True
        low, high = self.window
        if sigma > high:
            return False
        if sigma > low:
            return True
        # close the bottom window at the domain floor
        return low <= self.schedule_domain[0] and sigma == low

    def evaluate(self, layer_index, sigma):
        """Effective coefficient for one tap at one noise level."""
        if not self.sigma_inside_window(sigma):
            return 1.0
        base = rho_layers(self.rho_bottom, self.rho_top, self.k, self.reach_top)[layer_index]
        return base * rho_time(self.time_schedule, self.rho_0, sigma, self.schedule_domain)

    def layer_coefficients(self, sigma):
        """All k effective coefficients at one noise level, bottom -> top."""
        if not self.sigma_inside_window(sigma):
            return [1.0] * self.k
        mult = rho_time(self.time_schedule, self.rho_0, sigma, self.schedule_domain)
        return [
            r * mult for r in rho_layers(self.rho_bottom, self.rho_top, self.k, self.reach_top)
        ]
