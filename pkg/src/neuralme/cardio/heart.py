"""Prescribed heart inflow into the aortic root."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ValidationError
from .network import FluidProps


@dataclass(frozen=True)
class HeartProfile:
    """Half-sine systolic ejection, or a tabulated one-period volume flow.

    ``table`` is an optional pair ``(times, volume_flows)`` covering one
    period starting at 0; it overrides the half-sine and its integral
    defines the stroke volume.
    """

    heart_rate: float = 73.0
    stroke_volume: float = 7e-5
    systolic_fraction: float = 0.3
    table: Optional[tuple] = None

    def __post_init__(self):
        if not self.heart_rate > 0:
            raise ValidationError("heart_rate must be positive")
        if not 0.0 < self.systolic_fraction < 1.0:
            raise ValidationError("systolic_fraction must lie in (0, 1)")
        if self.table is None and not self.stroke_volume > 0:
            raise ValidationError("stroke_volume must be positive")

    @property
    def period(self) -> float:
        return 60.0 / self.heart_rate

    @property
    def systolic_time(self) -> float:
        return self.systolic_fraction * self.period

    @property
    def mean_volume_flow(self) -> float:
        return self.stroke_volume / self.period

    @classmethod
    def from_csv(cls, path, heart_rate: float) -> "HeartProfile":
        """Read a ``t,q`` table (seconds, m^3/s) spanning one period."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        t = np.array([float(r[0]) for r in rows[1:]])
        q = np.array([float(r[1]) for r in rows[1:]])
        trapezoid = getattr(np, "trapezoid", None) or np.trapz
        sv = float(trapezoid(q, t))
        return cls(heart_rate=heart_rate, stroke_volume=sv, table=(tuple(t), tuple(q)))


def heart_inflow(t, h: HeartProfile, fluid: FluidProps = FluidProps()):
    """Heart mass flow in kg/s at time(s) ``t``."""
    tau = np.mod(np.asarray(t, dtype=float), h.period)
    if h.table is not None:
        tt, qq = (np.asarray(a) for a in h.table)
        q = np.interp(tau, tt, qq, period=h.period)
    else:
        ts = h.systolic_time
        peak = math.pi * h.stroke_volume / (2.0 * ts)
        q = np.where(tau <= ts, peak * np.maximum(np.sin(math.pi * np.minimum(tau, ts) / ts), 0.0), 0.0)
    q = fluid.density * q
    return float(q) if np.ndim(q) == 0 else q


def inflow_input(h: HeartProfile, fluid: FluidProps = FluidProps()):
    """Scalar-time input function ``t -> array([mass_flow])`` for the solvers."""
    if h.table is not None:
        return lambda t: np.array([heart_inflow(t, h, fluid)])
    period, ts = h.period, h.systolic_time
    peak = fluid.density * math.pi * h.stroke_volume / (2.0 * ts)
    w = math.pi / ts

    def u(t):
        tau = math.fmod(t, period)
        if tau < 0.0:
            tau += period
        return np.array([peak * max(math.sin(w * tau), 0.0) if tau <= ts else 0.0])

    return u
