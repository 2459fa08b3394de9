"""Simulation helpers producing pressure waveforms."""

from __future__ import annotations

import math

import numpy as np

from ..dataset import Dataset
from ..odesolve import SolverConfig, integrate
from .heart import HeartProfile, inflow_input
from .models import build_model, default_heart
from .network import ArterialNetwork, FluidProps

REFERENCE_RTOL = 1e-8
REFERENCE_ATOL = 1e-4


def sample_grid(t_end: float, rate: float) -> np.ndarray:
    n = int(math.floor(t_end * rate + 1e-9))
    return np.arange(n + 1) / rate


def simulate_model(model, heart: HeartProfile, save_times, cfg: SolverConfig = None, x0=None):
    """Integrate ``model`` under ``heart`` from its mean-flow equilibrium at t=0."""
    inner = getattr(model, "inner", model)
    fluid = getattr(inner, "fluid", FluidProps())
    if x0 is None:
        x0 = inner.steady_state(heart.mean_volume_flow * fluid.density)
    cfg = cfg or SolverConfig(method="rk45", rel_tol=REFERENCE_RTOL, abs_tol=REFERENCE_ATOL, save_times=save_times)
    if cfg.save_times is None or len(cfg.save_times) != len(save_times):
        cfg.save_times = np.asarray(save_times, dtype=float)
    f = getattr(model, "rhs", None) or model.derivatives
    traj, _ = integrate(f, x0, inflow_input(heart, fluid), cfg, t0=0.0)
    return traj


def reference_waveforms(net: ArterialNetwork, fluid: FluidProps = None, heart: HeartProfile = None,
                        n_cycles: int = 3, rate: float = 40.0, rtol: float = REFERENCE_RTOL,
                        atol: float = REFERENCE_ATOL, label: str = "") -> Dataset:
    """Observed-segment pressures of the elastic reference model sampled at ``rate``."""
    if n_cycles < 2:
        raise ValueError("n_cycles must be at least 2")
    fluid = fluid or net.fluid
    heart = heart or default_heart(net)
    model = build_model(net, "reference_elastic", fluid, heart)
    times = sample_grid(n_cycles * heart.period, rate)
    cfg = SolverConfig(method="rk45", rel_tol=rtol, abs_tol=atol, save_times=times)
    traj = simulate_model(model, heart, times, cfg)
    patient = {"heart_rate": heart.heart_rate, "stroke_volume": heart.stroke_volume, "label": label,
               "n_cycles": n_cycles}
    ds = Dataset(times, model.observe(traj.states), net.observed, patient, rate)
    ds.stats = traj.stats
    return ds
