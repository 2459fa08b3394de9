"""Training, evaluation and timing of hybrid arterial models.

The protocol: resample reference data to 40 Hz and keep the last two of
three cardiac cycles; every optimizer step rolls the hybrid out from the
inner model's mean-flow equilibrium at t=0 (the first cycle is the warm-up),
scores a random subset of observed segments over a growing time horizon,
and applies one Adam update.  The derivative ANN stays frozen until the
relative loss drops below a threshold.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .cardio.heart import HeartProfile, inflow_input
from .dataset import Dataset
from .errors import DimensionMismatch, Diverged, InsufficientCycles, NonFiniteState, NonUniformInput, ValidationError
from .hybrid import HybridModel, build_topology, fit_scalers, init_params
from .odesolve import SolverConfig, integrate, loss_gradient


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    subset_size: int = 3
    horizon_initial: int = 8
    horizon_increment: int = 8
    horizon_cadence: int = 25
    unfreeze_threshold: float = 0.5
    max_frozen_epochs: Optional[int] = None
    rng_seed: int = 0
    solver_step: float = 1.0 / 160.0
    grad_clip: float = 1e3
    full_horizon_fraction: float = 0.1

    def validate(self, n_obs: Optional[int] = None, n_samples: Optional[int] = None) -> None:
        if self.epochs < 0:
            raise ValidationError("epochs must be non-negative")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValidationError("Adam betas must lie in [0, 1) and eps must be positive")
        if self.subset_size < 1 or (n_obs is not None and self.subset_size > n_obs):
            raise ValidationError(f"subset_size {self.subset_size} must lie in [1, n_obs]")
        if self.horizon_initial < 1 or self.horizon_increment < 0 or self.horizon_cadence < 1:
            raise ValidationError("horizon schedule values must be positive")
        if not 0.0 < self.unfreeze_threshold < 1.0:
            raise ValidationError("unfreeze_threshold must lie in (0, 1)")
        if not self.solver_step > 0:
            raise ValidationError("solver_step must be positive")
        if not self.grad_clip > 0:
            raise ValidationError("grad_clip must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"unknown training config keys {unknown}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ValidationError(f"cannot read config {str(path)!r}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_dict(doc)


@dataclass
class Metrics:
    per_segment_mse: dict = field(default_factory=dict)
    total_mse: float = float("nan")
    loss_history: list = field(default_factory=list)
    horizon_history: list = field(default_factory=list)
    subset_history: list = field(default_factory=list)
    frozen_history: list = field(default_factory=list)
    wall_time_per_pulse: float = float("nan")
    unfreeze_epoch: Optional[int] = None
    initial_mse: float = float("nan")
    best_epoch: Optional[int] = None
    train_time: float = 0.0

    def to_csv(self, path) -> None:
        """Per-epoch history as ``epoch,loss,horizon,subset,frozen``."""
        lines = ["epoch,loss,horizon,subset,frozen"]
        for i, loss in enumerate(self.loss_history):
            sub = ";".join(str(s) for s in self.subset_history[i])
            lines.append(f"{i},{repr(float(loss))},{self.horizon_history[i]},{sub},{int(self.frozen_history[i])}")
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary(self) -> dict:
        return {"total_mse": self.total_mse, "per_segment_mse": {str(k): v for k, v in self.per_segment_mse.items()},
                "initial_mse": self.initial_mse, "unfreeze_epoch": self.unfreeze_epoch,
                "best_epoch": self.best_epoch, "epochs_run": len(self.loss_history),
                "wall_time_per_pulse": self.wall_time_per_pulse, "train_time": self.train_time}


# -- data preparation --------------------------------------------------------
def build_dataset(raw: Dataset, heart_rate: float, rate: float = 40.0, label: str = "") -> Dataset:
    """Resample to ``rate`` and keep exactly the last two complete cycles after the first."""
    t = np.asarray(raw.times, dtype=float)
    if t.size < 2:
        raise InsufficientCycles("waveform table needs at least two samples")
    dt = np.diff(t)
    if np.any(dt <= 0) or np.max(np.abs(dt - dt.mean())) > 1e-6 * dt.mean():
        raise NonUniformInput("input time grid must be uniform and strictly increasing")
    raw_rate = 1.0 / dt.mean()
    if raw_rate < rate * (1.0 - 1e-9):
        raise ValidationError(f"input rate {raw_rate:.6g} Hz is below the target rate {rate:g} Hz")
    if not heart_rate > 0:
        raise ValidationError("heart_rate must be positive")
    period = 60.0 / heart_rate
    n_cycles = int(math.floor((t[-1] - t[0] + dt.mean()) / period + 1e-9))
    if n_cycles < 3:
        raise InsufficientCycles(f"need at least 3 cardiac cycles, data covers {n_cycles}")
    t0 = t[0]
    lo, hi = t0 + (n_cycles - 2) * period, t0 + n_cycles * period
    k = np.arange(math.ceil((lo - t0) * rate - 1e-9), math.floor((hi - t0) * rate - 1e-9) + 1)
    grid = t0 + k / rate
    grid = grid[(grid >= lo - 1e-12) & (grid < hi - 1e-12) & (grid <= t[-1] + 1e-12)]
    p = np.empty((grid.size, raw.n_obs))
    for j in range(raw.n_obs):
        p[:, j] = np.interp(grid, t, raw.pressures[:, j])
    patient = dict(raw.patient)
    patient["heart_rate"] = float(heart_rate)
    if label:
        patient["label"] = label
    patient["cycles_in_source"] = n_cycles
    return Dataset(grid, p, raw.segment_ids, patient, float(rate))


def heart_for(data: Dataset, template: HeartProfile) -> HeartProfile:
    """``template`` at the dataset's heart rate."""
    hr = data.heart_rate or template.heart_rate
    return HeartProfile(hr, template.stroke_volume, template.systolic_fraction, template.table)


# -- loss, subsets, optimizer ------------------------------------------------
def loss_mse_horizon(pred, data: Dataset, horizon: int, subset) -> float:
    """MSE over the first ``horizon`` samples of the ``subset`` columns.

    ``pred`` is a (samples x n_obs) array of observed pressures on the
    data grid.
    """
    return _loss_and_grad(np.asarray(pred, dtype=float), data.pressures, horizon, subset)[0]


def _loss_and_grad(pred, target, horizon, subset):
    subset = np.asarray(list(subset), dtype=int)
    if pred.ndim != 2 or pred.shape[1] != target.shape[1]:
        raise DimensionMismatch(f"prediction shape {pred.shape} does not match data {target.shape}")
    if subset.size == 0:
        raise DimensionMismatch("subset must not be empty")
    if not 1 <= horizon <= min(pred.shape[0], target.shape[0]):
        raise DimensionMismatch(f"horizon {horizon} outside [1, {min(pred.shape[0], target.shape[0])}]")
    err = pred[:horizon, subset] - target[:horizon, subset]
    n = err.size
    grad = np.zeros_like(pred)
    grad[:horizon, subset] = 2.0 * err / n
    return float(np.sum(err * err) / n), grad


def sample_subset(rng: np.random.Generator, n_obs: int, k: int) -> np.ndarray:
    if not 1 <= k <= n_obs:
        raise ValidationError(f"subset size {k} must lie in [1, {n_obs}]")
    return np.sort(rng.choice(n_obs, size=k, replace=False))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), np.zeros(n, dtype=np.int64))


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, mask=None):
    """One Adam update with bias correction; returns ``(params, state)``.

    The step counter is kept per entry and only advances where ``mask`` is
    set, so a group unfrozen late starts with fresh bias correction.
    Entries outside ``mask`` are left untouched.
    """
    params = np.array(params, dtype=float)
    g = np.asarray(grads, dtype=float)
    if params.shape != g.shape or state.m.shape != g.shape:
        raise DimensionMismatch("params, grads and moments must share a shape")
    active = np.ones(g.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    m, v, t = state.m.copy(), state.v.copy(), state.t.copy()
    t[active] += 1
    m[active] = beta1 * m[active] + (1.0 - beta1) * g[active]
    v[active] = beta2 * v[active] + (1.0 - beta2) * g[active] ** 2
    ta = t[active]
    m_hat = m[active] / (1.0 - beta1 ** ta)
    v_hat = v[active] / (1.0 - beta2 ** ta)
    params[active] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, AdamState(m, v, t)


def horizon_at(epoch: int, cfg: TrainConfig, n_samples: int) -> int:
    """Growing horizon; the full window is forced for the last epochs."""
    h = cfg.horizon_initial + cfg.horizon_increment * (epoch // cfg.horizon_cadence)
    if cfg.epochs and epoch >= math.floor((1.0 - cfg.full_horizon_fraction) * cfg.epochs):
        h = n_samples
    return int(min(max(h, 1), n_samples))


# -- rollouts ----------------------------------------------------------------
def _rollout_setup(m, data: Dataset, heart: HeartProfile, step: float, horizon: Optional[int] = None):
    inner = getattr(m, "inner", m)
    fluid = inner.fluid
    x0 = inner.steady_state(heart.mean_volume_flow * fluid.density)
    times = data.times if horizon is None else data.times[:horizon]
    cfg = SolverConfig(method="rk4", fixed_step=step, save_times=times)
    return x0, inflow_input(heart, fluid), cfg


def simulate_on(m, data: Dataset, heart: HeartProfile, step: float = 1.0 / 160.0):
    """Roll ``m`` out from t=0 onto the data grid; returns ``(observed, trajectory)``."""
    x0, u, cfg = _rollout_setup(m, data, heart, step)
    f = getattr(m, "rhs", None) or m.derivatives
    traj, _ = integrate(f, x0, u, cfg, t0=0.0)
    return m.observe(traj.states), traj


def _mse_report(pred, data: Dataset):
    err = pred - data.pressures
    per = np.mean(err * err, axis=0)
    return {sid: float(v) for sid, v in zip(data.segment_ids, per)}, float(np.mean(err * err))


def evaluate(m, data: Dataset, heart: HeartProfile = None, step: float = 1.0 / 160.0) -> Metrics:
    """Warm-up cycle plus full window; MSE on every observed segment."""
    heart = heart_for(data, heart or getattr(getattr(m, "inner", m), "heart", HeartProfile()))
    t_start = time.perf_counter()
    pred, traj = simulate_on(m, data, heart, step)
    wall = time.perf_counter() - t_start
    per, total = _mse_report(pred, data)
    met = Metrics(per_segment_mse=per, total_mse=total)
    met.wall_time_per_pulse = wall / (data.times[-1] / heart.period)
    return met


def train(m: HybridModel, data: Dataset, cfg: TrainConfig, heart: HeartProfile = None, log=None):
    """Fit ``m`` to ``data`` in place; returns ``(best ParameterVector, Metrics)``."""
    cfg.validate(data.n_obs, data.n_samples)
    heart = heart_for(data, heart or m.inner.heart)
    rng = np.random.default_rng(cfg.rng_seed)
    n = data.n_samples
    obs_idx = np.asarray(m.inner.observed_index, dtype=int)
    norm = float(np.mean(np.var(data.pressures, axis=0))) or 1.0
    t_start = time.perf_counter()

    base_pred, _ = simulate_on(m.inner, data, heart, cfg.solver_step)
    met = Metrics()
    met.initial_mse = _mse_report(simulate_on(m, data, heart, cfg.solver_step)[0], data)[1]

    params = m.params
    params.freeze("derivative_ann", True)
    state = AdamState.zeros(params.size)
    best = (math.inf, params.flat.copy(), None)
    last_finite = params.flat.copy()

    for epoch in range(cfg.epochs):
        horizon = horizon_at(epoch, cfg, n)
        subset = sample_subset(rng, data.n_obs, cfg.subset_size)
        x0, u, scfg = _rollout_setup(m, data, heart, cfg.solver_step, horizon)

        def loss_fn(traj):
            pred = traj.states[:, obs_idx]
            val, g_obs = _loss_and_grad(pred, data.pressures, horizon, subset)
            dl = np.zeros_like(traj.states)
            dl[:, obs_idx] = g_obs / norm
            return val, dl

        try:
            value, g_par, _, traj = loss_gradient(m, x0, u, scfg, loss_fn, t0=0.0)
        except NonFiniteState as exc:
            raise Diverged(f"rollout diverged at epoch {epoch}: {exc}", params=last_finite, epoch=epoch) from None
        if not (math.isfinite(value) and np.isfinite(g_par).all()):
            raise Diverged(f"non-finite loss at epoch {epoch}", params=last_finite, epoch=epoch)
        last_finite = params.flat.copy()
        frozen = params.frozen["derivative_ann"]
        met.loss_history.append(value)
        met.horizon_history.append(horizon)
        met.subset_history.append(tuple(data.segment_ids[i] for i in subset))
        met.frozen_history.append(frozen)

        if horizon == n:
            full = _mse_report(traj.states[:, obs_idx], data)[1]
            if full < best[0]:
                best = (full, params.flat.copy(), epoch)

        base = _loss_and_grad(base_pred, data.pressures, horizon, subset)[0]
        rel = value / base if base > 0 else 0.0
        if frozen and (rel <= cfg.unfreeze_threshold
                       or (cfg.max_frozen_epochs is not None and epoch >= cfg.max_frozen_epochs)):
            params.freeze("derivative_ann", False)
            met.unfreeze_epoch = epoch
            frozen = False
            # the gradient above was masked; recompute it for the unfrozen set
            value, g_par, _, _ = loss_gradient(m, x0, u, scfg, loss_fn, t0=0.0)

        gnorm = float(np.linalg.norm(g_par))
        if gnorm > cfg.grad_clip:
            g_par = g_par * (cfg.grad_clip / gnorm)
        params.flat[:], state = adam_step(params.flat, g_par, state, cfg.learning_rate, cfg.beta1, cfg.beta2,
                                          cfg.adam_eps, mask=params.trainable_mask())
        if log is not None:
            log(epoch, value, horizon, subset, frozen)

    final_pred, _ = simulate_on(m, data, heart, cfg.solver_step)
    per, total = _mse_report(final_pred, data)
    if total <= best[0]:
        best = (total, params.flat.copy(), cfg.epochs)
    params.flat[:] = best[1]
    met.best_epoch = best[2]
    if best[2] != cfg.epochs:
        per, total = _mse_report(simulate_on(m, data, heart, cfg.solver_step)[0], data)
    met.per_segment_mse, met.total_mse = per, total
    met.train_time = time.perf_counter() - t_start
    return params, met


def prepare_hybrid(inner, data: Dataset, variant: str, heart: HeartProfile = None, seed: int = 0,
                   hidden_width: int = 30, skip: bool = True, step: float = 1.0 / 160.0) -> HybridModel:
    """Fresh hybrid around ``inner`` with scalers fitted to ``data``.

    LC flow channels have no measurement; their scalers come from a
    rollout of the inner model on the data grid.
    """
    topo = build_topology(inner.partition.n_wk, data.n_obs, variant, hidden_width)
    flows = None
    if topo.variant == "LC":
        heart = heart_for(data, heart or inner.heart)
        _, traj = simulate_on(inner, data, heart, step)
        flows = traj.states[:, inner.partition.n_wk + data.n_obs:]
    return HybridModel(inner, topo, init_params(topo, seed), fit_scalers(data, topo, flows), skip=skip, seed=seed)


# -- timing ------------------------------------------------------------------
def benchmark(models: dict, heart: HeartProfile, n_pulses: int = 3, repetitions: int = 3, solvers: dict = None):
    """Median wall time per simulated pulse wave for each named model.

    ``solvers`` maps a model name to its SolverConfig (save times are set
    here); the default is RK4 at the training step.  One warm-up run per
    model is excluded.
    """
    if repetitions < 3:
        raise ValidationError("benchmark needs at least 3 repetitions")
    solvers = solvers or {}
    report = {"n_pulses": n_pulses, "repetitions": repetitions, "models": {}}
    t_end = n_pulses * heart.period
    for name, m in models.items():
        base = solvers.get(name) or SolverConfig(method="rk4", save_times=[t_end])
        inner = getattr(m, "inner", m)
        fluid = inner.fluid
        x0 = inner.steady_state(heart.mean_volume_flow * fluid.density)
        u = inflow_input(heart, fluid)
        f = getattr(m, "rhs", None) or m.derivatives
        cfg = SolverConfig(base.method, base.fixed_step, base.rel_tol, base.abs_tol, base.max_steps,
                           np.array([t_end]), base.adaptive)
        integrate(f, x0, u, cfg, t0=0.0)
        samples = []
        for _ in range(repetitions):
            t_start = time.perf_counter()
            traj, _ = integrate(f, x0, u, cfg, t0=0.0)
            samples.append((time.perf_counter() - t_start) / n_pulses)
        report["models"][name] = {"samples": samples, "median": float(np.median(samples)),
                                  "solver": cfg.describe(), "n_states": len(x0),
                                  "n_rhs_evals": traj.stats["n_rhs_evals"]}
    return report
