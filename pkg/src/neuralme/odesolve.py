"""Explicit Runge-Kutta integration and backprop through recorded RK4 steps.

``integrate`` runs classic RK4 on a fixed grid (save times are hit exactly
by subdividing each save interval into equal steps) or Dormand-Prince 5(4)
with PI step control and dense output.  ``loss_gradient`` differentiates a
trajectory loss through the RK4 recursion exactly as it was computed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import MaxStepsExceeded, NonFiniteState, StepUnderflow, TapeMissing


@dataclass(frozen=True)
class ButcherTableau:
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray
    b_err: Optional[np.ndarray] = None
    order: int = 4
    dense: Optional[np.ndarray] = None
    fsal: bool = False


RK4 = ButcherTableau(
    c=np.array([0.0, 0.5, 0.5, 1.0]),
    a=np.array([[0, 0, 0, 0], [0.5, 0, 0, 0], [0, 0.5, 0, 0], [0, 0, 1.0, 0]]),
    b=np.array([1 / 6, 1 / 3, 1 / 3, 1 / 6]),
    order=4,
)

# Dormand & Prince (1980); dense-output matrix after Shampine (1986).
DOPRI5 = ButcherTableau(
    c=np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1]),
    a=np.array([
        [0, 0, 0, 0, 0, 0, 0],
        [1 / 5, 0, 0, 0, 0, 0, 0],
        [3 / 40, 9 / 40, 0, 0, 0, 0, 0],
        [44 / 45, -56 / 15, 32 / 9, 0, 0, 0, 0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0, 0, 0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0, 0],
        [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0],
    ]),
    b=np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0]),
    b_err=np.array([71 / 57600, 0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]),
    order=5,
    dense=np.array([
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]),
    fsal=True,
)


@dataclass
class SolverConfig:
    method: str = "rk4"
    fixed_step: float = 1.0 / 160.0
    rel_tol: float = 1e-6
    abs_tol: float = 1e-6
    max_steps: int = 10_000_000
    save_times: np.ndarray = None
    adaptive: bool = True
    first_step: Optional[float] = None

    def __post_init__(self):
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown method {self.method!r}; use 'rk4' or 'rk45'")
        if not self.fixed_step > 0:
            raise ValueError("fixed_step must be positive")
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.save_times is None:
            raise ValueError("save_times is required")
        st = np.asarray(self.save_times, dtype=float)
        if st.ndim != 1 or st.size == 0 or np.any(np.diff(st) <= 0):
            raise ValueError("save_times must be a non-empty strictly increasing grid")
        self.save_times = st

    def describe(self) -> dict:
        return {"method": self.method, "fixed_step": self.fixed_step, "rel_tol": self.rel_tol,
                "abs_tol": self.abs_tol, "max_steps": self.max_steps, "adaptive": self.adaptive}


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    stats: dict = field(default_factory=dict)

    def observed(self, index) -> np.ndarray:
        return self.states[:, index]


@dataclass
class TapeStep:
    t: float
    h: float
    x: np.ndarray
    stages: list
    save_index: int


@dataclass
class AdjointTape:
    """Accepted steps with their stage inputs, in integration order."""

    t0: float
    x0: np.ndarray
    method: str
    steps: list = field(default_factory=list)
    initial_save: bool = False

    def replay(self, f: Callable, u) -> np.ndarray:
        """Re-run the recorded steps from ``x0``; returns the final state."""
        u = _input_fn(u)
        tab = RK4 if self.method == "rk4" else DOPRI5
        x = self.x0.copy()
        for s in self.steps:
            x, _ = _rk_step(f, u, tab, s.t, x, s.h)
        return x


def _input_fn(u):
    if u is None:
        empty = np.zeros(0)
        return lambda t: empty
    if callable(u):
        return u
    const = np.atleast_1d(np.asarray(u, dtype=float))
    return lambda t: const


def _rk_step(f, u, tab: ButcherTableau, t, x, h, k1=None):
    """One explicit RK step; returns ``(x_new, stage_inputs)`` (and keeps stage slopes on the list)."""
    s = len(tab.c)
    ks = []
    inputs = []
    for i in range(s):
        if i == 0:
            xi = x
        else:
            xi = x.copy()
            for j in range(i):
                aij = tab.a[i, j]
                if aij != 0.0:
                    xi += (h * aij) * ks[j]
        inputs.append(xi)
        if i == 0 and k1 is not None:
            ks.append(k1)
        else:
            ti = t + tab.c[i] * h
            ks.append(f(ti, xi, u(ti)))
    x_new = x.copy()
    for j in range(s):
        if tab.b[j] != 0.0:
            x_new += (h * tab.b[j]) * ks[j]
    return x_new, (inputs, ks)


def _subdivide(t_a, t_b, h):
    n = max(1, int(math.ceil((t_b - t_a) / h * (1.0 - 1e-12))))
    return n, (t_b - t_a) / n


def integrate(f: Callable, x0, u, cfg: SolverConfig, t0: Optional[float] = None, record_tape: bool = False):
    """Integrate ``x' = f(t, x, u(t))`` from ``t0`` (default: first save time).

    Returns ``(Trajectory, AdjointTape or None)``.
    """
    x = np.array(x0, dtype=float)
    if not np.isfinite(x).all():
        raise NonFiniteState("initial state contains NaN/Inf", time=t0)
    u = _input_fn(u)
    save = cfg.save_times
    t0 = float(save[0]) if t0 is None else float(t0)
    if t0 > save[0]:
        raise ValueError("t0 must not exceed the first save time")
    calls = [0]

    def rhs(t, y, uv):
        calls[0] += 1
        return f(t, y, uv)

    wall = time.perf_counter()
    if cfg.method == "rk4" or not cfg.adaptive:
        tab = RK4 if cfg.method == "rk4" else DOPRI5
        states, tape, n_steps = _fixed(rhs, u, tab, t0, x, cfg, record_tape)
        rejected = 0
    else:
        states, tape, n_steps, rejected = _adaptive(rhs, u, t0, x, cfg, record_tape)
    stats = {"n_rhs_evals": calls[0], "n_steps": n_steps, "n_rejected": rejected,
             "wall_time": time.perf_counter() - wall}
    return Trajectory(save.copy(), states, stats), tape


def _fixed(f, u, tab, t0, x, cfg, record):
    save = cfg.save_times
    states = np.empty((save.size, x.size))
    tape = AdjointTape(t0, x.copy(), "rk4" if tab is RK4 else "rk45") if record else None
    n_steps = 0
    t_prev = t0
    for i, ts in enumerate(save):
        if ts == t_prev:
            states[i] = x
            if i == 0 and tape is not None:
                tape.initial_save = True
            continue
        n, h = _subdivide(t_prev, ts, cfg.fixed_step)
        for k in range(n):
            t = t_prev + k * h
            x_new, (inputs, _) = _rk_step(f, u, tab, t, x, h)
            n_steps += 1
            if n_steps > cfg.max_steps:
                raise MaxStepsExceeded(f"exceeded max_steps={cfg.max_steps} at t={t:.6g}")
            if not np.isfinite(x_new).all():
                raise NonFiniteState(f"non-finite state at t={t + h:.6g}", time=t + h)
            if tape is not None:
                tape.steps.append(TapeStep(t, h, x, inputs, i if k == n - 1 else -1))
            x = x_new
        states[i] = x
        t_prev = ts
    return states, tape, n_steps


def _rms(v):
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


def _initial_step(f, u, t0, x0, f0, rtol, atol, span):
    scale = atol + np.abs(x0) * rtol
    d0, d1 = _rms(x0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    x1 = x0 + h0 * f0
    f1 = f(t0 + h0, x1, u(t0 + h0))
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1, span)


def _adaptive(f, u, t0, x, cfg, record):
    tab = DOPRI5
    save = cfg.save_times
    rtol, atol = cfg.rel_tol, cfg.abs_tol
    states = np.empty((save.size, x.size))
    tape = AdjointTape(t0, x.copy(), "rk45") if record else None
    t = t0
    t_end = float(save[-1])
    i = 0
    while i < save.size and save[i] == t:
        states[i] = x
        if tape is not None and i == 0:
            tape.initial_save = True
        i += 1
    if i == save.size:
        return states, tape, 0, 0
    k1 = f(t, x, u(t))
    h = cfg.first_step or _initial_step(f, u, t, x, k1, rtol, atol, t_end - t)
    beta = 0.04
    alpha = 0.2 - 0.75 * beta
    err_prev = 1e-4
    n_steps = rejected = 0
    while i < save.size:
        min_step = 16 * np.finfo(float).eps * max(abs(t), 1.0)
        if h < min_step:
            raise StepUnderflow(f"step size {h:.3g} underflows at t={t:.6g}")
        last = t + h >= t_end
        if last:
            h = t_end - t
        x_new, (inputs, ks) = _rk_step(f, u, tab, t, x, h, k1)
        n_steps += 1
        if n_steps > cfg.max_steps:
            raise MaxStepsExceeded(f"exceeded max_steps={cfg.max_steps} at t={t:.6g}")
        if not np.isfinite(x_new).all():
            raise NonFiniteState(f"non-finite state at t={t + h:.6g}", time=t + h)
        k7 = ks[6]
        err_vec = h * sum(tab.b_err[j] * ks[j] for j in range(7) if tab.b_err[j] != 0)
        scale = atol + rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = _rms(err_vec / scale)
        if err <= 1.0:
            t_new = t_end if last else t + h
            K = np.array(ks)
            Q = K.T @ tab.dense
            while i < save.size and save[i] <= t_new:
                if save[i] == t_new:
                    states[i] = x_new
                else:
                    th = (save[i] - t) / h
                    states[i] = x + h * (Q @ np.array([th, th ** 2, th ** 3, th ** 4]))
                i += 1
            if tape is not None:
                tape.steps.append(TapeStep(t, h, x, inputs, i - 1))
            err = max(err, 1e-10)
            fac = 0.9 * err ** (-alpha) * err_prev ** beta
            h = h * min(10.0, max(0.2, fac))
            err_prev = err
            t, x, k1 = t_new, x_new, k7
        else:
            rejected += 1
            h = h * max(0.2, 0.9 * err ** (-0.2))
    return states, tape, n_steps, rejected


def backprop(tape: AdjointTape, vjp_fn: Callable, u, dl_dstates: np.ndarray, n_params: int):
    """Reverse pass through recorded RK4 steps.

    ``vjp_fn(t, x, u, w)`` returns ``(w_x, w_params)`` for the right-hand
    side; ``dl_dstates`` holds the loss gradient for every saved state.
    Returns ``(grad_params, grad_x0)``.
    """
    if tape is None or (not tape.steps and not tape.initial_save):
        raise TapeMissing("no recorded steps to backpropagate through")
    if tape.method != "rk4":
        raise TapeMissing("reverse pass needs an RK4 tape")
    u = _input_fn(u)
    lam = np.zeros_like(tape.x0)
    g_par = np.zeros(n_params)
    b = RK4.b
    for s in reversed(tape.steps):
        if s.save_index >= 0:
            lam = lam + dl_dstates[s.save_index]
        h, t = s.h, s.t
        x1, x2, x3, x4 = s.stages
        hb = h * b
        a4 = hb[3] * lam
        gx4, gp4 = vjp_fn(t + h, x4, u(t + h), a4)
        a3 = hb[2] * lam + h * gx4
        gx3, gp3 = vjp_fn(t + 0.5 * h, x3, u(t + 0.5 * h), a3)
        a2 = hb[1] * lam + (0.5 * h) * gx3
        gx2, gp2 = vjp_fn(t + 0.5 * h, x2, u(t + 0.5 * h), a2)
        a1 = hb[0] * lam + (0.5 * h) * gx2
        gx1, gp1 = vjp_fn(t, x1, u(t), a1)
        lam = lam + gx1 + gx2 + gx3 + gx4
        if n_params:
            g_par += gp1 + gp2 + gp3 + gp4
    if tape.initial_save:
        lam = lam + dl_dstates[0]
    return g_par, lam


def loss_gradient(m, x0, u, cfg: SolverConfig, loss: Callable, t0: Optional[float] = None):
    """Loss of an RK4 rollout and its exact gradient w.r.t. parameters and ``x0``.

    ``m`` provides ``derivatives(t, x, u)`` and either ``hybrid_vjp`` (returning
    ``(w_x, w_u, w_params)``) or a plain ``vjp``.  ``loss(traj)`` returns
    ``(value, dvalue/dstates)``.  Returns ``(value, grad_params, grad_x0,
    trajectory)``.
    """
    if cfg.method != "rk4":
        raise ValueError("loss_gradient needs the fixed-grid rk4 method")
    f = getattr(m, "rhs", None) or m.derivatives
    traj, tape = integrate(f, x0, u, cfg, t0=t0, record_tape=True)
    value, dl = loss(traj)
    if hasattr(m, "hybrid_vjp"):
        n_par = m.params.size

        def vjp_fn(t, x, uv, w):
            wx, _, wp = m.hybrid_vjp(t, x, uv, w)
            return wx, wp
    else:
        n_par = 0

        def vjp_fn(t, x, uv, w):
            return m.vjp(t, x, uv, w)[0], None
    g_par, g_x0 = backprop(tape, vjp_fn, u, np.asarray(dl, dtype=float), n_par)
    return value, g_par, g_x0, traj
