"""In-process model-exchange contract.

A model exposes state derivatives for a given ``(t, x, u)``; an external
solver integrates them.  Jacobian products come from the model's own
structural path when it has one (``jvp``/``vjp``), or from central finite
differences (``jvp_fd``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CapabilityMissing, DimensionMismatch, NonFiniteInput, NonFiniteResult

DEFAULT_FD_EPS = 1e-6
DENSE_FALLBACK_MAX_STATES = 256


@dataclass(frozen=True)
class StatePartition:
    """Split of the concatenated state ``x = x_wk | x_art``.

    ``art_indices`` defaults to the trailing ``n_art`` entries.
    """

    n_wk: int
    n_art: int
    art_indices: tuple = None

    def __post_init__(self):
        if self.n_wk < 0 or self.n_art < 0:
            raise ValueError("state counts must be non-negative")
        n = self.n_wk + self.n_art
        if self.art_indices is None:
            object.__setattr__(self, "art_indices", tuple(range(self.n_wk, n)))
        else:
            object.__setattr__(self, "art_indices", tuple(int(i) for i in self.art_indices))
        idx = self.art_indices
        if len(idx) != self.n_art or len(set(idx)) != self.n_art:
            raise ValueError("art_indices must hold n_art distinct entries")
        if any(i < 0 or i >= n for i in idx):
            raise ValueError("art_indices out of range")
        art = set(idx)
        object.__setattr__(self, "_wk", np.array([i for i in range(n) if i not in art], dtype=int))
        object.__setattr__(self, "_art", np.array(idx, dtype=int))

    @property
    def n_states(self) -> int:
        return self.n_wk + self.n_art

    @property
    def wk_index(self) -> np.ndarray:
        return self._wk

    @property
    def art_index(self) -> np.ndarray:
        return self._art

    def split(self, x):
        x = np.asarray(x)
        return x[..., self._wk], x[..., self._art]

    def merge(self, x_wk, x_art):
        x_wk = np.asarray(x_wk)
        x_art = np.asarray(x_art)
        shape = x_wk.shape[:-1] + (self.n_states,)
        out = np.empty(shape, dtype=np.result_type(x_wk, x_art))
        out[..., self._wk] = x_wk
        out[..., self._art] = x_art
        return out


@dataclass(frozen=True)
class MEModelDescription:
    state_names: tuple
    input_names: tuple
    partition: StatePartition
    n_states: int = field(init=False)
    n_inputs: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "state_names", tuple(self.state_names))
        object.__setattr__(self, "input_names", tuple(self.input_names))
        object.__setattr__(self, "n_states", len(self.state_names))
        object.__setattr__(self, "n_inputs", len(self.input_names))
        if len(set(self.state_names)) != self.n_states:
            raise ValueError("state names must be unique")
        if len(set(self.input_names)) != self.n_inputs:
            raise ValueError("input names must be unique")
        if self.partition.n_states != self.n_states:
            raise ValueError(
                f"partition covers {self.partition.n_states} states, description has {self.n_states}"
            )


def _vector(a, n, what):
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.shape[0] != n:
        raise DimensionMismatch(f"{what}: expected length {n}, got shape {a.shape}")
    return a


class ModelInstance:
    """Base class for model-exchange models.

    Subclasses implement ``_derivatives`` and optionally ``_jvp``/``_vjp``,
    setting ``provides_jvp``/``provides_vjp`` accordingly.  Instances own
    mutable scratch and are not meant to be shared between threads.
    """

    provides_jvp = False
    provides_vjp = False

    def __init__(self, description: MEModelDescription, parameters=()):
        self.description = description
        self.parameters = np.array(parameters, dtype=float)
        self.parameters.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.description.n_states

    @property
    def n_inputs(self) -> int:
        return self.description.n_inputs

    @property
    def partition(self) -> StatePartition:
        return self.description.partition

    def _derivatives(self, t, x, u):
        raise NotImplementedError

    def _jvp(self, t, x, u, v_x, v_u):
        raise CapabilityMissing(f"{type(self).__name__} has no analytic jvp")

    def _vjp(self, t, x, u, w):
        raise CapabilityMissing(f"{type(self).__name__} has no analytic vjp")

    def _check(self, x, u):
        x = _vector(x, self.n_states, "state")
        u = _vector(u, self.n_inputs, "input")
        if not (np.isfinite(x).all() and np.isfinite(u).all()):
            raise NonFiniteInput("state or input contains NaN/Inf")
        return x, u

    def derivatives(self, t, x, u):
        x, u = self._check(x, u)
        return self._derivatives(float(t), x, u)

    def jvp(self, t, x, u, v_x, v_u=None):
        return jvp(self, t, x, u, v_x, v_u)

    def vjp(self, t, x, u, w):
        return vjp(self, t, x, u, w)


class FunctionModel(ModelInstance):
    """Model built from plain callables.

    ``f(t, x, u)`` returns the derivatives; ``jac(t, x, u)`` (optional)
    returns the pair ``(df/dx, df/du)`` as dense arrays.
    """

    def __init__(self, f: Callable, n_states: int, n_inputs: int = 0,
                 jac: Optional[Callable] = None, partition: Optional[StatePartition] = None,
                 state_names: Optional[Sequence[str]] = None):
        names = state_names or [f"x{i}" for i in range(n_states)]
        part = partition or StatePartition(n_states, 0)
        desc = MEModelDescription(names, [f"u{i}" for i in range(n_inputs)], part)
        super().__init__(desc)
        self._f = f
        self._jac = jac
        self.provides_jvp = jac is not None
        self.provides_vjp = jac is not None

    def _derivatives(self, t, x, u):
        return np.asarray(self._f(t, x, u), dtype=float)

    def _jvp(self, t, x, u, v_x, v_u):
        if self._jac is None:
            return super()._jvp(t, x, u, v_x, v_u)
        jx, ju = self._jac(t, x, u)
        out = np.asarray(jx) @ v_x
        if self.n_inputs:
            out = out + np.asarray(ju) @ v_u
        return out

    def _vjp(self, t, x, u, w):
        if self._jac is None:
            return super()._vjp(t, x, u, w)
        jx, ju = self._jac(t, x, u)
        w_u = np.asarray(ju).T @ w if self.n_inputs else np.zeros(0)
        return np.asarray(jx).T @ w, w_u


def derivatives(m: ModelInstance, t, x, u):
    return m.derivatives(t, x, u)


def jvp(m: ModelInstance, t, x, u, v_x, v_u=None):
    """Directional derivative ``(df/dx) v_x + (df/du) v_u`` via the model's analytic path."""
    x, u = m._check(x, u)
    v_x = _vector(v_x, m.n_states, "v_x")
    v_u = np.zeros(m.n_inputs) if v_u is None else _vector(v_u, m.n_inputs, "v_u")
    if not m.provides_jvp:
        raise CapabilityMissing(f"{type(m).__name__} does not provide an analytic jvp; use jvp_fd")
    return m._jvp(float(t), x, u, v_x, v_u)


def jvp_fd(m: ModelInstance, t, x, u, v_x, v_u=None, eps: float = DEFAULT_FD_EPS):
    """Central-difference directional derivative with step ``eps * max(1, |x|_inf)``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    x, u = m._check(x, u)
    v_x = _vector(v_x, m.n_states, "v_x")
    v_u = np.zeros(m.n_inputs) if v_u is None else _vector(v_u, m.n_inputs, "v_u")
    h = eps * max(1.0, float(np.max(np.abs(x))) if x.size else 1.0)
    t = float(t)
    fp = m._derivatives(t, x + h * v_x, u + h * v_u)
    fm = m._derivatives(t, x - h * v_x, u - h * v_u)
    if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
        raise NonFiniteResult("perturbed evaluation produced NaN/Inf")
    return (fp - fm) / (2.0 * h)


def vjp(m: ModelInstance, t, x, u, w, allow_fd: bool = False, eps: float = DEFAULT_FD_EPS):
    """Reverse product ``(w^T df/dx, w^T df/du)``.

    Falls back to a dense jacobian assembled from basis-vector jvps when the
    model has only a forward path (or, with ``allow_fd``, only finite
    differences).
    """
    x, u = m._check(x, u)
    w = _vector(w, m.n_states, "w")
    t = float(t)
    if m.provides_vjp:
        return m._vjp(t, x, u, w)
    if not (m.provides_jvp or allow_fd):
        raise CapabilityMissing(f"{type(m).__name__} provides neither vjp nor jvp")
    if m.n_states > DENSE_FALLBACK_MAX_STATES:
        raise CapabilityMissing(
            f"dense vjp fallback limited to {DENSE_FALLBACK_MAX_STATES} states, model has {m.n_states}"
        )
    jx, ju = jacobian(m, t, x, u, fd=not m.provides_jvp, eps=eps)
    return jx.T @ w, ju.T @ w


def jacobian(m: ModelInstance, t, x, u, fd: bool = False, eps: float = DEFAULT_FD_EPS):
    """Dense ``(df/dx, df/du)`` from basis-vector products."""
    n, k = m.n_states, m.n_inputs
    jx = np.empty((n, n))
    ju = np.empty((n, k))
    zx, zu = np.zeros(n), np.zeros(k)
    prod = (lambda a, b: jvp_fd(m, t, x, u, a, b, eps)) if fd else (lambda a, b: jvp(m, t, x, u, a, b))
    for i in range(n):
        e = zx.copy()
        e[i] = 1.0
        jx[:, i] = prod(e, zu)
    for j in range(k):
        e = zu.copy()
        e[j] = 1.0
        ju[:, j] = prod(zx, e)
    return jx, ju
