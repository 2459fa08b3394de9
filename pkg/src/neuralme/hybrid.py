"""Hybrid model: a first-principle ME model wrapped by two small ANNs.

Layer stack (one row per layer)::

    #1  separation          x -> x_art | x_wk
    #2  pre-processing      x_art, scaled per channel
    #3  bias                trainable state offsets
    #4  post-processing     back to physical units  -> x^_art
    #5  merge               x_wk | x^_art -> x^_fmu
    #6  ME model            x^_fmu -> x'_fmu
    #7  separation          x'_fmu -> x'_art | x'_wk
    #8  pre-processing      x'_art, scaled per channel
    #9  dense + tanh        n_art -> hidden
    #10 dense               hidden -> n_art
    #11 post-processing     back to physical units  -> x^'_art
    #12 merge               x'_wk | x^'_art -> x^'

By default the derivative block is residual: ``x^'_art = x'_art + delta``
with the output layer initialised to zero, so a fresh model reproduces the
inner dynamics exactly.  ``skip=False`` gives the plain stack above.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, ParseError, ValidationError
from .me_interface import MEModelDescription, ModelInstance

GROUPS = ("state_ann", "derivative_ann")


@dataclass
class AffineScaler:
    """``pre(x) = (x - shift) * scale``; ``post`` is its exact inverse."""

    shift: np.ndarray
    scale: np.ndarray
    degenerate: tuple = ()

    def __post_init__(self):
        self.shift = np.array(self.shift, dtype=float)
        self.scale = np.array(self.scale, dtype=float)
        if self.shift.shape != self.scale.shape or self.shift.ndim != 1:
            raise DimensionMismatch("scaler shift and scale must be vectors of equal length")
        if np.any(self.scale == 0) or not np.isfinite(self.scale).all():
            raise ValidationError("scaler entries must be finite and non-zero")

    @classmethod
    def identity(cls, n: int) -> "AffineScaler":
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, samples) -> "AffineScaler":
        """Per-channel mean and inverse std; constant channels get scale 1."""
        samples = np.asarray(samples, dtype=float)
        if samples.ndim != 2 or samples.shape[0] == 0:
            raise ValidationError("scaler fit needs a non-empty (samples x channels) array")
        mean = samples.mean(axis=0)
        std = samples.std(axis=0)
        tiny = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        scale = np.where(tiny, 1.0, 1.0 / np.where(tiny, 1.0, std))
        return cls(mean, scale, tuple(int(i) for i in np.flatnonzero(tiny)))

    @property
    def size(self) -> int:
        return self.shift.size

    def pre(self, x):
        return (np.asarray(x) - self.shift) * self.scale

    def post(self, y):
        return np.asarray(y) / self.scale + self.shift

    def post_delta(self, dy):
        """Physical-unit size of a change ``dy`` in scaled units."""
        return np.asarray(dy) / self.scale


@dataclass
class ScalerSet:
    state: AffineScaler
    deriv: AffineScaler

    @property
    def degenerate(self) -> dict:
        return {"state": self.state.degenerate, "deriv": self.deriv.degenerate}


@dataclass(frozen=True)
class Layer:
    index: int
    kind: str
    n_in: int
    n_out: str
    activation: str = ""

    def row(self) -> tuple:
        return (self.index, self.kind, self.n_in, self.n_out, self.activation)


@dataclass(frozen=True)
class HybridTopology:
    n_wk: int
    n_obs: int
    variant: str
    hidden_width: int = 30
    layers: tuple = field(init=False)

    def __post_init__(self):
        v = {"c": "C", "lc": "LC", "simple_c": "C", "simple_lc": "LC"}.get(str(self.variant).lower())
        if v is None:
            raise ValidationError(f"hybrid variant must be C or LC, got {self.variant!r}")
        object.__setattr__(self, "variant", v)
        for name in ("n_wk", "n_obs", "hidden_width"):
            if not int(getattr(self, name)) > 0:
                raise ValidationError(f"{name} must be positive")
        n, a, w, hdn = self.n_states, self.n_art, self.n_wk, self.hidden_width
        layers = (
            Layer(1, "separation", n, f"{a}|{w}"),
            Layer(2, "pre-processing", a, str(a)),
            Layer(3, "bias", a, str(a)),
            Layer(4, "post-processing", a, str(a)),
            Layer(5, "merge", a + w, str(n)),
            Layer(6, "FMU", n, str(n)),
            Layer(7, "separation", n, f"{a}|{w}"),
            Layer(8, "pre-processing", a, str(a)),
            Layer(9, "dense", a, str(hdn), "tanh"),
            Layer(10, "dense", hdn, str(a)),
            Layer(11, "post-processing", a, str(a)),
            Layer(12, "merge", a + w, str(n)),
        )
        object.__setattr__(self, "layers", layers)

    @property
    def n_art(self) -> int:
        return self.n_obs * (2 if self.variant == "LC" else 1)

    @property
    def n_states(self) -> int:
        return self.n_wk + self.n_art

    @property
    def n_params(self) -> int:
        a, h = self.n_art, self.hidden_width
        return a + (a * h + h) + (h * a + a)

    def table(self) -> str:
        lines = [f"{'#':>3}  {'layer':<16}{'in':>6}  {'out':<8}{'activation'}"]
        for lay in self.layers:
            lines.append(f"{lay.index:>3}  {lay.kind:<16}{lay.n_in:>6}  {lay.n_out:<8}{lay.activation or '-'}")
        return "\n".join(lines)


def build_topology(n_wk: int, n_obs: int, variant: str, hidden_width: int = 30) -> HybridTopology:
    return HybridTopology(int(n_wk), int(n_obs), variant, int(hidden_width))


class ParameterVector:
    """Flat trainable parameters with named views.

    Order: state_bias (n_art), dense1_w (hidden x n_art, row-major),
    dense1_b (hidden), dense2_w (n_art x hidden), dense2_b (n_art).
    """

    def __init__(self, topology: HybridTopology, flat=None):
        self.topology = topology
        a, h = topology.n_art, topology.hidden_width
        self.flat = np.zeros(topology.n_params) if flat is None else np.array(flat, dtype=float)
        if self.flat.shape != (topology.n_params,):
            raise DimensionMismatch(f"expected {topology.n_params} parameters, got {self.flat.shape}")
        sizes = [("state_bias", (a,)), ("dense1_w", (h, a)), ("dense1_b", (h,)),
                 ("dense2_w", (a, h)), ("dense2_b", (a,))]
        self.slices = {}
        off = 0
        for name, shape in sizes:
            n = int(np.prod(shape))
            self.slices[name] = (slice(off, off + n), shape)
            off += n
        self.frozen = {g: False for g in GROUPS}

    def view(self, name: str, flat=None) -> np.ndarray:
        sl, shape = self.slices[name]
        return (self.flat if flat is None else flat)[sl].reshape(shape)

    @property
    def state_bias(self):
        return self.view("state_bias")

    @property
    def dense1_weights(self):
        return self.view("dense1_w")

    @property
    def dense1_bias(self):
        return self.view("dense1_b")

    @property
    def dense2_weights(self):
        return self.view("dense2_w")

    @property
    def dense2_bias(self):
        return self.view("dense2_b")

    @property
    def size(self) -> int:
        return self.flat.size

    def group_mask(self, group: str) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        names = ("state_bias",) if group == "state_ann" else ("dense1_w", "dense1_b", "dense2_w", "dense2_b")
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        for n in names:
            mask[self.slices[n][0]] = True
        return mask

    def trainable_mask(self) -> np.ndarray:
        mask = np.ones(self.size, dtype=bool)
        for g, f in self.frozen.items():
            if f:
                mask &= ~self.group_mask(g)
        return mask

    def freeze(self, group: str, frozen: bool = True) -> None:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        self.frozen[group] = bool(frozen)

    def copy(self) -> "ParameterVector":
        other = ParameterVector(self.topology, self.flat)
        other.frozen = dict(self.frozen)
        return other


def init_params(topology: HybridTopology, rng_seed: int = 0) -> ParameterVector:
    """Zero state bias, Glorot-uniform first dense layer, zero output layer."""
    p = ParameterVector(topology)
    rng = np.random.default_rng(rng_seed)
    a, h = topology.n_art, topology.hidden_width
    bound = math.sqrt(6.0 / (a + h))
    p.view("dense1_w")[...] = rng.uniform(-bound, bound, size=(h, a))
    return p


def _finite_difference_rate(times, values):
    times = np.asarray(times, dtype=float)
    if times.size < 2:
        raise ValidationError("derivative estimate needs at least two samples")
    return np.gradient(np.asarray(values, dtype=float), times, axis=0)


def fit_scalers(data, topology: HybridTopology, flow_states=None) -> ScalerSet:
    """Per-channel scalers from training pressures and their rate of change.

    LC flow channels are not measured; their statistics come from
    ``flow_states`` (time x n_obs inductor flows, e.g. from a plain model
    simulation on the data grid) when given, else they default to identity.
    """
    p = np.asarray(data.pressures, dtype=float)
    if p.shape[1] != topology.n_obs:
        raise DimensionMismatch(f"dataset has {p.shape[1]} channels, topology expects {topology.n_obs}")
    dp = _finite_difference_rate(data.times, p)
    if topology.variant == "LC":
        if flow_states is None:
            q = np.zeros_like(p)
        else:
            q = np.asarray(flow_states, dtype=float)
            if q.shape != p.shape:
                raise DimensionMismatch("flow_states must match the pressure table shape")
        p = np.hstack([p, q])
        dp = np.hstack([dp, _finite_difference_rate(data.times, q)])
    return ScalerSet(AffineScaler.fit(p), AffineScaler.fit(dp))


class HybridModel(ModelInstance):
    """Hybrid right-hand side around an inner ME model.

    Behaves as a model-exchange model itself (``derivatives``, ``jvp``,
    ``vjp`` with respect to state and input) and adds ``hybrid_vjp`` for
    parameter gradients.
    """

    provides_jvp = True
    provides_vjp = True

    def __init__(self, inner: ModelInstance, topology: HybridTopology, params: ParameterVector = None,
                 scalers: ScalerSet = None, skip: bool = True, bypass_mode: bool = False, seed: int = 0):
        part = inner.partition
        if part.n_wk != topology.n_wk or part.n_art != topology.n_art:
            raise DimensionMismatch(
                f"inner partition {part.n_wk}|{part.n_art} does not match topology {topology.n_wk}|{topology.n_art}"
            )
        super().__init__(MEModelDescription(inner.description.state_names, inner.description.input_names, part))
        self.inner = inner
        self.topology = topology
        self.params = params if params is not None else init_params(topology, seed)
        if self.params.topology != topology:
            raise DimensionMismatch("parameter vector belongs to a different topology")
        a = topology.n_art
        self.scalers = scalers or ScalerSet(AffineScaler.identity(a), AffineScaler.identity(a))
        if self.scalers.state.size != a or self.scalers.deriv.size != a:
            raise DimensionMismatch(f"scalers must have {a} channels")
        self.skip = bool(skip)
        self.bypass_mode = bool(bypass_mode)
        self.seed = seed
        self._wk = part.wk_index
        self._art = part.art_index
        self._inner_f = inner._derivatives

    # -- forward -----------------------------------------------------------
    def _layers(self, flat=None):
        p = self.params
        return (p.view("state_bias", flat), p.view("dense1_w", flat), p.view("dense1_b", flat),
                p.view("dense2_w", flat), p.view("dense2_b", flat))

    def _shifted(self, x, bias):
        xf = x.copy()
        xf[self._art] = x[self._art] + bias / self.scalers.state.scale
        return xf

    def _forward(self, t, x, u, flat=None):
        bias, w1, b1, w2, b2 = self._layers(flat)
        sd = self.scalers.deriv
        xf = self._shifted(x, bias)
        dx = self._inner_f(t, xf, u)
        z = (dx[self._art] - sd.shift) * sd.scale
        act = np.tanh(w1 @ z + b1)
        y = w2 @ act + b2
        out = dx.copy()
        out[self._art] = dx[self._art] + y / sd.scale if self.skip else y / sd.scale + sd.shift
        return out, (xf, dx, z, act)

    def _derivatives(self, t, x, u):
        if self.bypass_mode:
            return self._inner_f(t, x, u)
        return self._forward(t, x, u)[0]

    def rhs(self, t, x, u):
        """Unchecked right-hand side used by the solvers."""
        if self.bypass_mode:
            return self._inner_f(t, x, u)
        return self._forward(t, x, u)[0]

    def observe(self, states) -> np.ndarray:
        return self.inner.observe(states)

    # -- derivatives of the stack ------------------------------------------
    def _jvp(self, t, x, u, v_x, v_u):
        if self.bypass_mode:
            return self.inner.jvp(t, x, u, v_x, v_u)
        _, (xf, _, _, act) = self._forward(t, x, u)
        _, w1, _, w2, _ = self._layers()
        sd = self.scalers.deriv
        ddx = self.inner.jvp(t, xf, u, v_x, v_u)
        dz = ddx[self._art] * sd.scale
        dy = w2 @ ((1.0 - act * act) * (w1 @ dz))
        out = ddx.copy()
        out[self._art] = (ddx[self._art] if self.skip else 0.0) + dy / sd.scale
        return out

    def _vjp(self, t, x, u, w):
        w_x, w_u, _ = self._reverse(t, x, u, w)
        return w_x, w_u

    def _reverse(self, t, x, u, w):
        if self.bypass_mode:
            w_x, w_u = self.inner.vjp(t, x, u, w)
            return w_x, w_u, np.zeros(self.params.size)
        _, (xf, dx, z, act) = self._forward(t, x, u)
        _, w1, _, w2, _ = self._layers()
        sd, ss = self.scalers.deriv, self.scalers.state
        w_art = w[self._art]
        g_y = w_art / sd.scale
        g_h = (w2.T @ g_y) * (1.0 - act * act)
        g_z = w1.T @ g_h
        w_dx = w.copy()
        w_dx[self._art] = (w_art if self.skip else 0.0) + g_z * sd.scale
        w_xf, w_u = self.inner.vjp(t, xf, u, w_dx)
        grad = np.empty(self.params.size)
        p = self.params
        p.view("state_bias", grad)[...] = w_xf[self._art] / ss.scale
        p.view("dense1_w", grad)[...] = np.outer(g_h, z)
        p.view("dense1_b", grad)[...] = g_h
        p.view("dense2_w", grad)[...] = np.outer(g_y, act)
        p.view("dense2_b", grad)[...] = g_y
        if any(p.frozen.values()):
            grad[~p.trainable_mask()] = 0.0
        return w_xf, w_u, grad

    def hybrid_vjp(self, t, x, u, w):
        """Reverse product through the whole stack: ``(w_x, w_u, w_params)``."""
        x, u = self._check(x, u)
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n_states,):
            raise DimensionMismatch(f"w: expected length {self.n_states}, got shape {w.shape}")
        return self._reverse(float(t), x, u, w)

    def rhs_with_params(self, t, x, u, flat):
        """Right-hand side for an explicit flat parameter vector (finite-difference checks)."""
        return self._forward(float(t), np.asarray(x, float), np.asarray(u, float), np.asarray(flat, float))[0]

    # -- housekeeping -------------------------------------------------------
    def with_params(self, flat) -> "HybridModel":
        p = ParameterVector(self.topology, flat)
        p.frozen = dict(self.params.frozen)
        return HybridModel(self.inner, self.topology, p, self.scalers, self.skip, self.bypass_mode, self.seed)

    def clone(self) -> "HybridModel":
        inner = self.inner.clone() if hasattr(self.inner, "clone") else self.inner
        return HybridModel(inner, self.topology, self.params.copy(), self.scalers, self.skip,
                           self.bypass_mode, self.seed)


def hybrid_rhs(m: HybridModel, t, x, u):
    return m.derivatives(t, x, u)


def hybrid_vjp(m: HybridModel, t, x, u, w):
    return m.hybrid_vjp(t, x, u, w)


def build_hybrid(inner, variant: str, hidden_width: int = 30, scalers: ScalerSet = None, seed: int = 0,
                 skip: bool = True) -> HybridModel:
    part = inner.partition
    topo = HybridTopology(part.n_wk, part.n_art // (2 if str(variant).upper() == "LC" else 1), variant,
                          hidden_width)
    return HybridModel(inner, topo, init_params(topo, seed), scalers, skip=skip, seed=seed)


# -- checkpoint files ---------------------------------------------------------
CHECKPOINT_VERSION = 1


def save_checkpoint(path, m: HybridModel, extra: Optional[dict] = None) -> None:
    """CSV checkpoint: ``#``-prefixed JSON header lines, then ``index,name,value`` rows."""
    t = m.topology
    header = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "topology": [t.n_wk, t.n_obs, t.variant, t.hidden_width],
        "skip": m.skip,
        "seed": m.seed,
        "state_shift": m.scalers.state.shift.tolist(),
        "state_scale": m.scalers.state.scale.tolist(),
        "deriv_shift": m.scalers.deriv.shift.tolist(),
        "deriv_scale": m.scalers.deriv.scale.tolist(),
        **(extra or {}),
    }
    names = []
    for name, (sl, _) in m.params.slices.items():
        names += [f"{name}[{k}]" for k in range(sl.stop - sl.start)]
    lines = ["# " + json.dumps(header, sort_keys=True), "index,name,value"]
    lines += [f"{i},{n},{repr(float(v))}" for i, (n, v) in enumerate(zip(names, m.params.flat))]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint(path):
    """Returns ``(header dict, topology, ParameterVector, ScalerSet)``."""
    try:
        rows = Path(path).read_text().split("\n")
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint {str(path)!r}: {exc.strerror}") from None
    if not rows or not rows[0].startswith("# "):
        raise ParseError(f"{path}: missing checkpoint header", 1, 1)
    try:
        header = json.loads(rows[0][2:])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad checkpoint header: {exc.msg}", 1, exc.colno + 2) from None
    n_wk, n_obs, variant, hidden = header["topology"]
    topo = build_topology(n_wk, n_obs, variant, hidden)
    values = []
    for i, ln in enumerate(rows[2:], start=3):
        if not ln.strip():
            continue
        cells = ln.split(",")
        try:
            values.append(float(cells[2]))
        except (IndexError, ValueError):
            raise ParseError(f"{path}: bad parameter row", i, 1) from None
    params = ParameterVector(topo, values)
    scalers = ScalerSet(AffineScaler(header["state_shift"], header["state_scale"]),
                        AffineScaler(header["deriv_shift"], header["deriv_scale"]))
    return header, topo, params, scalers


def load_checkpoint(path, inner: ModelInstance) -> HybridModel:
    header, topo, params, scalers = read_checkpoint(path)
    return HybridModel(inner, topo, params, scalers, skip=header.get("skip", True), seed=header.get("seed", 0))
