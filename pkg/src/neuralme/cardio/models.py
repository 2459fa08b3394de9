"""First-principle arterial models built on the static pipe network.

Three variants share the nodal-analysis core:

``simple_C``
    static pipes, windkessel terminals, and one capacitor (pressure state)
    at the midpoint of every observed segment.
``simple_LC``
    as ``simple_C`` plus an inductor from each placeholder node to its
    reference pressure (second state: inductor flow).
``reference_elastic``
    every segment split in two tapered half-pipes around a wall compliance
    node; this is the higher-fidelity model used to generate data.

State layout is always ``x = x_wk | x_art``.  All variants are linear, so the
jacobian is assembled once from the circuit and reused for the derivatives
and for ``jvp``/``vjp``; ``circuit_derivatives`` recomputes them from a
nodal solve.
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from ..me_interface import MEModelDescription, ModelInstance, StatePartition
from .circuit import Circuit, segment_compliance, static_circuit, tapered_resistance
from .heart import HeartProfile
from .network import ArterialNetwork, FluidProps, PlaceholderParams

VARIANTS = ("simple_C", "simple_LC", "reference_elastic")
_ALIASES = {"c": "simple_C", "lc": "simple_LC", "reference": "reference_elastic", "ref": "reference_elastic",
            "simple_c": "simple_C", "simple_lc": "simple_LC", "reference_elastic": "reference_elastic"}


def canonical_variant(variant: str) -> str:
    v = _ALIASES.get(str(variant).lower())
    if v is None:
        raise ValidationError(f"unknown model variant {variant!r}; choose from {VARIANTS}")
    return v


class CardioModel(ModelInstance):
    provides_jvp = True
    provides_vjp = True

    def __init__(self, net: ArterialNetwork, variant: str, fluid: FluidProps, heart: HeartProfile,
                 placeholder: PlaceholderParams):
        self.network = net
        self.variant = variant
        self.fluid = fluid
        self.heart = heart
        self.placeholder = placeholder

        leaves = list(net.terminals)
        wk = [net.terminals[n] for n in leaves]
        n_wk = len(leaves)
        if variant == "reference_elastic":
            split = list(net.segment_ids)

            def halves(s):
                return (tapered_resistance(s.geometry, fluid, 0.0, 0.5),
                        tapered_resistance(s.geometry, fluid, 0.5, 1.0))

            nodes, edges = static_circuit(net, fluid, split, halves)
            art_caps = np.array([segment_compliance(net.segment(s).geometry) for s in split])
            art_names = [f"p_seg{s}" for s in split]
            n_lc = 0
        else:
            split = list(net.observed)
            nodes, edges = static_circuit(net, fluid, split)
            art_caps = np.array(placeholder.per_site("capacitance", len(split)), dtype=float)
            art_names = [f"p_ph{s}" for s in split]
            n_lc = len(split) if variant == "simple_LC" else 0
        fixed = [f"{leaf}:wk" for leaf in leaves] + [f"{s}:mid" for s in split]
        self.circuit = Circuit(nodes, edges, fixed, injection_node=net.root)

        n_p = n_wk + len(split)
        names = [f"p_wk_{leaf}" for leaf in leaves] + art_names + [f"q_ph{s}" for s in split[:n_lc]]
        part = StatePartition(n_wk, len(split) + n_lc)
        desc = MEModelDescription(names, ["m_flow"], part)

        self._n_p = n_p
        self._n_lc = n_lc
        self._cap = np.concatenate([[w.compliance for w in wk], art_caps])
        self._r2 = np.array([w.r_distal for w in wk])
        self._p_ven = np.array([w.venous_pressure for w in wk])
        self._inductance = np.array(placeholder.per_site("inertance", n_lc) if n_lc else [], dtype=float)
        self.split_segments = tuple(split)
        self.terminal_nodes = tuple(leaves)
        if variant == "reference_elastic":
            pos = {s: i for i, s in enumerate(split)}
            self.observed_index = np.array([n_wk + pos[s] for s in net.observed], dtype=int)
        else:
            self.observed_index = np.arange(n_wk, n_wk + len(split))
        params = np.concatenate([1.0 / self.circuit.conductance, self._cap, self._r2, self._inductance])
        super().__init__(desc, params)
        self._p_ref = np.zeros(n_lc)
        self._linear = None

    def set_reference_pressures(self, p_ref):
        self._p_ref = np.broadcast_to(np.asarray(p_ref, dtype=float), (self._n_lc,)).copy()
        self._linear = None

    @property
    def reference_pressures(self) -> np.ndarray:
        return self._p_ref.copy()

    def observe(self, states) -> np.ndarray:
        """Observed pressures, one column per network observed segment."""
        return np.asarray(states)[..., self.observed_index]

    def _derivatives(self, t, x, u):
        A, B, c = self.linear_form()
        return A @ x + B[:, 0] * u[0] + c

    def circuit_derivatives(self, t, x, u):
        """Derivatives computed directly from a nodal solve (no cached jacobian)."""
        x, u = self._check(x, u)
        n_p, n_wk = self._n_p, self.partition.n_wk
        p = x[:n_p]
        q_in = u[0] / self.fluid.density
        _, _, net = self.circuit.solve(p, q_in)
        out = np.empty_like(x)
        net[:n_wk] -= (p[:n_wk] - self._p_ven) / self._r2
        if self._n_lc:
            net[n_wk:] -= x[n_p:]
            out[n_p:] = (x[n_wk:n_wk + self._n_lc] - self._p_ref) / self._inductance
        out[:n_p] = net / self._cap
        return out

    def linear_form(self):
        """``(A, B, c)`` with ``f(t, x, u) = A x + B u + c``."""
        if self._linear is None:
            n, n_p, n_wk, n_lc = self.n_states, self._n_p, self.partition.n_wk, self._n_lc
            A = np.zeros((n, n))
            _, _, S = self.circuit.solve(np.eye(n_p), np.zeros(n_p))
            _, _, s = self.circuit.solve(np.zeros(n_p), 1.0)
            A[:n_p, :n_p] = S / self._cap[:, None]
            A[np.arange(n_wk), np.arange(n_wk)] -= 1.0 / (self._r2 * self._cap[:n_wk])
            B = np.zeros((n, 1))
            B[:n_p, 0] = s / (self._cap * self.fluid.density)
            c = np.zeros(n)
            c[:n_wk] = self._p_ven / (self._r2 * self._cap[:n_wk])
            if n_lc:
                k = np.arange(n_lc)
                A[n_wk + k, n_p + k] = -1.0 / self._cap[n_wk:n_wk + n_lc]
                A[n_p + k, n_wk + k] = 1.0 / self._inductance
                c[n_p:] = -self._p_ref / self._inductance
            self._linear = (A, B, c)
        return self._linear

    def _jvp(self, t, x, u, v_x, v_u):
        A, B, _ = self.linear_form()
        return A @ v_x + B @ v_u

    def _vjp(self, t, x, u, w):
        A, B, _ = self.linear_form()
        return A.T @ w, B.T @ w

    def steady_state(self, mass_flow: float) -> np.ndarray:
        """Equilibrium for a constant heart mass flow."""
        A, B, c = self.linear_form()
        return np.linalg.solve(A, -(B[:, 0] * mass_flow + c))

    def node_solution(self, x, mass_flow):
        """Free node pressures and edge flows for state ``x``."""
        p_free, flows, _ = self.circuit.solve(np.asarray(x)[:self._n_p], mass_flow / self.fluid.density)
        return dict(zip(self.circuit.free, p_free)), dict(zip(self.circuit.edges, flows))

    def junction_residual(self, x, mass_flow) -> float:
        q = mass_flow / self.fluid.density
        p = np.asarray(x)[:self._n_p]
        _, flows, _ = self.circuit.solve(p, q)
        return self.circuit.junction_residual(flows, q, p)

    def clone(self) -> "CardioModel":
        other = build_model(self.network, self.variant, self.fluid, self.heart, self.placeholder)
        other.set_reference_pressures(self._p_ref)
        return other


def build_model(net: ArterialNetwork, variant: str, fluid: FluidProps = None, heart: HeartProfile = None,
                placeholder: PlaceholderParams = None) -> CardioModel:
    """Build one of the model variants for ``net``.

    For ``simple_LC`` without an explicit reference pressure, every inductor
    is referenced to the ``simple_C`` equilibrium pressure at its node under
    the mean heart flow, so both placeholder kinds share that equilibrium.
    """
    variant = canonical_variant(variant)
    fluid = fluid or net.fluid
    heart = heart or default_heart(net)
    ph = placeholder or net.placeholder
    if variant == "simple_LC":
        ph = PlaceholderParams("LC", ph.capacitance, ph.inertance, ph.reference_pressure)
    elif variant == "simple_C":
        ph = PlaceholderParams("C", ph.capacitance, ph.inertance, ph.reference_pressure)
    if variant != "reference_elastic" and not net.observed:
        raise ValidationError(f"variant {variant} needs at least one observed segment")
    model = CardioModel(net, variant, fluid, heart, ph)
    if variant == "simple_LC":
        if ph.reference_pressure is None:
            base = CardioModel(net, "simple_C", fluid, heart, PlaceholderParams("C", ph.capacitance, ph.inertance))
            x = base.steady_state(heart.mean_volume_flow * fluid.density)
            model.set_reference_pressures(x[base.partition.art_index])
        else:
            model.set_reference_pressures(ph.reference_pressure)
    return model


def default_heart(net: ArterialNetwork) -> HeartProfile:
    return HeartProfile(**net.heart) if net.heart else HeartProfile()
