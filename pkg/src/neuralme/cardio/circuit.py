"""Linear nodal analysis of the static pipe network."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ..errors import DimensionMismatch, SingularSystem
from .network import ArterialNetwork, FluidProps, SegmentGeometry


def pipe_resistance(g: SegmentGeometry, fluid: FluidProps) -> float:
    """Hagen-Poiseuille resistance of a cylindrical pipe with the mean diameter."""
    d = g.diameter
    return 128.0 * fluid.dynamic_viscosity * g.length / (math.pi * d ** 4)


def tapered_resistance(g: SegmentGeometry, fluid: FluidProps, a: float = 0.0, b: float = 1.0) -> float:
    """Poiseuille resistance of the linearly tapered pipe between fractions ``a`` and ``b`` of its length.

    Integrates ``128 mu / (pi d(s)^4)`` exactly over the taper.
    """
    d0, d1, L = g.inlet_diameter, g.outlet_diameter, g.length
    da = d0 + (d1 - d0) * a
    db = d0 + (d1 - d0) * b
    span = (b - a) * L
    if abs(db - da) <= 1e-12 * max(da, db):
        integral = span / da ** 4
    else:
        integral = span * (da * da + da * db + db * db) / (3.0 * da ** 3 * db ** 3)
    return 128.0 * fluid.dynamic_viscosity * integral / math.pi


def segment_compliance(g: SegmentGeometry) -> float:
    """Thin-wall compliance ``3 pi r^3 L / (2 E h)`` at the mean radius."""
    r = 0.5 * g.diameter
    return 3.0 * math.pi * r ** 3 * g.length / (2.0 * g.elastic_modulus * g.wall_thickness)


class Circuit:
    """Resistor graph with prescribed-pressure nodes and one flow injection.

    ``edges`` are ``(name, from_node, to_node, resistance)``; positive flow
    runs from ``from_node`` to ``to_node``.  Pressures of ``fixed`` nodes are
    inputs, all other node pressures are solved for.  The conductance block
    of the free nodes is factorized once.
    """

    def __init__(self, nodes, edges, fixed, injection_node=None):
        self.nodes = tuple(nodes)
        self.edges = tuple(e[0] for e in edges)
        self.fixed = tuple(fixed)
        idx = {n: i for i, n in enumerate(self.nodes)}
        if len(idx) != len(self.nodes):
            raise ValueError("duplicate circuit node")
        fixed_set = set(self.fixed)
        self.free = tuple(n for n in self.nodes if n not in fixed_set)
        self.injection_node = injection_node if injection_node in set(self.free) else None

        ne, nn = len(edges), len(self.nodes)
        rows, cols, vals = [], [], []
        g = np.empty(ne)
        for k, (_, a, b, r) in enumerate(edges):
            if not r > 0:
                raise SingularSystem(f"edge {edges[k][0]!r} has non-positive resistance {r}")
            g[k] = 1.0 / r
            rows += [idx[a], idx[b]]
            cols += [k, k]
            vals += [1.0, -1.0]
        self.conductance = g
        inc = sp.csr_matrix((vals, (rows, cols)), shape=(nn, ne))
        self.incidence = inc
        perm_f = [idx[n] for n in self.free]
        perm_d = [idx[n] for n in self.fixed]
        self._perm_f = np.array(perm_f, dtype=int)
        self._perm_d = np.array(perm_d, dtype=int)
        inc_f = inc[perm_f]
        inc_d = inc[perm_d]
        G = sp.diags(g)
        self._inc_f = inc_f.tocsr()
        self._inc_d = inc_d.tocsr()
        self._inc_fT = inc_f.T.tocsr()
        self._inc_dT = inc_d.T.tocsr()
        self._g_ff = (inc_f @ G @ inc_f.T).tocsc()
        self._g_fd = (inc_f @ G @ inc_d.T).tocsr()
        self._inj = None
        if self.injection_node is not None:
            self._inj = self.free.index(self.injection_node)
        self._check_grounded(edges, fixed_set)
        if self.free:
            try:
                self._lu = splu(self._g_ff)
            except RuntimeError as exc:
                raise SingularSystem(f"degenerate network: {exc}") from None
        else:
            self._lu = None

    def _check_grounded(self, edges, fixed_set):
        adj = {n: [] for n in self.nodes}
        for _, a, b, _ in edges:
            adj[a].append(b)
            adj[b].append(a)
        seen = set()
        for start in self.free:
            if start in seen:
                continue
            comp, stack, grounded = {start}, [start], False
            while stack:
                n = stack.pop()
                for m in adj[n]:
                    if m in fixed_set:
                        grounded = True
                    elif m not in comp:
                        comp.add(m)
                        stack.append(m)
            seen |= comp
            if not grounded:
                raise SingularSystem(f"nodes {sorted(comp)} have no path to a prescribed pressure")

    def solve(self, p_fixed, q_in=0.0):
        """Solve node pressures; returns ``(p_free, flows, net_inflow_fixed)``.

        ``p_fixed`` may be a vector or a matrix with one column per
        right-hand side.  ``net_inflow_fixed`` is the volume flow arriving
        at each fixed node through the resistor edges.
        """
        p_fixed = np.asarray(p_fixed, dtype=float)
        if p_fixed.shape[0] != len(self.fixed):
            raise DimensionMismatch(f"expected {len(self.fixed)} fixed pressures, got {p_fixed.shape[0]}")
        rhs = -(self._g_fd @ p_fixed)
        if self._inj is not None:
            rhs[self._inj] += q_in
        p_free = self._lu.solve(rhs) if self._lu is not None else rhs
        dp = self._inc_fT @ p_free + self._inc_dT @ p_fixed
        flows = dp * (self.conductance if p_fixed.ndim == 1 else self.conductance[:, None])
        net_in = -(self._inc_d @ flows)
        return p_free, flows, net_in

    def junction_residual(self, flows, q_in=0.0, p_fixed=None):
        """Relative flow-balance residual at the free nodes.

        The scale is the largest edge flow, the injection, or (given
        ``p_fixed``) the largest flow a prescribed pressure could drive
        through one edge, whichever is largest.
        """
        bal = -(self._inc_f @ flows)
        if self._inj is not None:
            bal[self._inj] += q_in
        scale = max(float(np.max(np.abs(flows))) if flows.size else 0.0, abs(q_in), 1e-300)
        if p_fixed is not None and np.size(p_fixed) and self.conductance.size:
            scale = max(scale, float(np.max(self.conductance)) * float(np.max(np.abs(p_fixed))))
        return float(np.max(np.abs(bal))) / scale if bal.size else 0.0


@dataclass
class FlowSolution:
    node_pressures: dict
    segment_flows: dict
    residual: float


def static_circuit(net: ArterialNetwork, fluid: FluidProps, split=(), split_resistance=None):
    """Circuit of the static network.

    Segments in ``split`` get a midpoint node ``"<id>:mid"`` between two
    halves; every terminal contributes its proximal resistor to a capacitor
    node ``"<leaf>:wk"``.  ``split_resistance(segment)`` may override the two
    half resistances.
    """
    split = set(split)
    nodes = list(net.nodes)
    edges = []
    for s in net.segments:
        if s.id in split:
            mid = f"{s.id}:mid"
            nodes.append(mid)
            if split_resistance is None:
                r = pipe_resistance(s.geometry, fluid)
                ra = rb = 0.5 * r
            else:
                ra, rb = split_resistance(s)
            edges.append((f"{s.id}:a", s.from_node, mid, ra))
            edges.append((f"{s.id}:b", mid, s.to_node, rb))
        else:
            edges.append((str(s.id), s.from_node, s.to_node, pipe_resistance(s.geometry, fluid)))
    for leaf, wk in net.terminals.items():
        cap = f"{leaf}:wk"
        nodes.append(cap)
        edges.append((f"{leaf}:R1", leaf, cap, wk.r_proximal))
    return nodes, edges


def solve_flows(net: ArterialNetwork, dynamic_pressures: dict, inflow: float, fluid: FluidProps = None,
                split=()) -> FlowSolution:
    """Node pressures and signed edge flows of the static network.

    ``dynamic_pressures`` prescribes the pressure of every state-carrying
    node (windkessel capacitor nodes ``"<leaf>:wk"``, midpoint nodes
    ``"<id>:mid"`` of split segments) and optionally of any other node.
    ``inflow`` is the heart mass flow in kg/s, injected at the root.
    """
    fluid = fluid or net.fluid
    nodes, edges = static_circuit(net, fluid, split)
    required = [f"{leaf}:wk" for leaf in net.terminals] + [f"{s}:mid" for s in split]
    missing = [n for n in required if n not in dynamic_pressures]
    if missing:
        raise DimensionMismatch(f"missing pressures for state nodes {missing}")
    unknown = [n for n in dynamic_pressures if n not in set(nodes)]
    if unknown:
        raise DimensionMismatch(f"pressures given for unknown nodes {unknown}")
    fixed = [n for n in nodes if n in dynamic_pressures]
    circ = Circuit(nodes, edges, fixed, injection_node=net.root)
    q = inflow / fluid.density
    p_fixed = np.array([dynamic_pressures[n] for n in fixed], dtype=float)
    p_free, flows, _ = circ.solve(p_fixed, q)
    pressures = dict(zip(circ.free, p_free.tolist()))
    pressures.update(zip(circ.fixed, p_fixed.tolist()))
    return FlowSolution(pressures, dict(zip(circ.edges, flows.tolist())), circ.junction_residual(flows, q, p_fixed))
