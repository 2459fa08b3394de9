"""Arterial network description and its JSON file format.

A network file is a JSON object::

    {
      "schema_version": 1,
      "name": "desk7",
      "fluid": {"density": 1060.0, "dynamic_viscosity": 0.004},
      "segments": [
        {"id": 1, "from": "heart", "to": "n1", "length": 0.1,
         "inlet_diameter": 0.006, "outlet_diameter": 0.005,
         "wall_thickness": 5e-4, "elastic_modulus": 4e5, "name": "aorta"}
      ],
      "terminals": {"n1": {"r_proximal": 5e7, "r_distal": 5e8,
                           "compliance": 1e-9, "venous_pressure": 666.0}},
      "observed": [1],
      "placeholder": {"capacitance": 1e-10, "inertance": 1e7,
                      "reference_pressure": null},
      "heart": {"heart_rate": 73.0, "stroke_volume": 7e-5,
                "systolic_fraction": 0.3}
    }

``fluid``, ``placeholder`` and ``heart`` are optional.  Segments must form
a tree rooted at the single node without an incoming segment (the heart
inlet); every leaf carries a terminal windkessel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from ..errors import ParseError, ValidationError

SCHEMA_VERSIONS = (1,)
BUNDLED = ("desk7", "full_arterial")


@dataclass(frozen=True)
class FluidProps:
    density: float = 1060.0
    dynamic_viscosity: float = 4.0e-3

    def __post_init__(self):
        if not (self.density > 0 and self.dynamic_viscosity > 0):
            raise ValidationError("fluid density and viscosity must be positive")


@dataclass(frozen=True)
class SegmentGeometry:
    length: float
    inlet_diameter: float
    outlet_diameter: float
    wall_thickness: float
    elastic_modulus: float

    def __post_init__(self):
        for name in ("length", "inlet_diameter", "outlet_diameter", "wall_thickness", "elastic_modulus"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"segment geometry field {name!r} must be positive")

    @property
    def diameter(self) -> float:
        """Effective constant diameter used by the static pipe model."""
        return 0.5 * (self.inlet_diameter + self.outlet_diameter)


@dataclass(frozen=True)
class WindkesselParams:
    r_proximal: float
    r_distal: float
    compliance: float
    venous_pressure: float = 0.0

    def __post_init__(self):
        if not (self.r_proximal > 0 and self.r_distal > 0 and self.compliance > 0):
            raise ValidationError("windkessel resistances and compliance must be positive")

    @property
    def time_constant(self) -> float:
        return self.r_distal * self.compliance


@dataclass(frozen=True)
class PlaceholderParams:
    """Placeholder element inserted mid-segment at every observed location.

    ``capacitance``, ``inertance`` and ``reference_pressure`` are either one
    value shared by all sites or a sequence with one entry per observed
    segment.

    ``reference_pressure=None`` means the LC inductor is referenced to the
    static model's mean pressure at that point (computed when the model is
    built).
    """

    kind: str = "C"
    capacitance: object = 1e-10
    inertance: object = 1e7
    reference_pressure: object = None

    def __post_init__(self):
        if self.kind not in ("C", "LC"):
            raise ValidationError(f"placeholder kind must be 'C' or 'LC', got {self.kind!r}")
        for name in ("capacitance", "inertance", "reference_pressure"):
            v = getattr(self, name)
            if isinstance(v, (list, tuple)):
                object.__setattr__(self, name, tuple(float(a) for a in v))
        if not all(c > 0 for c in _as_tuple(self.capacitance)):
            raise ValidationError("placeholder capacitance must be positive")
        if self.kind == "LC" and not all(c > 0 for c in _as_tuple(self.inertance)):
            raise ValidationError("LC placeholder inertance must be positive")

    def per_site(self, name: str, n: int):
        """Value of field ``name`` expanded to ``n`` placeholder sites."""
        v = getattr(self, name)
        if isinstance(v, tuple):
            if len(v) != n:
                raise ValidationError(f"placeholder {name} lists {len(v)} values for {n} observed segments")
            return list(v)
        return [v] * n


def _as_tuple(v):
    return v if isinstance(v, tuple) else (v,)


@dataclass(frozen=True)
class Segment:
    id: int
    geometry: SegmentGeometry
    from_node: str
    to_node: str
    name: str = ""


@dataclass(frozen=True)
class ArterialNetwork:
    segments: tuple
    terminals: dict
    observed: tuple
    fluid: FluidProps = field(default_factory=FluidProps)
    placeholder: PlaceholderParams = field(default_factory=PlaceholderParams)
    heart: Optional[dict] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        object.__setattr__(self, "observed", tuple(self.observed))
        validate(self)

    @property
    def root(self) -> str:
        return self._root

    @property
    def nodes(self) -> tuple:
        return self._nodes

    @property
    def leaves(self) -> tuple:
        return self._leaves

    @property
    def segment_ids(self) -> tuple:
        return tuple(s.id for s in self.segments)

    def segment(self, seg_id) -> Segment:
        return self._by_id[seg_id]

    @property
    def n_terminals(self) -> int:
        return len(self.terminals)

    @property
    def n_observed(self) -> int:
        return len(self.observed)

    def children(self, node):
        return self._children.get(node, ())


def validate(net: ArterialNetwork) -> None:
    """Check the tree, terminal and observation invariants; raise ValidationError."""
    if not net.segments:
        raise ValidationError("network has no segments")
    by_id = {}
    for s in net.segments:
        if s.id in by_id:
            raise ValidationError(f"duplicate segment id {s.id}")
        if s.from_node == s.to_node:
            raise ValidationError(f"segment {s.id} is a self-loop (cycle detected)")
        by_id[s.id] = s

    incoming, children = {}, {}
    nodes = []
    for s in net.segments:
        for n in (s.from_node, s.to_node):
            if n not in incoming:
                incoming[n] = []
                nodes.append(n)
        incoming[s.to_node].append(s.id)
        children.setdefault(s.from_node, []).append(s)

    roots = [n for n in nodes if not incoming[n]]
    if len(roots) != 1:
        if not roots:
            raise ValidationError("no root node (every node has an incoming segment): cycle detected")
        raise ValidationError(f"network must have exactly one root, found {roots}")
    for n in nodes:
        if len(incoming[n]) > 1:
            raise ValidationError(
                f"node {n!r} has {len(incoming[n])} incoming segments {incoming[n]}: not a tree (cycle detected)"
            )
    root = roots[0]
    seen = {root}
    stack = [root]
    while stack:
        n = stack.pop()
        for s in children.get(n, ()):
            if s.to_node in seen:
                raise ValidationError(f"cycle detected at node {s.to_node!r}")
            seen.add(s.to_node)
            stack.append(s.to_node)
    if len(seen) != len(nodes):
        missing = sorted(set(nodes) - seen)
        raise ValidationError(f"network is not connected to the root; unreachable nodes {missing} (cycle detected)")

    leaves = tuple(n for n in nodes if n not in children)
    for leaf in leaves:
        if leaf not in net.terminals:
            raise ValidationError(f"leaf node {leaf!r} has no windkessel terminal")
    for n, wk in net.terminals.items():
        if n not in incoming:
            raise ValidationError(f"terminal at unknown node {n!r}")
        if n in children:
            raise ValidationError(f"terminal at non-leaf node {n!r}")
        if not isinstance(wk, WindkesselParams):
            raise ValidationError(f"terminal {n!r} is not a WindkesselParams")

    obs = list(net.observed)
    if len(set(obs)) != len(obs):
        dup = sorted({o for o in obs if obs.count(o) > 1})
        raise ValidationError(f"observed segment ids must be unique, duplicated: {dup}")
    for o in obs:
        if o not in by_id:
            raise ValidationError(f"observed segment {o} is not a segment id")

    for name in ("capacitance", "inertance", "reference_pressure"):
        v = getattr(net.placeholder, name)
        if isinstance(v, tuple) and len(v) != len(obs):
            raise ValidationError(f"placeholder {name} lists {len(v)} values for {len(obs)} observed segments")

    object.__setattr__(net, "_root", root)
    object.__setattr__(net, "_nodes", tuple(nodes))
    object.__setattr__(net, "_leaves", leaves)
    object.__setattr__(net, "_by_id", by_id)
    object.__setattr__(net, "_children", {k: tuple(v) for k, v in children.items()})


def _require(d, key, where):
    if key not in d:
        raise ValidationError(f"{where}: missing field {key!r}")
    return d[key]


def _number_or_list(v, where):
    try:
        return tuple(float(a) for a in v) if isinstance(v, list) else float(v)
    except (TypeError, ValueError):
        raise ValidationError(f"{where}: expected a number or a list of numbers") from None


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def network_from_dict(doc: dict) -> ArterialNetwork:
    if not isinstance(doc, dict):
        raise ValidationError("network document must be a JSON object")
    version = doc.get("schema_version")
    if version not in SCHEMA_VERSIONS:
        raise ValidationError(f"unsupported schema_version {version!r}; supported: {SCHEMA_VERSIONS}")
    segments = []
    for k, s in enumerate(_require(doc, "segments", "network")):
        where = f"segments[{k}]"
        geom = SegmentGeometry(
            length=float(_require(s, "length", where)),
            inlet_diameter=float(_require(s, "inlet_diameter", where)),
            outlet_diameter=float(_require(s, "outlet_diameter", where)),
            wall_thickness=float(_require(s, "wall_thickness", where)),
            elastic_modulus=float(_require(s, "elastic_modulus", where)),
        )
        segments.append(Segment(int(_require(s, "id", where)), geom, str(_require(s, "from", where)),
                                str(_require(s, "to", where)), str(s.get("name", ""))))
    terminals = {}
    for node, t in _require(doc, "terminals", "network").items():
        where = f"terminals[{node!r}]"
        terminals[str(node)] = WindkesselParams(
            r_proximal=float(_require(t, "r_proximal", where)),
            r_distal=float(_require(t, "r_distal", where)),
            compliance=float(_require(t, "compliance", where)),
            venous_pressure=float(t.get("venous_pressure", 0.0)),
        )
    fluid = FluidProps(**{k: float(v) for k, v in doc.get("fluid", {}).items()})
    ph = doc.get("placeholder", {})
    ref = ph.get("reference_pressure")
    placeholder = PlaceholderParams(
        kind="C",
        capacitance=_number_or_list(ph.get("capacitance", 1e-10), "placeholder.capacitance"),
        inertance=_number_or_list(ph.get("inertance", 1e7), "placeholder.inertance"),
        reference_pressure=None if ref is None else _number_or_list(ref, "placeholder.reference_pressure"),
    )
    observed = [int(o) for o in _require(doc, "observed", "network")]
    return ArterialNetwork(segments, terminals, observed, fluid, placeholder,
                           doc.get("heart"), str(doc.get("name", "")))


def network_to_dict(net: ArterialNetwork) -> dict:
    return {
        "schema_version": 1,
        "name": net.name,
        "fluid": {"density": net.fluid.density, "dynamic_viscosity": net.fluid.dynamic_viscosity},
        "segments": [
            {"id": s.id, "from": s.from_node, "to": s.to_node, "name": s.name,
             "length": s.geometry.length, "inlet_diameter": s.geometry.inlet_diameter,
             "outlet_diameter": s.geometry.outlet_diameter, "wall_thickness": s.geometry.wall_thickness,
             "elastic_modulus": s.geometry.elastic_modulus}
            for s in net.segments
        ],
        "terminals": {
            n: {"r_proximal": w.r_proximal, "r_distal": w.r_distal, "compliance": w.compliance,
                "venous_pressure": w.venous_pressure}
            for n, w in net.terminals.items()
        },
        "observed": list(net.observed),
        "placeholder": {"capacitance": _plain(net.placeholder.capacitance),
                        "inertance": _plain(net.placeholder.inertance),
                        "reference_pressure": _plain(net.placeholder.reference_pressure)},
        **({"heart": dict(net.heart)} if net.heart else {}),
    }


def parse_network(text: str) -> ArterialNetwork:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid network file: {exc.msg}", exc.lineno, exc.colno) from None
    return network_from_dict(doc)


def load_network(path) -> ArterialNetwork:
    """Load and validate a network file; bundled names ("desk7", "full_arterial") are accepted."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        return bundled_network(str(path))
    if not p.exists() and p.stem in BUNDLED and p.suffix == ".net":
        return bundled_network(p.stem)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read network file {str(p)!r}: {exc.strerror}") from None
    return parse_network(text)


def bundled_network_path(name: str):
    if name not in BUNDLED:
        raise ValueError(f"unknown bundled network {name!r}; choose from {BUNDLED}")
    return resources.files("neuralme.cardio") / "data" / f"{name}.net"


def bundled_network(name: str) -> ArterialNetwork:
    return parse_network(bundled_network_path(name).read_text())


def save_network(net: ArterialNetwork, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net), indent=1) + "\n")
