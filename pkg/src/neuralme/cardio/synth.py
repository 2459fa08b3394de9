"""Deterministic generators for the bundled arterial networks.

``desk7``
    seven tapered segments, four windkessels, five observed segments; small
    enough for finite-difference gradient checks and minute-scale training.
``full_arterial``
    a synthetic 116-segment, 46-terminal tree loosely following the large
    systemic arteries, with ten observed segments.

All values are synthetic.  Running ``python -m neuralme.cardio.synth DIR``
rewrites the ``.net`` files.
"""

from __future__ import annotations

import math
import sys
from pathlib import Path

import numpy as np

from .network import (ArterialNetwork, FluidProps, PlaceholderParams, Segment, SegmentGeometry, WindkesselParams,
                      save_network)

HEART = {"heart_rate": 73.0, "stroke_volume": 7e-5, "systolic_fraction": 0.3}
VENOUS_PRESSURE = 666.0
FULL_OBSERVED = (18, 39, 41, 87, 72, 21, 112, 44, 46, 49)


def desk7_network() -> ArterialNetwork:
    h, e = 3e-4, 1.2e5
    rows = [
        (1, "heart", "n1", 0.12, 0.0070, 0.0046, "ascending aorta"),
        (2, "n1", "n2", 0.15, 0.0050, 0.0034, "descending aorta"),
        (3, "n1", "n3", 0.15, 0.0046, 0.0030, "brachiocephalic"),
        (4, "n2", "n4", 0.18, 0.0036, 0.0024, "left iliac"),
        (5, "n2", "n5", 0.18, 0.0036, 0.0024, "right iliac"),
        (6, "n3", "n6", 0.18, 0.0036, 0.0024, "right brachial"),
        (7, "n3", "n7", 0.18, 0.0036, 0.0024, "carotid"),
    ]
    segs = [Segment(i, SegmentGeometry(L, a, b, h, e), f, t, name) for i, f, t, L, a, b, name in rows]
    wk = WindkesselParams(4e7, 4.2e8, 8e-10, VENOUS_PRESSURE)
    terminals = {n: wk for n in ("n4", "n5", "n6", "n7")}
    ph = PlaceholderParams("C", 2e-10, 1e7, None)
    return ArterialNetwork(segs, terminals, (1, 2, 3, 5, 6), FluidProps(), ph, dict(HEART), "desk7")


# -- full-scale tree -----------------------------------------------------------
# A node spec is (name, length_cm, d_in_mm, d_out_mm, children); an observed
# segment carries its fixed id as a sixth entry.
def _leaf(name, L, a, b, sid=None):
    return (name, L, a, b, [], sid)


def _arm(side, observed):
    digital = _leaf(f"{side} digital", 7, 1.8, 1.5, 112 if observed else None)
    radial = (f"{side} radial", 23, 3.5, 2.8, [digital, _leaf(f"{side} palmar", 5, 1.8, 1.6)], None)
    ulnar = (f"{side} ulnar", 22, 3.6, 3.0, [_leaf(f"{side} interosseous", 8, 1.8, 1.6),
                                             _leaf(f"{side} ulnar distal", 12, 2.6, 2.2)], None)
    brachial = (f"{side} brachial", 22, 5.2, 4.4, [radial, ulnar], 21 if observed else None)
    axillary = (f"{side} axillary", 12, 6.5, 5.4, [_leaf(f"{side} thoracoacromial", 4, 2.6, 2.4), brachial], None)
    return (f"{side} subclavian", 8, 8.5, 7.0, [_leaf(f"{side} vertebral", 15, 3.6, 3.0), axillary], None)


def _head(side, observed):
    mca = (f"{side} middle cerebral", 5, 3.0, 2.8, [_leaf(f"{side} superior middle cerebral", 6, 2.2, 2.0,
                                                          72 if observed else None),
                                                    _leaf(f"{side} inferior middle cerebral", 6, 2.2, 2.0)], None)
    internal = (f"{side} internal carotid", 17, 5.0, 4.4, [mca, _leaf(f"{side} anterior cerebral", 8, 2.4, 2.2)],
                None)
    external = (f"{side} external carotid", 6, 4.2, 3.6, [_leaf(f"{side} superficial temporal", 5, 2.0, 1.8,
                                                                87 if observed else None),
                                                          _leaf(f"{side} maxillary", 6, 2.2, 2.0)], None)
    return (f"{side} common carotid", 12, 8.0, 6.8, [internal, external], None)


def _leg(side, observed):
    tibial = _leaf(f"{side} anterior tibial", 25, 3.0, 2.6, 49 if observed else None)
    posterior = (f"{side} posterior tibial", 25, 3.2, 2.8, [_leaf(f"{side} plantar", 8, 2.0, 1.8),
                                                           _leaf(f"{side} peroneal", 20, 2.4, 2.2)], None)
    popliteal = (f"{side} popliteal", 10, 5.2, 4.6, [tibial, posterior], None)
    femoral = (f"{side} femoral", 15, 6.6, 5.6, [_leaf(f"{side} profunda femoris", 12, 4.0, 3.4), popliteal],
               46 if observed else None)
    external = (f"{side} external iliac", 10, 8.0, 7.2, [_leaf(f"{side} inferior epigastric", 6, 2.6, 2.4), femoral],
                None)
    return (f"{side} common iliac", 6, 10.0, 9.0, [_leaf(f"{side} internal iliac", 5, 5.0, 4.6), external],
            44 if observed else None)


def _trunk():
    def aorta(name, L, a, b, branches, sid=None):
        return (name, L, a, b, branches, sid)

    bif = [_leg("left", True), _leg("right", False)]
    abd6 = aorta("abdominal aorta VI", 5, 15.0, 14.0, bif, 41)
    abd5 = aorta("abdominal aorta V", 6, 16.5, 15.0, [_leaf("inferior mesenteric", 5, 4.0, 3.6), abd6])
    lumbar = (
        "abdominal aorta IVb", 4, 16.8, 16.5,
        [("lumbar trunk", 3, 3.4, 3.0, [_leaf("lumbar left", 6, 2.2, 2.0), _leaf("lumbar right", 6, 2.2, 2.0)],
          None), abd5], None)
    abd4 = aorta("abdominal aorta IV", 4, 17.0, 16.8, [_leaf("left renal", 3, 5.2, 5.0), lumbar], 39)
    abd3 = aorta("abdominal aorta III", 4, 17.5, 17.0, [_leaf("right renal", 3, 5.2, 5.0), abd4])
    abd2 = aorta("abdominal aorta II", 4, 18.0, 17.5, [_leaf("superior mesenteric", 6, 6.0, 5.4), abd3])
    celiac = ("celiac", 2, 6.0, 5.6, [_leaf("hepatic", 7, 4.4, 4.0),
                                      ("splenic", 6, 4.4, 4.0, [_leaf("gastric", 7, 2.8, 2.6),
                                                                _leaf("splenic distal", 6, 3.6, 3.4)], None)], None)
    abd1 = aorta("abdominal aorta I", 5, 19.0, 18.0, [celiac, abd2])
    th3 = aorta("thoracic aorta III", 10, 20.0, 19.0, [_leaf("intercostal III", 8, 2.2, 2.0), abd1], 18)
    th2 = aorta("thoracic aorta II", 8, 21.0, 20.0, [_leaf("intercostal II", 8, 2.2, 2.0), th3])
    th1 = aorta("thoracic aorta I", 8, 23.0, 21.0, [_leaf("intercostal I", 8, 2.2, 2.0), th2])
    arch3 = aorta("aortic arch III", 5, 24.0, 23.0, [_arm("left", True), th1])
    arch2 = aorta("aortic arch II", 4, 25.0, 24.0, [_head("left", True), arch3])
    bc = ("brachiocephalic", 5, 12.0, 11.0, [_arm("right", False), _head("right", False)], None)
    arch1 = aorta("aortic arch I", 4, 27.0, 25.0, [bc, arch2])
    return aorta("ascending aorta", 6, 29.0, 27.0, [arch1])


def _flatten(spec):
    """Pre-order list of (name, L, a, b, parent_index, sid)."""
    out = []

    def walk(node, parent):
        name, L, a, b, children, sid = node
        out.append([name, L / 100.0, a / 1000.0, b / 1000.0, parent, sid])
        me = len(out) - 1
        for c in children:
            walk(c, me)

    walk(spec, -1)
    return out


def _split_serial(rows, count):
    """Split the ``count`` longest unobserved segments into two serial halves."""
    order = sorted(range(len(rows)), key=lambda i: (-rows[i][1], i))
    chosen = [i for i in order if rows[i][5] is None][:count]
    for i in sorted(chosen, reverse=True):
        name, L, a, b, parent, sid = rows[i]
        mid = 0.5 * (a + b)
        rows[i] = [f"{name} (proximal)", 0.5 * L, a, mid, parent, None]
        rows.insert(i + 1, [f"{name} (distal)", 0.5 * L, mid, b, i, None])
        for r in rows[i + 2:]:
            if r[4] == i:
                r[4] = i + 1
            elif r[4] > i:
                r[4] += 1
    return rows


def _wall(d):
    """Wall thickness and elastic modulus for diameter ``d`` (m)."""
    h = 0.08 * d + 2e-4
    e = 4e5 * math.sqrt(max(1.0, 0.012 / d))
    return h, e


def full_network(placeholder_capacitance=None) -> ArterialNetwork:
    rows = _flatten(_trunk())
    rows = _split_serial(rows, 116 - len(rows))
    if len(rows) != 116:
        raise AssertionError(f"generator produced {len(rows)} segments")

    fixed = {r[5]: k for k, r in enumerate(rows) if r[5] is not None}
    free_ids = iter(i for i in range(1, 117) if i not in fixed)
    ids = [r[5] if r[5] is not None else next(free_ids) for r in rows]
    nodes = ["heart"] + [f"j{ids[k]}" for k in range(len(rows))]
    has_child = {r[4] for r in rows}
    segs = []
    for k, (name, L, a, b, parent, _) in enumerate(rows):
        h, e = _wall(0.5 * (a + b))
        start = "heart" if parent < 0 else nodes[parent + 1]
        segs.append(Segment(ids[k], SegmentGeometry(L, a, b, h, e), start, nodes[k + 1], name))

    leaves = [k for k in range(len(rows)) if k not in has_child]
    cubes = np.array([rows[k][3] ** 3 for k in leaves])
    mean_flow = HEART["stroke_volume"] * HEART["heart_rate"] / 60.0
    r_total = (12000.0 - VENOUS_PRESSURE) / mean_flow
    terminals = {}
    for k, c in zip(leaves, cubes):
        r = r_total * cubes.sum() / c
        terminals[nodes[k + 1]] = WindkesselParams(0.15 * r, 0.85 * r, 0.25 / (0.85 * r), VENOUS_PRESSURE)
    if placeholder_capacitance is None:
        placeholder_capacitance = FULL_PLACEHOLDER_CAPACITANCE
    ph = _placeholders(placeholder_capacitance)
    return ArterialNetwork(segs, terminals, FULL_OBSERVED, FluidProps(), ph, dict(HEART), "full_arterial")


# Per-site placeholder capacitance of the full network (order of FULL_OBSERVED),
# from tune_placeholders(); sized so RK4 at 1/160 s stays stable.
FULL_PLACEHOLDER_CAPACITANCE = (5.12e-08, 5.12e-08, 5.12e-08, 1e-10, 1e-10, 2e-10, 1e-10, 2.56e-08, 8e-10, 1e-10)
# L*C of every LC placeholder, i.e. a resonance near 2.5 Hz as in desk7.
LC_PRODUCT = 4e-3


def _placeholders(caps) -> PlaceholderParams:
    caps = tuple(float(c) for c in caps)
    return PlaceholderParams("C", caps, tuple(LC_PRODUCT / c for c in caps), None)


def tune_placeholders(net: ArterialNetwork, step: float = 1.0 / 160.0, limit: float = 2.0, base: float = 1e-10):
    """Smallest per-site capacitances (doubling from ``base``) keeping ``|lambda| h <= limit``.

    Both placeholder variants are checked; each round doubles the
    capacitance of the sites carrying the fastest mode.
    """
    from .models import build_model

    caps = np.full(net.n_observed, base)
    for _ in range(200):
        probe = ArterialNetwork(net.segments, net.terminals, net.observed, net.fluid, _placeholders(caps),
                                net.heart, net.name)
        worst, site_weight = 0.0, None
        for variant in ("simple_C", "simple_LC"):
            m = build_model(probe, variant)
            A = m.linear_form()[0]
            lam, vec = np.linalg.eig(A)
            k = int(np.argmax(np.abs(lam)))
            if abs(lam[k]) * step > worst:
                worst = abs(lam[k]) * step
                v = np.abs(vec[:, k])
                site_weight = v[m.partition.art_index[:net.n_observed]]
        if worst <= limit:
            return tuple(float(c) for c in caps)
        hot = site_weight >= 0.2 * site_weight.max()
        caps[hot] *= 2.0
    raise RuntimeError("placeholder tuning did not converge")


def write_bundled(directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_network(desk7_network(), d / "desk7.net")
    save_network(full_network(), d / "full_arterial.net")


if __name__ == "__main__":
    write_bundled(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "data")
