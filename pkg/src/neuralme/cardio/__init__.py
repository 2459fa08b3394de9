"""Arterial network models: static pipes, windkessel terminals, placeholders."""

from .circuit import Circuit, FlowSolution, pipe_resistance, segment_compliance, solve_flows, tapered_resistance
from .heart import HeartProfile, heart_inflow, inflow_input
from .models import VARIANTS, CardioModel, build_model, canonical_variant, default_heart
from .network import (ArterialNetwork, FluidProps, PlaceholderParams, Segment, SegmentGeometry,
                      WindkesselParams, bundled_network, bundled_network_path, load_network, network_from_dict,
                      network_to_dict, parse_network, save_network)
from .waveforms import reference_waveforms, simulate_model

__all__ = [
    "ArterialNetwork", "CardioModel", "Circuit", "FlowSolution", "FluidProps", "HeartProfile",
    "PlaceholderParams", "Segment", "SegmentGeometry", "VARIANTS", "WindkesselParams", "build_model",
    "bundled_network", "bundled_network_path", "canonical_variant", "default_heart", "heart_inflow", "inflow_input",
    "load_network", "network_from_dict", "network_to_dict", "parse_network", "pipe_resistance",
    "reference_waveforms", "save_network", "segment_compliance", "simulate_model", "solve_flows",
    "tapered_resistance",
]
