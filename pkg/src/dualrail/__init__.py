"""Pulse-level simulator and analysis toolkit for dual-rail erasure qubits."""

__version__ = "0.1.0"

from .device import (CapacitanceNetwork, CouplerSpec, DeviceConfig, ReadoutSpec,
                     TransmonSpec, dual_rail_gap, effective_coupling,
                     flux_to_frequency, frequency_to_flux, network_coupling,
                     pad_coupling)
from .io import load_device_config, reference_device

__all__ = [
    "CapacitanceNetwork", "CouplerSpec", "DeviceConfig", "ReadoutSpec",
    "TransmonSpec", "dual_rail_gap", "effective_coupling", "flux_to_frequency",
    "frequency_to_flux", "network_coupling", "pad_coupling",
    "load_device_config", "reference_device", "__version__",
]
