"""Full-stack calibration pipeline and persistence.

A CalibrationSet bundles the single-qubit and coupler calibrations of a
device at its operating points, serializes to a JSON calibration file, and
is the handle every experiment driver takes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .device import DeviceConfig
from .errors import ConfigError, UnconfiguredError
from .gates import (CouplerCalibration, PairCalibration, PulseParams,
                    calibrate_coupler, calibrate_single_qubit)

CAL_SCHEMA = "dualrail-calibration/1"

# drive the rail away from the coupler doorway: cross-driving through the
# inter-pair dressing is weakest on the far rail
DEFAULT_DRIVE_RAILS = {0: "rail_a", 1: "rail_b", 2: "rail_b"}


@dataclass
class CalibrationSet:
    pairs: dict = field(default_factory=dict)      # pair index -> PairCalibration
    couplers: dict = field(default_factory=dict)   # coupler id -> CouplerCalibration

    def pair(self, index: int) -> PairCalibration:
        if index not in self.pairs:
            raise UnconfiguredError(f"pair {index} not calibrated")
        return self.pairs[index]

    def coupler(self, coupler_id: str) -> CouplerCalibration:
        if coupler_id not in self.couplers:
            raise UnconfiguredError(f"coupler {coupler_id!r} not calibrated")
        return self.couplers[coupler_id]

    def coupler_for_pairs(self, pair_i: int, pair_j: int) -> CouplerCalibration:
        for c2q in self.couplers.values():
            if {c2q.pair_i, c2q.pair_j} == {pair_i, pair_j}:
                return c2q
        raise UnconfiguredError(f"no calibrated coupler joining pairs {pair_i},{pair_j}")


def calibrate_stack(config: DeviceConfig, rail_freqs, couplings=None,
                    polish: bool = True, rotation_duration: float = 37.5,
                    progress=None) -> CalibrationSet:
    """Calibrate every pair at its bias and every requested coupling.

    ``rail_freqs`` is one resonant rail frequency per pair;  ``couplings``
    lists (coupler_id, pair_i, pair_j) with pair_i the CNOT control
    (defaults to the device's coupler bindings in order).  With ``polish``
    the entangling phases are closed-loop refined against the synthesized
    CNOT in a two-pair context.
    """
    out = CalibrationSet()
    for k, freq in enumerate(rail_freqs):
        rail_a, rail_b, _ = config.dual_rail_pairs[k]
        which = DEFAULT_DRIVE_RAILS.get(k, "rail_a")
        drive = rail_a if which == "rail_a" else rail_b
        if progress:
            progress(f"calibrating single-qubit gates, pair {k}")
        out.pairs[k] = calibrate_single_qubit(
            config, k, {rail_a: freq, rail_b: freq}, drive_rail=drive)
    if couplings is None:
        pair_of_rail = {}
        for idx, (ra, rb, _) in enumerate(config.dual_rail_pairs):
            pair_of_rail[ra] = idx
            pair_of_rail[rb] = idx
        couplings = [(cid, pair_of_rail[ri], pair_of_rail[rj])
                     for cid, ri, rj in config.coupler_bindings
                     if pair_of_rail[ri] in out.pairs and pair_of_rail[rj] in out.pairs]
    # seed idle points first: each coupler's calibration includes every
    # other coupler as an idling spectator, whose dispersive pull on the
    # shared pair shifts the interaction resonance
    from .gates import coupler_idle_frequency
    idle_seed = {}
    for coupler_id, pi, pj in couplings:
        idle_seed[coupler_id] = coupler_idle_frequency(
            config, out.pairs[pi], out.pairs[pj], coupler_id)
    for coupler_id, pi, pj in couplings:
        spectators = [(cid, idle_seed[cid]) for cid, *_ in couplings
                      if cid != coupler_id]
        if progress:
            progress(f"calibrating coupler {coupler_id}")
        c2q = calibrate_coupler(config, out.pairs[pi], out.pairs[pj], coupler_id,
                                spectator_couplers=spectators)
        c2q.pair_i, c2q.pair_j = pi, pj
        out.couplers[coupler_id] = c2q
    for coupler_id, pi, pj in couplings:
        if polish:
            if progress:
                progress(f"closed-loop phase polish, coupler {coupler_id}")
            from .circuits import CircuitContext, polish_correction_phases
            c2q = out.couplers[coupler_id]
            spectator_cals = [out.couplers[cid] for cid, *_ in couplings
                              if cid != coupler_id]
            ctx = CircuitContext(config, [out.pairs[pi], out.pairs[pj]],
                                 [c2q] + spectator_cals,
                                 cap=2, rotation_duration=rotation_duration)
            polish_correction_phases(ctx, c2q, dt_max=0.08, maxiter=30)
    return out


def _pulse_to_dict(p: PulseParams) -> dict:
    return {"amplitude": p.amplitude, "beta": p.beta, "phase": p.phase}


def _pulse_from_dict(d: dict) -> PulseParams:
    return PulseParams(d["amplitude"], d["beta"], d["phase"])


def save_calibration(cal_set: CalibrationSet, path) -> None:
    doc = {"schema": CAL_SCHEMA, "pairs": {}, "couplers": {}}
    for k, cal in cal_set.pairs.items():
        doc["pairs"][str(k)] = {
            "pair_index": cal.pair_index,
            "rail_a": cal.rail_a, "rail_b": cal.rail_b,
            "bias": cal.bias, "drive_rail": cal.drive_rail,
            "f_drive": cal.f_drive, "duration": cal.duration,
            "axis_sign": cal.axis_sign,
            "energy_0l": cal.energy_0l, "energy_1l": cal.energy_1l,
            "gates": {n: _pulse_to_dict(p) for n, p in cal.gates.items()},
            "gates_alt": {str(d): {n: _pulse_to_dict(p) for n, p in t.items()}
                          for d, t in cal.gates_alt.items()},
        }
    for cid, c in cal_set.couplers.items():
        doc["couplers"][cid] = {
            "coupler": c.coupler, "pair_i": c.pair_i, "pair_j": c.pair_j,
            "f_idle": c.f_idle, "f_swap": c.f_swap, "plateau": c.plateau,
            "edge": c.edge, "g_swap_mhz": c.g_swap_mhz,
            "phi_1": c.phi_1, "phi_2": c.phi_2, "phi_zz": c.phi_zz,
            "delta": c.delta, "dphi_1": c.dphi_1, "dphi_2": c.dphi_2,
            "ddelta": c.ddelta, "z_pre": c.z_pre, "z_post": c.z_post,
            "have_idle": c.have_idle, "have_swap": c.have_swap,
            "have_chevron": c.have_chevron, "have_phases": c.have_phases,
        }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_calibration(path) -> CalibrationSet:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"calibration file not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("schema") != CAL_SCHEMA:
        raise ConfigError(f"unsupported calibration schema {doc.get('schema')!r}")
    out = CalibrationSet()
    for key, d in doc["pairs"].items():
        cal = PairCalibration(
            pair_index=d["pair_index"], rail_a=d["rail_a"], rail_b=d["rail_b"],
            bias=d["bias"], drive_rail=d["drive_rail"], f_drive=d["f_drive"],
            duration=d["duration"], axis_sign=d["axis_sign"],
        )
        cal.energy_0l, cal.energy_1l = d["energy_0l"], d["energy_1l"]
        cal.gates = {n: _pulse_from_dict(p) for n, p in d["gates"].items()}
        cal.gates_alt = {float(dd): {n: _pulse_from_dict(p) for n, p in t.items()}
                         for dd, t in d.get("gates_alt", {}).items()}
        out.pairs[int(key)] = cal
    for cid, d in doc["couplers"].items():
        c = CouplerCalibration(coupler=d["coupler"], pair_i=d["pair_i"],
                               pair_j=d["pair_j"])
        for attr in ("f_idle", "f_swap", "plateau", "edge", "g_swap_mhz",
                     "phi_1", "phi_2", "phi_zz", "delta", "dphi_1", "dphi_2",
                     "ddelta", "z_pre", "z_post", "have_idle", "have_swap",
                     "have_chevron", "have_phases"):
            setattr(c, attr, d[attr])
        out.couplers[cid] = c
    return out
