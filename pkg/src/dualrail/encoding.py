"""Dual-rail logical encoding: frames, classification, post-selection and
adiabatic logical readout."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .device import DeviceConfig, GHZ_TO_RADNS
from .dynamics import (Envelope, PulseSchedule, ScheduleHamiltonian, Segment,
                       Waveform, propagate_unitary)
from .errors import ContractError, EmptyResultError
from .hamiltonian import (ModeSpace, build_hamiltonian, diagonalize,
                          excitation_manifold)


@dataclass(frozen=True)
class LogicalFrame:
    """Dressed logical basis of one dual-rail pair at its operating bias.

    Basis vectors live on the simulated mode space (rails plus optionally
    the ancilla); the erasure vector is the dressed pair ground state.
    Energies (rad/ns) define the interaction-frame rotation of each basis
    state.
    """

    pair_index: int
    space: ModeSpace
    rail_a: str
    rail_b: str
    vec_0l: np.ndarray
    vec_1l: np.ndarray
    vec_00: np.ndarray
    energy_0l: float
    energy_1l: float
    energy_00: float

    @property
    def gap_mhz(self) -> float:
        return (self.energy_1l - self.energy_0l) / (2.0 * math.pi * 1e-3)

    def projector_logical(self) -> np.ndarray:
        return (np.outer(self.vec_0l, self.vec_0l.conj())
                + np.outer(self.vec_1l, self.vec_1l.conj()))

    def projector_erasure(self) -> np.ndarray:
        return np.outer(self.vec_00, self.vec_00.conj())

    def projector_leakage(self) -> np.ndarray:
        dim = self.space.dimension
        return np.eye(dim) - self.projector_logical() - self.projector_erasure()


def build_logical_frame(config: DeviceConfig, pair_index: int,
                        bias_frequencies: dict, include_ancilla: bool = True,
                        levels: int = 3,
                        ancilla_levels: int | None = None) -> LogicalFrame:
    """Frame from the dressed eigenvectors at the operating bias.

    The logical basis is taken from the eigensolution rather than from bare
    states: ancilla hybridization slightly rotates it.  Gauge: the overlap
    of each logical vector with bare |rail_b excited> is real positive, so
    |0_L> tends to (|01> - |10>)/sqrt(2) and |1_L> to the symmetric state.
    """
    rail_a, rail_b, ancilla = config.dual_rail_pairs[pair_index]
    modes = [rail_a, rail_b] + ([ancilla] if include_ancilla else [])
    mode_levels = [levels] * len(modes)
    if include_ancilla and ancilla_levels is not None:
        mode_levels[-1] = ancilla_levels
    space = ModeSpace(tuple(modes), tuple(mode_levels))
    freqs = {m: bias_frequencies[m] for m in modes}
    sol = diagonalize(build_hamiltonian(config, freqs, space))

    one_exc = excitation_manifold(sol, 1)
    # rail-dominated single-excitation states: largest weight on the rails
    occ = space.occupation_arrays()
    col_a, col_b = space.mode_index(rail_a), space.mode_index(rail_b)
    rail_weight = []
    for i in one_exc:
        w = np.abs(sol.eigenvectors[:, i]) ** 2
        rail_weight.append(w @ (occ[:, col_a] + occ[:, col_b]))
    chosen = [one_exc[i] for i in np.argsort(rail_weight)[-2:]]
    chosen.sort(key=lambda i: sol.eigenvalues[i])
    lo, hi = chosen

    bare_01 = np.zeros(space.dimension)
    occ_01 = [0] * len(modes)
    occ_01[space.mode_index(rail_b)] = 1
    bare_01[space.index_of(tuple(occ_01))] = 1.0

    def gauge(vec):
        phase = np.vdot(bare_01, vec)
        if abs(phase) < 1e-12:
            return vec
        return vec * (abs(phase) / phase)

    vec_0l = gauge(sol.eigenvectors[:, lo])
    vec_1l = gauge(sol.eigenvectors[:, hi])
    ground = int(np.argmin(sol.eigenvalues))
    vec_00 = sol.eigenvectors[:, ground]
    k = int(np.argmax(np.abs(vec_00)))
    vec_00 = vec_00 * (abs(vec_00[k]) / vec_00[k])
    return LogicalFrame(
        pair_index=pair_index, space=space, rail_a=rail_a, rail_b=rail_b,
        vec_0l=vec_0l, vec_1l=vec_1l, vec_00=vec_00,
        energy_0l=float(sol.eigenvalues[lo]), energy_1l=float(sol.eigenvalues[hi]),
        energy_00=float(sol.eigenvalues[ground]),
    )


def logical_encode(frame: LogicalFrame, amplitudes) -> np.ndarray:
    """Physical state for logical amplitudes (a0, a1)."""
    a0, a1 = complex(amplitudes[0]), complex(amplitudes[1])
    norm = math.sqrt(abs(a0) ** 2 + abs(a1) ** 2)
    if abs(norm - 1.0) > 1e-6:
        raise ContractError("logical amplitudes must be normalized")
    psi = a0 * frame.vec_0l + a1 * frame.vec_1l
    return psi / np.linalg.norm(psi)


def classify(frame: LogicalFrame, state: np.ndarray) -> dict:
    """Born-rule distribution over {0_L, 1_L, erasure, leakage}.

    Accepts a state vector or a density matrix on the frame's space;
    leakage is everything outside the logical and pair-ground sectors.
    """
    state = np.asarray(state)
    if state.ndim == 1:
        norm = np.linalg.norm(state)
        if abs(norm - 1.0) > 1e-6:
            raise ContractError("state must be normalized")
        p0 = abs(np.vdot(frame.vec_0l, state)) ** 2
        p1 = abs(np.vdot(frame.vec_1l, state)) ** 2
        pe = abs(np.vdot(frame.vec_00, state)) ** 2
    else:
        p0 = float(np.real(frame.vec_0l.conj() @ state @ frame.vec_0l))
        p1 = float(np.real(frame.vec_1l.conj() @ state @ frame.vec_1l))
        pe = float(np.real(frame.vec_00.conj() @ state @ frame.vec_00))
    leak = max(0.0, 1.0 - p0 - p1 - pe)
    return {"0L": p0, "1L": p1, "erasure": pe, "leakage": leak}


@dataclass(frozen=True)
class ShotRecord:
    """Per-repetition outcome log."""

    shot_index: int
    erasure_flags: tuple
    ancilla_outcomes: tuple
    final_outcome: str
    seed: int

    def __post_init__(self):
        if self.final_outcome not in ("0", "1", "erasure", "leakage"):
            raise ContractError(f"unknown outcome {self.final_outcome!r}")


def postselect(shots):
    """Keep shots whose checks never flagged and whose final classification
    stayed logical; leakage folds into erasure at this boundary.

    Returns (kept_shots, survival_probability, binomial_error).
    """
    shots = list(shots)
    if not shots:
        raise ContractError("postselect requires at least one shot")
    kept = [s for s in shots
            if not any(s.erasure_flags) and s.final_outcome in ("0", "1")]
    if not kept:
        raise EmptyResultError("every shot was flagged or erased")
    p = len(kept) / len(shots)
    err = math.sqrt(max(p * (1.0 - p), 1.0 / len(shots)) / len(shots))
    return kept, p, err


@dataclass(frozen=True)
class ReadoutMapReport:
    """Overlap of the ramped logical states with the readout targets.

    ``bare_*`` is the overlap with the bare rail excitations |10> and |01>;
    ``branch_*`` is the overlap with the dressed branches at the final bias
    that adiabatically connect to them (what a dispersive readout of the
    detuned qubits actually discriminates).  The bare overlaps saturate at
    the final mixing angle, the branch overlaps approach one for a slow
    ramp.
    """

    duration: float
    bare_0l: float
    bare_1l: float
    branch_0l: float
    branch_1l: float

    @property
    def bare_fidelity(self) -> float:
        return 0.5 * (self.bare_0l + self.bare_1l)

    @property
    def branch_fidelity(self) -> float:
        return 0.5 * (self.branch_0l + self.branch_1l)


def adiabatic_readout_map(config: DeviceConfig, frame: LogicalFrame,
                          bias_frequencies: dict, ramp_duration: float,
                          detuning_ghz: float = 0.35,
                          dt_max: float = 0.2) -> ReadoutMapReport:
    """Simulate the detuning ramp that maps |0_L> -> |10> and |1_L> -> |01>.

    Rail A is ramped down and rail B up by ``detuning_ghz`` each, so the
    lower dressed branch lands on the bare rail-A excitation.  A too-fast
    ramp simply reports low fidelity.
    """
    space = frame.space
    down = Segment(0.0, Envelope.cosine_ramp(ramp_duration), -abs(detuning_ghz))
    up = Segment(0.0, Envelope.cosine_ramp(ramp_duration), +abs(detuning_ghz))
    if ramp_duration == 0.0:
        out0, out1 = frame.vec_0l.astype(complex), frame.vec_1l.astype(complex)
    else:
        schedule = PulseSchedule(
            ramp_duration,
            {f"freq_mod:{frame.rail_a}": Waveform(0.0, (down,)),
             f"freq_mod:{frame.rail_b}": Waveform(0.0, (up,))},
            sample_dt=dt_max)
        ham = ScheduleHamiltonian(config, space, bias_frequencies, schedule)
        batch = np.stack([frame.vec_0l, frame.vec_1l], axis=1)
        final = propagate_unitary(ham, batch, dt_max=dt_max)
        out0, out1 = final[:, 0], final[:, 1]
    n_modes = len(space.modes)
    occ10 = [0] * n_modes
    occ10[space.mode_index(frame.rail_a)] = 1
    occ01 = [0] * n_modes
    occ01[space.mode_index(frame.rail_b)] = 1
    bare10 = np.zeros(space.dimension)
    bare10[space.index_of(tuple(occ10))] = 1.0
    bare01 = np.zeros(space.dimension)
    bare01[space.index_of(tuple(occ01))] = 1.0

    final_freqs = dict(bias_frequencies)
    final_freqs[frame.rail_a] = bias_frequencies[frame.rail_a] - abs(detuning_ghz)
    final_freqs[frame.rail_b] = bias_frequencies[frame.rail_b] + abs(detuning_ghz)
    sol = diagonalize(build_hamiltonian(config, final_freqs, space))
    one_exc = excitation_manifold(sol, 1)
    best10 = max(one_exc, key=lambda i: abs(np.vdot(bare10, sol.eigenvectors[:, i])))
    best01 = max(one_exc, key=lambda i: abs(np.vdot(bare01, sol.eigenvectors[:, i])))
    branch10 = sol.eigenvectors[:, best10]
    branch01 = sol.eigenvectors[:, best01]
    return ReadoutMapReport(
        duration=ramp_duration,
        bare_0l=float(abs(bare10 @ out0) ** 2),
        bare_1l=float(abs(bare01 @ out1) ** 2),
        branch_0l=float(abs(np.vdot(branch10, out0)) ** 2),
        branch_1l=float(abs(np.vdot(branch01, out1)) ** 2),
    )
