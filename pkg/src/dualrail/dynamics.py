"""Time evolution under pulse schedules.

Three engines share one schedule representation: closed-system propagation
of state vectors, Lindblad density-matrix evolution, and quantum-trajectory
Monte Carlo with jump records.

Frames and carriers: waveform carriers are referenced to global schedule
time, so pulses concatenated into one schedule are phase coherent the way a
numerically controlled oscillator keeps them in hardware.  Gate channels are
extracted from standalone schedules starting at t = 0 and reported in the
interaction frame of the static bias Hamiltonian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .device import DeviceConfig, GHZ_TO_RADNS, MHZ_TO_RADNS, flux_to_frequency
from .errors import ConfigError, ContractError
from .hamiltonian import HamiltonianBuilder, ModeSpace, lowering_operator, number_diagonal

DEFAULT_DT_PULSE = 0.05   # ns
DEFAULT_DT_IDLE = 1.0     # ns
JUMP_TIME_RESOLUTION = 1e-3  # ns, bisection refinement of jump times


# ---------------------------------------------------------------------------
# envelopes and schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    """Pulse envelope, normalized to peak 1.

    Kinds: ``constant``; ``flat_top_cosine`` with half-cosine ramps that are
    C1 at the plateau junctions; ``gaussian_drag`` whose derivative
    quadrature is the exact time derivative of the truncated, edge-zeroed
    gaussian, scaled by ``drag_beta`` (derivative expressed per ns); and
    ``cosine_ramp``, a monotone 0 -> 1 half-cosine used for adiabatic
    detuning ramps.
    """

    kind: str
    duration: float
    plateau: float = 0.0
    edge: float = 0.0
    sigma: float = 0.0
    drag_beta: float = 0.0

    @staticmethod
    def constant(duration: float) -> "Envelope":
        return Envelope("constant", duration)

    @staticmethod
    def flat_top_cosine(plateau: float, edge: float) -> "Envelope":
        return Envelope("flat_top_cosine", plateau + 2.0 * edge,
                        plateau=plateau, edge=edge)

    @staticmethod
    def gaussian_drag(sigma: float, total: float, drag_beta: float = 0.0) -> "Envelope":
        return Envelope("gaussian_drag", total, sigma=sigma, drag_beta=drag_beta)

    @staticmethod
    def cosine_ramp(duration: float) -> "Envelope":
        return Envelope("cosine_ramp", duration)

    def value(self, t: float) -> float:
        if t < 0.0 or t > self.duration:
            return 0.0
        if self.kind == "constant":
            return 1.0
        if self.kind == "cosine_ramp":
            return 0.5 * (1.0 - math.cos(math.pi * t / self.duration))
        if self.kind == "flat_top_cosine":
            e = self.edge
            if e <= 0:
                return 1.0
            if t < e:
                return 0.5 * (1.0 - math.cos(math.pi * t / e))
            if t > self.duration - e:
                return 0.5 * (1.0 - math.cos(math.pi * (self.duration - t) / e))
            return 1.0
        c = 0.5 * self.duration
        base = math.exp(-0.5 * ((t - c) / self.sigma) ** 2)
        floor = math.exp(-0.5 * (c / self.sigma) ** 2)
        return (base - floor) / (1.0 - floor)

    def derivative(self, t: float) -> float:
        if t < 0.0 or t > self.duration:
            return 0.0
        if self.kind == "constant":
            return 0.0
        if self.kind == "cosine_ramp":
            return 0.5 * math.pi / self.duration * math.sin(math.pi * t / self.duration)
        if self.kind == "flat_top_cosine":
            e = self.edge
            if e <= 0:
                return 0.0
            if t < e:
                return 0.5 * math.pi / e * math.sin(math.pi * t / e)
            if t > self.duration - e:
                return -0.5 * math.pi / e * math.sin(math.pi * (self.duration - t) / e)
            return 0.0
        c = 0.5 * self.duration
        base = math.exp(-0.5 * ((t - c) / self.sigma) ** 2)
        floor = math.exp(-0.5 * (c / self.sigma) ** 2)
        return -(t - c) / self.sigma ** 2 * base / (1.0 - floor)


@dataclass(frozen=True)
class Segment:
    """One envelope placed on a channel, with optional carrier.

    ``amplitude`` is in the channel's units (GHz for frequency modulation,
    flux-quantum units for flux).  The carrier argument is
    2*pi*carrier_freq*t + carrier_phase with t the global schedule time.
    ``tag`` marks a noise-context window while the segment is active.
    """

    start: float
    envelope: Envelope
    amplitude: float
    carrier_freq: float = 0.0
    carrier_phase: float = 0.0
    tag: str | None = None

    @property
    def end(self) -> float:
        return self.start + self.envelope.duration

    def value(self, t: float) -> float:
        tl = t - self.start
        if tl < 0.0 or tl > self.envelope.duration:
            return 0.0
        s = self.envelope.value(tl)
        if self.carrier_freq == 0.0:
            return self.amplitude * s
        theta = GHZ_TO_RADNS * self.carrier_freq * t + self.carrier_phase
        out = s * math.cos(theta)
        beta = self.envelope.drag_beta
        if beta != 0.0:
            out += beta * self.envelope.derivative(tl) * math.sin(theta)
        return self.amplitude * out


@dataclass(frozen=True)
class Waveform:
    baseline: float = 0.0
    segments: tuple = ()

    def value(self, t: float) -> float:
        return self.baseline + sum(seg.value(t) for seg in self.segments)

    def is_static_over(self, t0: float, t1: float) -> bool:
        for seg in self.segments:
            if seg.end <= t0 + 1e-12 or seg.start >= t1 - 1e-12:
                continue
            if seg.carrier_freq != 0.0 or seg.envelope.kind != "constant":
                return False
            if not (seg.start <= t0 + 1e-12 and seg.end >= t1 - 1e-12):
                return False
        return True


@dataclass(frozen=True)
class PulseSchedule:
    """Time-segmented multi-channel control record.

    Channel keys are ``"freq_mod:<mode>"`` (additive GHz frequency offset,
    the small-signal image of a flux-modulation drive) and ``"flux:<mode>"``
    (absolute flux in flux-quantum units, mapped through the transmon
    dispersion; the waveform baseline holds the static bias).
    """

    duration: float
    channels: dict = field(default_factory=dict)
    sample_dt: float = DEFAULT_DT_PULSE

    def __post_init__(self):
        if self.sample_dt <= 0:
            raise ConfigError("sample_dt must be positive")
        if self.duration < 0:
            raise ConfigError("duration must be non-negative")
        for key, wave in self.channels.items():
            kind = key.split(":", 1)[0]
            if kind not in ("freq_mod", "flux"):
                raise ConfigError(f"unknown channel kind in {key!r}")
            for seg in wave.segments:
                if seg.start < -1e-12 or seg.end > self.duration + 1e-9:
                    raise ConfigError(
                        f"segment [{seg.start}, {seg.end}] outside schedule "
                        f"duration {self.duration} on {key!r}")

    def validate_against(self, config: DeviceConfig) -> None:
        known = {s.id for s in config.transmons + config.ancillas + config.couplers}
        for key in self.channels:
            mode = key.split(":", 1)[1]
            if mode not in known:
                raise ConfigError(f"channel {key!r} references unknown mode")

    def tag_windows(self):
        windows = []
        for wave in self.channels.values():
            for seg in wave.segments:
                if seg.tag is not None:
                    windows.append((seg.start, seg.end, seg.tag))
        return sorted(windows)

    def tag_at(self, t: float):
        for t0, t1, tag in self.tag_windows():
            if t0 <= t < t1:
                return tag
        return None


def concatenate(schedules) -> PulseSchedule:
    """Append schedules in time; shared channels must agree on baselines."""
    total = 0.0
    channels: dict = {}
    sample_dt = min(s.sample_dt for s in schedules)
    for sched in schedules:
        for key, wave in sched.channels.items():
            if key not in channels:
                channels[key] = Waveform(wave.baseline, ())
            elif channels[key].baseline != wave.baseline:
                raise ConfigError(f"baseline mismatch on {key!r} during concatenation")
            shifted = tuple(replace(s, start=s.start + total) for s in wave.segments)
            channels[key] = Waveform(wave.baseline,
                                     channels[key].segments + shifted)
        total += sched.duration
    return PulseSchedule(total, channels, sample_dt)


def idle_schedule(duration: float, flux_baselines: dict | None = None,
                  tag: str | None = None,
                  tag_channel: str | None = None) -> PulseSchedule:
    """Schedule with no drives; optionally carries a noise-context tag."""
    channels = {}
    for key, baseline in (flux_baselines or {}).items():
        channels[key] = Waveform(baseline, ())
    if tag is not None:
        key = tag_channel or (next(iter(channels)) if channels else None)
        marker = Segment(0.0, Envelope.constant(duration), 0.0, tag=tag)
        if key is None:
            raise ConfigError("a tagged idle needs a channel to carry the tag")
        base = channels.get(key, Waveform(0.0, ()))
        channels[key] = Waveform(base.baseline, base.segments + (marker,))
    return PulseSchedule(duration, channels, DEFAULT_DT_IDLE)


# ---------------------------------------------------------------------------
# noise model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    """White-noise rates per mode (1/us) plus per-pair coupling (gap) noise.

    ``gap_dephasing`` is keyed by (rail_a, rail_b) tuples and models white
    fluctuations of the intra-pair coupling; it is the only channel that
    dephases the logical Z basis directly.  ``context_overrides`` maps a
    schedule tag to category->mode->rate replacements applied while the tag
    is active (the coupler-at-swap decoherence table).
    """

    damping: dict = field(default_factory=dict)
    dephasing: dict = field(default_factory=dict)
    heating: dict = field(default_factory=dict)
    gap_dephasing: dict = field(default_factory=dict)
    context_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for cat in (self.damping, self.dephasing, self.heating):
            for mode, rate in cat.items():
                if rate < 0:
                    raise ConfigError(f"negative rate for {mode!r}")
        for key, rate in self.gap_dephasing.items():
            if rate < 0:
                raise ConfigError(f"negative gap rate for {key!r}")

    @staticmethod
    def ideal() -> "NoiseModel":
        return NoiseModel()

    @staticmethod
    def from_device(config: DeviceConfig, modes=None) -> "NoiseModel":
        modes = modes or [s.id for s in config.transmons + config.ancillas + config.couplers]
        damping = {m: 1.0 / config.mode(m).t1 for m in modes}
        dephasing = {m: 1.0 / config.mode(m).t_phi for m in modes}
        heating = {m: config.mode(m).heating_rate for m in modes}
        return NoiseModel(damping, dephasing, heating)

    @property
    def is_trivial(self) -> bool:
        return not any([any(self.damping.values()), any(self.dephasing.values()),
                        any(self.heating.values()), any(self.gap_dephasing.values())])

    def resolved(self, tag: str | None) -> "NoiseModel":
        """Rates with the override table for ``tag`` applied."""
        if tag is None or tag not in self.context_overrides:
            return replace(self, context_overrides={})
        over = self.context_overrides[tag]

        def merge(base, key):
            out = dict(base)
            out.update(over.get(key, {}))
            return out

        return NoiseModel(
            damping=merge(self.damping, "damping"),
            dephasing=merge(self.dephasing, "dephasing"),
            heating=merge(self.heating, "heating"),
            gap_dephasing=merge(self.gap_dephasing, "gap_dephasing"),
            context_overrides={},
        )


# ---------------------------------------------------------------------------
# schedule-resolved Hamiltonian
# ---------------------------------------------------------------------------

class ScheduleHamiltonian:
    """Binds a schedule to a device and mode space; yields H(t) in rad/ns."""

    def __init__(self, config: DeviceConfig, space: ModeSpace,
                 base_frequencies: dict, schedule: PulseSchedule | None = None,
                 coupling_form: str = "exchange"):
        self.config = config
        self.space = space
        self.schedule = schedule if schedule is not None else PulseSchedule(0.0, {})
        self.schedule.validate_against(config)
        self.base_frequencies = dict(base_frequencies)
        for mode in space.modes:
            if mode not in self.base_frequencies and \
                    f"flux:{mode}" not in self.schedule.channels:
                raise ConfigError(f"no base frequency or flux channel for {mode!r}")
        self.builder = HamiltonianBuilder(config, space, coupling_form)

    @property
    def duration(self) -> float:
        return self.schedule.duration

    def frequencies_at(self, t: float) -> dict:
        freqs = {}
        for mode in self.space.modes:
            flux_key = f"flux:{mode}"
            if flux_key in self.schedule.channels:
                flux = self.schedule.channels[flux_key].value(t)
                f = flux_to_frequency(self.config.mode(mode), flux)
            else:
                f = self.base_frequencies[mode]
            mod_key = f"freq_mod:{mode}"
            if mod_key in self.schedule.channels:
                f = f + self.schedule.channels[mod_key].value(t)
            freqs[mode] = f
        return freqs

    def matrix_at(self, t: float) -> np.ndarray:
        return self.builder.matrix(self.frequencies_at(t))

    def static_matrix(self) -> np.ndarray:
        """H with every channel at its baseline (idle bias)."""
        freqs = {}
        for mode in self.space.modes:
            flux_key = f"flux:{mode}"
            if flux_key in self.schedule.channels:
                freqs[mode] = flux_to_frequency(
                    self.config.mode(mode),
                    self.schedule.channels[flux_key].baseline)
            else:
                freqs[mode] = self.base_frequencies[mode]
        return self.builder.matrix(freqs)

    def is_static_over(self, t0: float, t1: float) -> bool:
        for mode in self.space.modes:
            for key in (f"flux:{mode}", f"freq_mod:{mode}"):
                wave = self.schedule.channels.get(key)
                if wave is not None and not wave.is_static_over(t0, t1):
                    return False
        return True

    def time_grid(self, dt_max: float, extra: tuple = ()):
        """(t0, t1, static) step triples honoring segment boundaries; spans
        with constant H collapse into a single exact step."""
        edges = {0.0, self.duration}
        for wave in self.schedule.channels.values():
            for seg in wave.segments:
                edges.add(min(max(0.0, seg.start), self.duration))
                edges.add(min(self.duration, seg.end))
        for t in extra:
            edges.add(min(max(float(t), 0.0), self.duration))
        edges = sorted(edges)
        grid = []
        for t0, t1 in zip(edges[:-1], edges[1:]):
            if t1 - t0 < 1e-12:
                continue
            if self.is_static_over(t0, t1):
                grid.append((t0, t1, True))
            else:
                n = max(1, int(math.ceil((t1 - t0) / dt_max - 1e-12)))
                dt = (t1 - t0) / n
                for k in range(n):
                    grid.append((t0 + k * dt, t0 + (k + 1) * dt, False))
        return grid


# ---------------------------------------------------------------------------
# collapse operators
# ---------------------------------------------------------------------------

class _MappedOp:
    """Jump operator that maps each basis state to at most one other state
    (mode lowering/raising); rows and cols are both duplicate-free."""

    __slots__ = ("rows", "cols", "vals", "mode", "jump_type", "dim")

    def __init__(self, rows, cols, vals, mode, jump_type, dim):
        self.rows = np.asarray(rows, dtype=int)
        self.cols = np.asarray(cols, dtype=int)
        self.vals = np.asarray(vals, dtype=float)
        self.mode = mode
        self.jump_type = jump_type
        self.dim = dim

    def weight_diag(self) -> np.ndarray:
        d = np.zeros(self.dim)
        d[self.cols] = self.vals ** 2
        return d

    def sandwich(self, rho: np.ndarray) -> np.ndarray:
        out = np.zeros_like(rho)
        out[np.ix_(self.rows, self.rows)] = \
            (self.vals[:, None] * self.vals[None, :]) * rho[np.ix_(self.cols, self.cols)]
        return out

    def apply(self, psi: np.ndarray) -> np.ndarray:
        out = np.zeros_like(psi)
        out[self.rows] = self.vals * psi[self.cols] if psi.ndim == 1 else \
            self.vals[:, None] * psi[self.cols]
        return out

    def jump_weight(self, psi: np.ndarray) -> float:
        return float(np.sum(self.vals ** 2 * np.abs(psi[self.cols]) ** 2))


class _DenseOp:
    """General jump operator stored dense (intra-pair coupling noise)."""

    __slots__ = ("matrix", "weight", "mode", "jump_type")

    def __init__(self, matrix, mode, jump_type):
        self.matrix = matrix
        self.weight = matrix.conj().T @ matrix
        self.mode = mode
        self.jump_type = jump_type

    def sandwich(self, rho: np.ndarray) -> np.ndarray:
        return self.matrix @ rho @ self.matrix.conj().T

    def apply(self, psi: np.ndarray) -> np.ndarray:
        return self.matrix @ psi

    def jump_weight(self, psi: np.ndarray) -> float:
        return float(np.real(np.vdot(psi, self.weight @ psi)))


class _DiagOp:
    """Diagonal jump operator (per-mode dephasing), used for trajectories."""

    __slots__ = ("diag", "mode", "jump_type")

    def __init__(self, diag, mode, jump_type="dephase"):
        self.diag = diag
        self.mode = mode
        self.jump_type = jump_type

    def apply(self, psi: np.ndarray) -> np.ndarray:
        return self.diag * psi if psi.ndim == 1 else self.diag[:, None] * psi

    def jump_weight(self, psi: np.ndarray) -> float:
        return float(np.sum(self.diag ** 2 * np.abs(psi) ** 2))


class CollapseSet:
    """All jump operators of a NoiseModel on a ModeSpace, rates in 1/ns."""

    def __init__(self, noise: NoiseModel, space: ModeSpace, config: DeviceConfig):
        dim = space.dimension
        self.dim = dim
        self.mapped_ops: list[_MappedOp] = []
        self.deph_vectors: list[tuple[str, np.ndarray]] = []
        self.dense_ops: list[_DenseOp] = []
        for mode in space.modes:
            gamma1 = noise.damping.get(mode, 0.0) * 1e-3
            if gamma1 > 0:
                rows, cols, vals = _op_triplets(space, mode, lower=True)
                self.mapped_ops.append(_MappedOp(
                    rows, cols, math.sqrt(gamma1) * vals, mode, "decay", dim))
            gh = noise.heating.get(mode, 0.0) * 1e-3
            if gh > 0:
                rows, cols, vals = _op_triplets(space, mode, lower=False)
                self.mapped_ops.append(_MappedOp(
                    rows, cols, math.sqrt(gh) * vals, mode, "heat", dim))
            gphi = noise.dephasing.get(mode, 0.0) * 1e-3
            if gphi > 0:
                ell = math.sqrt(gphi / 2.0) * (2.0 * number_diagonal(space, mode) - 1.0)
                self.deph_vectors.append((mode, ell))
        for key, rate in noise.gap_dephasing.items():
            rail_a, rail_b = key
            if rail_a not in space.modes or rail_b not in space.modes:
                continue
            g = rate * 1e-3
            if g <= 0:
                continue
            a = lowering_operator(space, rail_a)
            b = lowering_operator(space, rail_b)
            exch = math.sqrt(g) * (a.T @ b + b.T @ a)
            self.dense_ops.append(_DenseOp(exch, f"{rail_a}+{rail_b}", "dephase"))

        self._w_mapped = np.zeros(dim)
        for op in self.mapped_ops:
            self._w_mapped += op.weight_diag()
        self._deph_factor = None
        self._w_deph = np.zeros(dim)
        if self.deph_vectors:
            self._deph_factor = np.zeros((dim, dim))
            for _, ell in self.deph_vectors:
                self._deph_factor += -0.5 * (ell[:, None] - ell[None, :]) ** 2
                self._w_deph += ell ** 2
        self._w_dense = None
        if self.dense_ops:
            self._w_dense = sum(op.weight for op in self.dense_ops)

    @property
    def is_empty(self) -> bool:
        return not self.mapped_ops and not self.deph_vectors and not self.dense_ops

    def dissipator(self, rho: np.ndarray) -> np.ndarray:
        """Lindblad dissipator D(rho); traceless by construction."""
        out = np.zeros_like(rho)
        for op in self.mapped_ops:
            out += op.sandwich(rho)
        out -= 0.5 * (self._w_mapped[:, None] + self._w_mapped[None, :]) * rho
        if self._deph_factor is not None:
            out += self._deph_factor * rho
        for op in self.dense_ops:
            out += op.sandwich(rho)
        if self._w_dense is not None:
            out -= 0.5 * (self._w_dense @ rho + rho @ self._w_dense)
        return out

    def total_weight(self):
        """(diagonal part, dense part or None) of sum over L of L_dag L."""
        return self._w_mapped + self._w_deph, self._w_dense

    def jump_channels(self):
        channels: list = list(self.mapped_ops)
        for mode, ell in self.deph_vectors:
            channels.append(_DiagOp(ell, mode))
        channels.extend(self.dense_ops)
        return channels


def _op_triplets(space: ModeSpace, mode: str, lower: bool):
    basis = space.basis
    index = {s: i for i, s in enumerate(basis)}
    k = space.mode_index(mode)
    d_k = space.levels[k]
    rows, cols, vals = [], [], []
    for col, occ in enumerate(basis):
        n = occ[k]
        if lower:
            if n == 0:
                continue
            target = list(occ)
            target[k] = n - 1
            val = math.sqrt(n)
        else:
            if n + 1 >= d_k:
                continue
            target = list(occ)
            target[k] = n + 1
            if tuple(target) not in index:
                continue
            val = math.sqrt(n + 1)
        rows.append(index[tuple(target)])
        cols.append(col)
        vals.append(val)
    return np.array(rows, dtype=int), np.array(cols, dtype=int), np.array(vals)


# ---------------------------------------------------------------------------
# unitary propagation
# ---------------------------------------------------------------------------

def _check_normalized(state: np.ndarray):
    norms = np.linalg.norm(state, axis=0)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ContractError("input state is not normalized")


def _step_unitary(h: np.ndarray, dt: float) -> np.ndarray:
    w, v = scipy.linalg.eigh(h)
    return (v * np.exp(-1j * w * dt)) @ v.conj().T


def propagate_unitary(ham: ScheduleHamiltonian, state: np.ndarray,
                      dt_max: float = DEFAULT_DT_PULSE,
                      record_times=None):
    """Closed-system evolution by a product of piecewise-constant propagators.

    ``state`` may be a vector or a (dim, k) batch.  With ``record_times`` the
    return value is (final_state, [(t, state), ...]).
    """
    psi = np.asarray(state, dtype=complex)
    single = psi.ndim == 1
    if single:
        psi = psi[:, None]
    _check_normalized(psi)
    record_times = tuple(record_times) if record_times is not None else ()
    grid = ham.time_grid(dt_max, extra=record_times)
    records = []
    want = sorted(record_times)
    cursor = 0
    while cursor < len(want) and want[cursor] <= 1e-12:
        records.append((want[cursor], psi[:, 0].copy() if single else psi.copy()))
        cursor += 1
    for t0, t1, _static in grid:
        h = ham.matrix_at(0.5 * (t0 + t1))
        psi = _step_unitary(h, t1 - t0) @ psi
        while cursor < len(want) and want[cursor] <= t1 + 1e-12:
            records.append((want[cursor], psi[:, 0].copy() if single else psi.copy()))
            cursor += 1
    out = psi[:, 0] if single else psi
    if record_times is not None and len(record_times):
        return out, records
    return out


def schedule_unitary(ham: ScheduleHamiltonian, dt_max: float = DEFAULT_DT_PULSE) -> np.ndarray:
    """Full lab-frame propagator of the schedule."""
    u = np.eye(ham.space.dimension, dtype=complex)
    for t0, t1, _static in ham.time_grid(dt_max):
        u = _step_unitary(ham.matrix_at(0.5 * (t0 + t1)), t1 - t0) @ u
    return u


# ---------------------------------------------------------------------------
# Lindblad propagation
# ---------------------------------------------------------------------------

def _check_density(rho: np.ndarray):
    if abs(np.trace(rho) - 1.0) > 1e-6:
        raise ContractError("density matrix trace differs from one")
    if np.abs(rho - rho.conj().T).max() > 1e-8:
        raise ContractError("density matrix is not Hermitian")
    if scipy.linalg.eigvalsh(rho).min() < -1e-8:
        raise ContractError("density matrix is not positive semidefinite")


def evolve_lindblad(ham: ScheduleHamiltonian, noise: NoiseModel, rho: np.ndarray,
                    dt_max: float = DEFAULT_DT_PULSE, record_times=None,
                    validate: bool = True, idle_dt: float = DEFAULT_DT_IDLE):
    """Open-system evolution, exact stepwise unitary conjugation with a
    Strang-split midpoint dissipator.

    Accepts a (dim, dim) density matrix or an (n, dim, dim) stack evolved
    under the same schedule (used for channel extraction).  Trace is
    preserved to floating-point roundoff because every dissipator update is
    built from traceless increments.
    """
    rho = np.asarray(rho, dtype=complex)
    stacked = rho.ndim == 3
    if not stacked:
        rho = rho[None, :, :]
    if validate:
        for r in rho:
            _check_density(r)
    record_times = tuple(record_times) if record_times is not None else ()
    grid = ham.time_grid(dt_max, extra=record_times)
    collapse_cache: dict = {}

    def collapse_for(t: float) -> CollapseSet:
        tag = ham.schedule.tag_at(t)
        if tag not in collapse_cache:
            collapse_cache[tag] = CollapseSet(noise.resolved(tag), ham.space, ham.config)
        return collapse_cache[tag]

    def dissipate(stack, collapse, h):
        k1 = np.stack([collapse.dissipator(r) for r in stack])
        mid = stack + 0.5 * h * k1
        k2 = np.stack([collapse.dissipator(r) for r in mid])
        return stack + h * k2

    records = []
    want = sorted(record_times)
    cursor = 0
    while cursor < len(want) and want[cursor] <= 1e-12:
        records.append((want[cursor], rho.copy() if stacked else rho[0].copy()))
        cursor += 1
    for t0, t1, static in grid:
        dt = t1 - t0
        collapse = collapse_for(t0)
        h = ham.matrix_at(0.5 * (t0 + t1))
        if collapse.is_empty:
            u = _step_unitary(h, dt)
            rho = np.einsum("ij,njk,lk->nil", u, rho, u.conj())
        else:
            n_sub = 1 if not static else max(1, int(math.ceil(dt / idle_dt - 1e-12)))
            sub = dt / n_sub
            u = _step_unitary(h, sub)
            for _ in range(n_sub):
                rho = dissipate(rho, collapse, 0.5 * sub)
                rho = np.einsum("ij,njk,lk->nil", u, rho, u.conj())
                rho = dissipate(rho, collapse, 0.5 * sub)
        while cursor < len(want) and want[cursor] <= t1 + 1e-12:
            records.append((want[cursor], rho.copy() if stacked else rho[0].copy()))
            cursor += 1
    out = rho if stacked else rho[0]
    if record_times is not None and len(record_times):
        return out, records
    return out


# ---------------------------------------------------------------------------
# quantum trajectories
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryRecord:
    """Outcome of one Monte Carlo unraveling: normalized final state, jump
    log as (time_ns, mode_id, jump_type) tuples, and the shot's stream key."""

    final_state: np.ndarray
    jumps: list
    seed: int
    shot_index: int


class _ShotStream:
    """Per-shot RNG derived by counter-based splitting from the root seed."""

    def __init__(self, seed: int, shot: int):
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(shot,))
        self.rng = np.random.Generator(np.random.Philox(ss))

    def threshold(self) -> float:
        r = self.rng.random()
        while r <= 1e-300:
            r = self.rng.random()
        return r

    def choice(self, weights: np.ndarray) -> int:
        cum = np.cumsum(weights)
        return int(np.searchsorted(cum, self.rng.random() * cum[-1]))


class _NoJumpStep:
    """No-jump propagator over one grid interval with partial-time access,
    from the eigendecomposition of the non-Hermitian effective Hamiltonian."""

    __slots__ = ("dt", "lam", "r", "rinv")

    def __init__(self, h: np.ndarray, collapse: CollapseSet, dt: float):
        self.dt = dt
        w_diag, w_dense = collapse.total_weight()
        heff = h.astype(complex) - 0.5j * np.diag(w_diag)
        if w_dense is not None:
            heff = heff - 0.5j * w_dense
        lam, r = scipy.linalg.eig(heff)
        self.lam = lam
        self.r = r
        self.rinv = np.linalg.inv(r)

    def partial(self, tau: float) -> np.ndarray:
        return (self.r * np.exp(-1j * self.lam * tau)) @ self.rinv


def sample_trajectories(ham: ScheduleHamiltonian, noise: NoiseModel,
                        state: np.ndarray, n_shots: int, seed: int,
                        dt_max: float = DEFAULT_DT_PULSE,
                        n_workers: int = 1) -> list:
    """Quantum-jump unraveling of the Lindblad evolution.

    Deterministic for fixed (seed, n_shots) independent of ``n_workers``:
    every shot owns a Philox stream keyed by (seed, shot index), and results
    are merged in shot order.  Jump times are refined to 1e-3 ns by
    bisection on the no-jump norm.
    """
    psi0 = np.asarray(state, dtype=complex)
    _check_normalized(psi0[:, None])
    if n_shots < 1:
        raise ContractError("n_shots must be >= 1")
    grid = ham.time_grid(dt_max)
    collapse_cache: dict = {}

    def collapse_for(t: float) -> CollapseSet:
        tag = ham.schedule.tag_at(t)
        if tag not in collapse_cache:
            collapse_cache[tag] = CollapseSet(noise.resolved(tag), ham.space, ham.config)
        return collapse_cache[tag]

    steps = []
    for t0, t1, _static in grid:
        collapse = collapse_for(t0)
        h = ham.matrix_at(0.5 * (t0 + t1))
        steps.append((t0, t1, _NoJumpStep(h, collapse, t1 - t0), collapse))

    def run_shot(shot: int) -> TrajectoryRecord:
        stream = _ShotStream(seed, shot)
        psi = psi0.copy()
        threshold = stream.threshold()
        jumps = []
        for t0, t1, step, collapse in steps:
            t_cursor = t0
            while True:
                psi_next = step.partial(t1 - t_cursor) @ psi
                norm2 = float(np.vdot(psi_next, psi_next).real)
                if norm2 > threshold or collapse.is_empty:
                    psi = psi_next
                    break
                t_jump = _bisect_jump(step, psi, threshold, t_cursor, t1)
                psi_at = step.partial(t_jump - t_cursor) @ psi
                channels = collapse.jump_channels()
                weights = np.array([ch.jump_weight(psi_at) for ch in channels])
                if weights.sum() <= 0:
                    psi = psi_next
                    break
                ch = channels[stream.choice(weights)]
                psi = ch.apply(psi_at)
                psi = psi / np.linalg.norm(psi)
                jumps.append((t_jump, ch.mode, ch.jump_type))
                threshold = stream.threshold()
                t_cursor = t_jump
        psi = psi / np.linalg.norm(psi)
        return TrajectoryRecord(psi, jumps, seed, shot)

    if n_workers <= 1:
        return [run_shot(s) for s in range(n_shots)]
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        chunks = [list(range(n_shots))[k::n_workers] for k in range(n_workers)]
        results = list(pool.map(lambda idxs: [run_shot(s) for s in idxs], chunks))
    merged: list = [None] * n_shots
    for chunk in results:
        for rec in chunk:
            merged[rec.shot_index] = rec
    return merged


def _bisect_jump(step: _NoJumpStep, psi_start: np.ndarray, threshold: float,
                 t_start: float, t_end: float) -> float:
    lo, hi = t_start, t_end
    while hi - lo > JUMP_TIME_RESOLUTION:
        mid = 0.5 * (lo + hi)
        psi = step.partial(mid - t_start) @ psi_start
        if float(np.vdot(psi, psi).real) > threshold:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def trajectory_average_density(records, dim: int) -> np.ndarray:
    rho = np.zeros((dim, dim), dtype=complex)
    for rec in records:
        rho += np.outer(rec.final_state, rec.final_state.conj())
    return rho / len(records)


# ---------------------------------------------------------------------------
# vectorized fast paths
# ---------------------------------------------------------------------------

def _envelope_values(env: Envelope, tl: np.ndarray) -> np.ndarray:
    out = np.zeros_like(tl)
    inside = (tl >= 0.0) & (tl <= env.duration)
    t = tl[inside]
    if env.kind == "constant":
        vals = np.ones_like(t)
    elif env.kind == "cosine_ramp":
        vals = 0.5 * (1.0 - np.cos(math.pi * t / env.duration))
    elif env.kind == "flat_top_cosine":
        e = env.edge
        vals = np.ones_like(t)
        if e > 0:
            up = t < e
            vals[up] = 0.5 * (1.0 - np.cos(math.pi * t[up] / e))
            down = t > env.duration - e
            vals[down] = 0.5 * (1.0 - np.cos(math.pi * (env.duration - t[down]) / e))
    else:
        c = 0.5 * env.duration
        base = np.exp(-0.5 * ((t - c) / env.sigma) ** 2)
        floor = math.exp(-0.5 * (c / env.sigma) ** 2)
        vals = (base - floor) / (1.0 - floor)
    out[inside] = vals
    return out


def _envelope_derivatives(env: Envelope, tl: np.ndarray) -> np.ndarray:
    out = np.zeros_like(tl)
    inside = (tl >= 0.0) & (tl <= env.duration)
    t = tl[inside]
    if env.kind == "constant":
        vals = np.zeros_like(t)
    elif env.kind == "cosine_ramp":
        vals = 0.5 * math.pi / env.duration * np.sin(math.pi * t / env.duration)
    elif env.kind == "flat_top_cosine":
        e = env.edge
        vals = np.zeros_like(t)
        if e > 0:
            up = t < e
            vals[up] = 0.5 * math.pi / e * np.sin(math.pi * t[up] / e)
            down = t > env.duration - e
            vals[down] = -0.5 * math.pi / e * np.sin(
                math.pi * (env.duration - t[down]) / e)
    else:
        c = 0.5 * env.duration
        base = np.exp(-0.5 * ((t - c) / env.sigma) ** 2)
        floor = math.exp(-0.5 * (c / env.sigma) ** 2)
        vals = -(t - c) / env.sigma ** 2 * base / (1.0 - floor)
    out[inside] = vals
    return out


def _segment_values(seg: Segment, ts: np.ndarray) -> np.ndarray:
    tl = ts - seg.start
    s = _envelope_values(seg.envelope, tl)
    if seg.carrier_freq == 0.0:
        return seg.amplitude * s
    theta = GHZ_TO_RADNS * seg.carrier_freq * ts + seg.carrier_phase
    out = s * np.cos(theta)
    if seg.envelope.drag_beta != 0.0:
        out = out + seg.envelope.drag_beta * \
            _envelope_derivatives(seg.envelope, tl) * np.sin(theta)
    return seg.amplitude * out


def _waveform_values(wave: Waveform, ts: np.ndarray) -> np.ndarray:
    out = np.full(ts.shape, wave.baseline, dtype=float)
    for seg in wave.segments:
        live = (ts >= seg.start) & (ts <= seg.end)
        if np.any(live):
            out[live] += _segment_values(seg, ts[live])
    return out


def _sampled_frequencies(ham: ScheduleHamiltonian, ts: np.ndarray) -> dict:
    freqs = {}
    for mode in ham.space.modes:
        flux_key = f"flux:{mode}"
        if flux_key in ham.schedule.channels:
            flux = _waveform_values(ham.schedule.channels[flux_key], ts)
            spec = ham.config.mode(mode)
            eta = -spec.anharmonicity
            d = spec.junction_asymmetry
            phase = math.pi * flux / spec.flux_period
            c2 = np.cos(phase) ** 2
            f = (spec.f_max + eta) * (c2 + d * d * (1.0 - c2)) ** 0.25 - eta
        else:
            f = np.full(ts.shape, ham.base_frequencies[mode])
        mod_key = f"freq_mod:{mode}"
        if mod_key in ham.schedule.channels:
            f = f + _waveform_values(ham.schedule.channels[mod_key], ts)
        freqs[mode] = f
    return freqs


def fast_schedule_unitary(ham: ScheduleHamiltonian,
                          dt_max: float = DEFAULT_DT_PULSE,
                          chunk: int = 1024) -> np.ndarray:
    """Full schedule propagator via batched step eigendecompositions.

    Equivalent to :func:`schedule_unitary`; midpoint-sampled
    piecewise-constant steps, stacked LAPACK calls and a pairwise product
    reduction keep the Python overhead per step negligible.
    """
    grid = ham.time_grid(dt_max)
    if not grid:
        return np.eye(ham.space.dimension, dtype=complex)
    t0s = np.array([g[0] for g in grid])
    t1s = np.array([g[1] for g in grid])
    mids = 0.5 * (t0s + t1s)
    dts = t1s - t0s
    freqs = _sampled_frequencies(ham, mids)
    builder = ham.builder
    dim = ham.space.dimension
    diag_base = builder._anharm_diag
    total = np.eye(dim, dtype=complex)
    n = len(grid)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        m = hi - lo
        h = np.zeros((m, dim, dim))
        diag = np.tile(diag_base, (m, 1))
        for mode in ham.space.modes:
            diag += (freqs[mode][lo:hi, None] * GHZ_TO_RADNS) * builder._number[mode][None, :]
        idx = np.arange(dim)
        h[:, idx, idx] = diag
        for mode_a, mode_b, slope, pattern in builder._pairs:
            g_mhz = slope * np.sqrt(freqs[mode_a][lo:hi] * freqs[mode_b][lo:hi])
            h += (g_mhz * MHZ_TO_RADNS)[:, None, None] * pattern[None, :, :]
        w, v = np.linalg.eigh(h)
        phases = np.exp(-1j * w * dts[lo:hi, None])
        mats = (v * phases[:, None, :]) @ v.conj().transpose(0, 2, 1)
        total = _ordered_product(mats) @ total
    return total


def _ordered_product(mats: np.ndarray) -> np.ndarray:
    """Product M[n-1] @ ... @ M[0] by pairwise reduction."""
    while mats.shape[0] > 1:
        n2 = mats.shape[0]
        half = n2 // 2
        paired = np.matmul(mats[1:2 * half:2], mats[0:2 * half:2])
        if n2 % 2:
            mats = np.concatenate([paired, mats[-1:]], axis=0)
        else:
            mats = paired
    return mats[0]


def fast_propagate_states(ham: ScheduleHamiltonian, states: np.ndarray,
                          dt_max: float = DEFAULT_DT_PULSE) -> np.ndarray:
    """Batched closed-system evolution using the fast propagator."""
    u = fast_schedule_unitary(ham, dt_max)
    return u @ states
