"""Logical coherence experiments and randomized benchmarking.

Experiments run at the channel level: calibrated pulses become
superoperators on the pair space (extracted once from pulse-level
simulation), idles become exact Lindblad exponentials, and mid-circuit
checks become measurement channels.  Shot noise enters through binomial
sampling of the composed outcome probabilities, which is where the
statistics of the fits come from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .channels import (BlockChannel, StaticChannel, block_from_unitary,
                       extract_block_channel, unitary_superop)
from .device import DeviceConfig, GHZ_TO_RADNS
from .dynamics import NoiseModel, ScheduleHamiltonian
from .encoding import ShotRecord, postselect
from .errors import ConfigError, ContractError, FitError
from .gates import (GATE_FAMILIES, PairCalibration, SingleQubitSimulator,
                    gate_target, rotation_schedule)
from .hamiltonian import HamiltonianBuilder, ModeSpace

# ---------------------------------------------------------------------------
# decay fits
# ---------------------------------------------------------------------------

@dataclass
class DecayFit:
    """Exponential (optionally oscillating) decay fit result."""

    amplitude: float
    offset: float
    decay_constant: float          # per-gate (RB) or per-us (coherence)
    oscillation_freq: float | None
    covariance: np.ndarray
    kind: str

    def __post_init__(self):
        if self.decay_constant <= 0:
            raise FitError("fit produced a non-positive decay constant")
        if np.any(np.linalg.eigvalsh(
                0.5 * (self.covariance + self.covariance.T)) < -1e-9):
            raise FitError("fit covariance is not positive semidefinite")

    @property
    def uncertainty(self) -> float:
        idx = 2
        return float(math.sqrt(max(self.covariance[idx, idx], 0.0)))


def fit_exponential(x, y, sigma=None, p0=None) -> DecayFit:
    """y = a exp(-x/tau) + c via damped least squares."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 4:
        raise FitError("need at least four points for a decay fit")

    def model(x, a, c, tau):
        return a * np.exp(-x / tau) + c

    def jac(x, a, c, tau):
        e = np.exp(-x / tau)
        return np.stack([e, np.ones_like(x), a * e * x / tau ** 2], axis=1)

    if p0 is None:
        c0 = float(y[-1])
        a0 = float(y[0] - c0) or 0.5
        tau0 = max(float(x[-1] - x[0]) / 2.0, 1e-9)
        p0 = [a0, c0, tau0]
    try:
        popt, pcov = scipy.optimize.curve_fit(
            model, x, y, p0=p0, sigma=sigma, jac=jac, maxfev=20000,
            absolute_sigma=sigma is not None)
    except RuntimeError as exc:
        raise FitError(f"exponential fit failed: {exc}")
    return DecayFit(amplitude=float(popt[0]), offset=float(popt[1]),
                    decay_constant=float(abs(popt[2])),
                    oscillation_freq=None, covariance=pcov, kind="exponential")


def fit_exponential_sinusoid(x, y, sigma=None, freq_guess=None) -> DecayFit:
    """y = a exp(-x/tau) cos(2 pi f x + phi) + c."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 6:
        raise FitError("need at least six points for an oscillating fit")

    def model(x, a, c, tau, f, phi):
        return a * np.exp(-x / tau) * np.cos(2 * math.pi * f * x + phi) + c

    if freq_guess is None:
        d = y - y.mean()
        spectrum = np.abs(np.fft.rfft(d))
        freqs = np.fft.rfftfreq(len(x), float(x[1] - x[0]))
        freq_guess = float(freqs[int(np.argmax(spectrum[1:])) + 1])
    p0 = [float(y[0] - y.mean()), float(y.mean()),
          max(float(x[-1]) / 2.0, 1e-9), freq_guess, 0.0]
    try:
        popt, pcov = scipy.optimize.curve_fit(model, x, y, p0=p0, sigma=sigma,
                                              maxfev=40000)
    except RuntimeError as exc:
        raise FitError(f"oscillating fit failed: {exc}")
    return DecayFit(amplitude=float(popt[0]), offset=float(popt[1]),
                    decay_constant=float(abs(popt[2])),
                    oscillation_freq=float(abs(popt[3])), covariance=pcov,
                    kind="exponential-sinusoid")


def fit_rb_decay(m, y, sigma=None) -> tuple:
    """Survival = a p^m + c; returns (p, p_err, (a, c), covariance)."""
    m = np.asarray(m, dtype=float)
    y = np.asarray(y, dtype=float)

    def model(m, a, c, p):
        return a * np.power(p, m) + c

    def jac(m, a, c, p):
        pm = np.power(p, m)
        return np.stack([pm, np.ones_like(m),
                         a * m * np.power(p, np.clip(m - 1, 0, None))], axis=1)

    spread = max(y[0] - y[-1], 1e-3)
    p0 = [spread, float(y[-1]), 0.999]
    try:
        popt, pcov = scipy.optimize.curve_fit(
            model, m, y, p0=p0, sigma=sigma, jac=jac, maxfev=40000,
            bounds=([0.0, -0.2, 0.5], [1.2, 1.2, 1.0]))
    except RuntimeError as exc:
        raise FitError(f"benchmarking decay fit failed: {exc}")
    p = float(popt[2])
    p_err = float(math.sqrt(max(pcov[2, 2], 0.0)))
    return p, p_err, (float(popt[0]), float(popt[1])), pcov


# ---------------------------------------------------------------------------
# single-qubit Clifford compiler
# ---------------------------------------------------------------------------

_GENERATORS = ("X/2", "-X/2", "Y/2", "-Y/2")


def _projective_key(u: np.ndarray) -> tuple:
    phase = None
    flat = np.round(u, 9).reshape(-1)
    for z in flat:
        if abs(z) > 1e-6:
            phase = z / abs(z)
            break
    return tuple(np.round(flat / phase, 6))


def _build_clifford_table():
    """Minimal decompositions of the 24 single-qubit Cliffords over the
    half-rotation generators; fixed at import so the compiled pulse
    average is reproducible."""
    found = {}
    frontier = [((), np.eye(2, dtype=complex))]
    found[_projective_key(np.eye(2, dtype=complex))] = ((), np.eye(2, dtype=complex))
    for _depth in range(3):
        new_frontier = []
        for word, mat in frontier:
            for g in _GENERATORS:
                nw = word + (g,)
                nm = gate_target(g) @ mat
                key = _projective_key(nm)
                if key not in found:
                    found[key] = (nw, nm)
                    new_frontier.append((nw, nm))
        frontier = new_frontier
    if len(found) != 24:
        raise ConfigError(f"Clifford enumeration found {len(found)} elements")
    table = sorted(found.values(), key=lambda t: (len(t[0]), t[0]))
    words = [t[0] for t in table]
    mats = [t[1] for t in table]
    return words, mats


CLIFFORD_WORDS, CLIFFORD_MATRICES = _build_clifford_table()


def average_pulses_per_clifford() -> float:
    """Mean number of half-rotation pulses per compiled Clifford (the
    identity contributes an idle of one pulse slot)."""
    total = sum(max(len(w), 1) for w in CLIFFORD_WORDS)
    return total / len(CLIFFORD_WORDS)


def clifford_unitary(index: int) -> np.ndarray:
    return CLIFFORD_MATRICES[index]


def recovery_clifford(sequence) -> int:
    """Index of the Clifford inverting the composed sequence (exact group
    inversion by projective matching)."""
    u = np.eye(2, dtype=complex)
    for idx in sequence:
        u = CLIFFORD_MATRICES[idx] @ u
    target = u.conj().T
    key = _projective_key(target)
    for k, mat in enumerate(CLIFFORD_MATRICES):
        if _projective_key(mat) == key:
            return k
    best, score = 0, -1.0
    for k, mat in enumerate(CLIFFORD_MATRICES):
        s = abs(np.trace(mat.conj().T @ target)) / 2.0
        if s > score:
            best, score = k, s
    return best


# ---------------------------------------------------------------------------
# pair-level gate and idle channels
# ---------------------------------------------------------------------------

class PairChannelSet:
    """Calibrated pulse channels of one pair under a noise model.

    Gates are BlockChannels on the dressed logical block with erasure and
    leakage sector bookkeeping; the idle generator gives exact channels for
    arbitrary durations.  Everything is reported in the interaction frame
    of the pair's static Hamiltonian, with an optional frame detuning that
    shows up as a Ramsey oscillation.
    """

    def __init__(self, config: DeviceConfig, cal: PairCalibration,
                 noise: NoiseModel, dt_max: float = 0.05,
                 frame_detuning_ghz: float = 0.0,
                 extra_gates=()):
        self.config = config
        self.cal = cal
        self.noise = noise
        self.space = ModeSpace((cal.rail_a, cal.rail_b), (3, 3))
        self.base = {cal.rail_a: cal.bias[cal.rail_a],
                     cal.rail_b: cal.bias[cal.rail_b]}
        builder = HamiltonianBuilder(config, self.space)
        h0 = builder.matrix(self.base)
        vals, vecs = scipy.linalg.eigh(h0)
        self.h0 = h0
        self.energies = vals
        self.dressed = vecs
        occ = self.space.occupation_arrays().sum(axis=1)
        one = [i for i in range(len(vals)) if
               abs((np.abs(vecs[:, i]) ** 2 @ occ) - 1.0) < 0.25]
        one.sort(key=lambda i: vals[i])
        lo, hi = one[0], one[1]
        sign = lambda v: v * (abs(v[self.space.index_of((0, 1))]) /
                              v[self.space.index_of((0, 1))])
        self.vec_0l = sign(vecs[:, lo]).astype(complex)
        self.vec_1l = sign(vecs[:, hi]).astype(complex)
        self.e_0l, self.e_1l = float(vals[lo]), float(vals[hi])
        self.vec_00 = vecs[:, int(np.argmin(vals))].astype(complex)
        self.frame_detuning = frame_detuning_ghz * GHZ_TO_RADNS
        self._static = None
        self._gate_cache: dict = {}
        self.dt_max = dt_max

    # -- sectors ------------------------------------------------------------
    def sector_projectors(self) -> dict:
        p00 = np.outer(self.vec_00, self.vec_00.conj())
        plog = (np.outer(self.vec_0l, self.vec_0l.conj())
                + np.outer(self.vec_1l, self.vec_1l.conj()))
        leak = np.eye(self.space.dimension) - plog - p00
        return {"erasure": p00, "leakage": leak}

    # -- gates ----------------------------------------------------------------
    def gate_channel(self, name: str) -> BlockChannel:
        if name in self._gate_cache:
            return self._gate_cache[name]
        axis_angle, angle = GATE_FAMILIES[name]
        sched = rotation_schedule(self.cal, axis_angle, angle)
        ham = ScheduleHamiltonian(self.config, self.space, self.base, sched)
        if self.noise.is_trivial:
            sim = SingleQubitSimulator(self.config, self.cal)
            params = self.cal.gates[name]
            u2 = sim.gate_unitary(params.amplitude, params.beta, params.phase)
            chan = block_from_unitary(u2)
            chan.sector_maps = {"erasure": np.zeros(4, dtype=complex),
                                "leakage": np.zeros(4, dtype=complex)}
        else:
            chan = extract_block_channel(
                ham, self.noise, [self.vec_0l, self.vec_1l],
                [self.vec_0l, self.vec_1l], [self.e_0l, self.e_1l],
                sectors=self.sector_projectors(), dt_max=self.dt_max)
        chan = self._apply_frame_detuning(chan, sched.duration)
        self._gate_cache[name] = chan
        return chan

    def _apply_frame_detuning(self, chan: BlockChannel, duration: float):
        if self.frame_detuning == 0.0:
            return chan
        rz = np.diag([1.0, np.exp(1j * self.frame_detuning * duration)])
        rot = unitary_superop(rz.conj().T)
        return BlockChannel(rot @ chan.superop, chan.in_dim, chan.out_dim,
                            chan.sector_maps)

    # -- idles ----------------------------------------------------------------
    def idle_channel(self, duration_ns: float) -> BlockChannel:
        """Exact open-system idle, projected onto the logical block with
        sector bookkeeping, in the interaction frame."""
        if self._static is None:
            self._static = StaticChannel.build(self.h0, self.noise, self.space,
                                               self.config)
        sup_full = self._static.superop(duration_ns)
        basis = np.stack([self.vec_0l, self.vec_1l], axis=1)
        phases = np.exp(1j * np.array([self.e_0l, self.e_1l]) * duration_ns
                        + 1j * np.array([0.0, self.frame_detuning * duration_ns]))
        framed = basis * phases[None, :].conj()
        dim = self.space.dimension
        out = np.zeros((4, 4), dtype=complex)
        sectors = {label: np.zeros(4, dtype=complex)
                   for label in ("erasure", "leakage")}
        projectors = self.sector_projectors()
        for i in range(2):
            for j in range(2):
                rho_in = np.outer(basis[:, i], basis[:, j].conj())
                rho_out = sup_full @ rho_in.reshape(-1)
                rho_out = rho_out.reshape(dim, dim)
                blk = framed.conj().T @ rho_out @ framed
                out[:, i * 2 + j] = blk.reshape(-1)
                for label, proj in projectors.items():
                    sectors[label][i * 2 + j] = np.trace(proj @ rho_out)
        return BlockChannel(out, 2, 2, sectors)

    # -- checks ---------------------------------------------------------------
    def check_channel(self, false_negative: float = 0.0,
                      false_positive: float = 0.0) -> BlockChannel:
        """Kept branch of an erasure check: logical weight passes with
        probability (1 - fp), erased weight sneaks through with the false
        negative rate, and logical/erased coherence is destroyed.

        The channel acts on the logical block plus sector rows; the erased
        sector passing the check stays in the erasure sector.
        """
        sup = (1.0 - false_positive) * np.eye(4, dtype=complex)
        sectors = {"erasure": np.zeros(4, dtype=complex),
                   "leakage": np.zeros(4, dtype=complex)}
        chan = BlockChannel(sup, 2, 2, sectors)
        chan.sector_scale = {"erasure": false_negative,
                             "leakage": 1.0}
        return chan


def compose_with_sectors(channels) -> BlockChannel:
    """Right-to-left composition of BlockChannels honoring check-channel
    sector scaling (checks multiply the surviving erased weight)."""
    total = None
    for chan in channels:
        if total is None:
            total = BlockChannel(chan.superop.copy(), chan.in_dim, chan.out_dim,
                                 {k: v.copy() for k, v in chan.sector_maps.items()})
            continue
        scale = getattr(chan, "sector_scale", None)
        if scale is not None:
            for label, factor in scale.items():
                if label in total.sector_maps:
                    total.sector_maps[label] = factor * total.sector_maps[label]
        new_sectors = {}
        labels = set(total.sector_maps) | set(chan.sector_maps)
        for label in labels:
            row = np.zeros(total.in_dim ** 2, dtype=complex)
            if label in chan.sector_maps:
                row = row + chan.sector_maps[label] @ total.superop
            if label in total.sector_maps:
                row = row + total.sector_maps[label]
            new_sectors[label] = row
        total = BlockChannel(chan.superop @ total.superop, total.in_dim,
                             chan.out_dim, new_sectors)
    return total


# ---------------------------------------------------------------------------
# randomized benchmarking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RBConfig:
    clifford_lengths: tuple
    sequences_per_length: int = 30
    shots_per_sequence: int = 1000
    seed: int = 2024

    def __post_init__(self):
        lengths = tuple(self.clifford_lengths)
        if not lengths or any(l < 1 for l in lengths):
            raise ConfigError("Clifford lengths must be >= 1")
        if any(b <= a for a, b in zip(lengths, lengths[1:])):
            raise ConfigError("Clifford lengths must be strictly increasing")


@dataclass
class RBResult:
    gate_error: float
    gate_error_sigma: float
    erasure_error_per_pulse: float
    erasure_error_sigma: float
    survival_fit: tuple
    postselect_fit: tuple
    lengths: np.ndarray
    survival: np.ndarray
    keep_fraction: np.ndarray
    avg_pulses: float
    error_per_clifford: float = 0.0

    def summary_rows(self):
        rows = []
        for m, s, k in zip(self.lengths, self.survival, self.keep_fraction):
            rows.append((int(m), float(s), float(k)))
        return rows


def _clifford_channels(pair_channels: PairChannelSet,
                       depolarizing_per_pulse: float = 0.0):
    """Channel (and sector bookkeeping) of each compiled Clifford."""
    idle_dur = pair_channels.cal.duration
    idle_chan = pair_channels.idle_channel(idle_dur)
    out = []
    depol = None
    if depolarizing_per_pulse > 0.0:
        eye = np.eye(4, dtype=complex)
        vec_id = np.array([1.0, 0.0, 0.0, 1.0], dtype=complex)
        mix = 0.5 * np.outer(vec_id, vec_id)
        depol = BlockChannel((1 - depolarizing_per_pulse) * eye
                             + depolarizing_per_pulse * mix, 2, 2, {})
    for word in CLIFFORD_WORDS:
        parts = [pair_channels.gate_channel(g) for g in word] or [idle_chan]
        if depol is not None:
            with_noise = []
            for p in parts:
                with_noise.extend([p, depol])
            parts = with_noise
        out.append(compose_with_sectors(parts))
    return out


def rb_single_logical(config: DeviceConfig, cal: PairCalibration,
                      noise: NoiseModel, rb: RBConfig,
                      depolarizing_per_pulse: float = 0.0,
                      frame_detuning_ghz: float = 0.0) -> RBResult:
    """Single-logical-qubit randomized benchmarking with erasure accounting.

    Per sequence the composed channel gives exact outcome probabilities;
    shots are drawn binomially (kept count, then survival within the kept
    set).  The post-selected survival fit gives the logical error, the
    post-selection probability fit gives the erasure error.
    """
    avg = average_pulses_per_clifford()
    if not 2.0 <= avg <= 2.5:
        raise ConfigError(f"compiled pulse average {avg} outside [2.0, 2.5]")
    chans = PairChannelSet(config, cal, noise,
                           frame_detuning_ghz=frame_detuning_ghz)
    cliffords = _clifford_channels(chans, depolarizing_per_pulse)
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=rb.seed)))
    rho0 = np.zeros((2, 2), dtype=complex)
    rho0[0, 0] = 1.0
    lengths = np.array(rb.clifford_lengths)
    surv_mean = np.zeros(len(lengths))
    keep_mean = np.zeros(len(lengths))
    surv_sigma = np.zeros(len(lengths))
    for li, m in enumerate(lengths):
        surv = []
        keeps = []
        for _ in range(rb.sequences_per_length):
            seq = rng.integers(0, 24, size=int(m))
            total = compose_with_sectors([cliffords[k] for k in seq]
                                         + [cliffords[recovery_clifford(seq)]])
            rho_out = total.apply(rho0)
            p_keep = float(np.real(np.trace(rho_out)))
            p0_cond = float(np.real(rho_out[0, 0])) / max(p_keep, 1e-12)
            p0_cond = min(max(p0_cond, 0.0), 1.0)
            n_keep = rng.binomial(rb.shots_per_sequence, min(max(p_keep, 0.0), 1.0))
            n0 = rng.binomial(n_keep, p0_cond) if n_keep else 0
            keeps.append(n_keep / rb.shots_per_sequence)
            surv.append(n0 / n_keep if n_keep else 0.0)
        surv_mean[li] = np.mean(surv)
        keep_mean[li] = np.mean(keeps)
        surv_sigma[li] = max(np.std(surv) / math.sqrt(len(surv)), 1e-6)
    p, p_err, (a, c), cov = fit_rb_decay(lengths, surv_mean, sigma=surv_sigma)
    r_clifford = (1.0 - p) / 2.0
    r_pulse = r_clifford / avg
    r_sigma = p_err / 2.0 / avg
    pe, pe_err, _, _ = fit_rb_decay(lengths, keep_mean)
    erasure_clifford = 1.0 - pe
    erasure_pulse = erasure_clifford / avg
    return RBResult(
        gate_error=float(r_pulse), gate_error_sigma=float(r_sigma),
        erasure_error_per_pulse=float(erasure_pulse),
        erasure_error_sigma=float(pe_err / avg),
        survival_fit=(a, c, p), postselect_fit=(pe,),
        lengths=lengths, survival=surv_mean, keep_fraction=keep_mean,
        avg_pulses=avg, error_per_clifford=float(r_clifford))


# ---------------------------------------------------------------------------
# coherence experiments
# ---------------------------------------------------------------------------

def coherence_experiment(config: DeviceConfig, cal: PairCalibration,
                         kind: str, delays_us, noise: NoiseModel,
                         checks_per_delay: int = 0,
                         check_errors=(0.0, 0.0),
                         cpmg_n: int = 0, shots: int = 0, seed: int = 7,
                         frame_detuning_ghz: float = 0.0) -> DecayFit:
    """Logical T1 / Ramsey / CPMG decay at the channel level.

    T1 fits the population difference between the two logical
    initializations; Ramsey and CPMG fit the projected coherence after the
    closing half rotation.  ``checks_per_delay`` interleaves erasure-check
    channels evenly; with ``shots`` > 0 binomial noise is added.
    """
    if kind not in ("t1", "ramsey", "cpmg"):
        raise ConfigError(f"unknown coherence kind {kind!r}")
    delays = np.asarray(list(delays_us), dtype=float)
    if len(delays) < 4:
        raise FitError("need at least four delay points")
    chans = PairChannelSet(config, cal, noise,
                           frame_detuning_ghz=frame_detuning_ghz)
    fn, fp = check_errors
    check = chans.check_channel(false_negative=fn, false_positive=fp)
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=seed)))
    x2 = chans.gate_channel("X/2")
    xm2 = chans.gate_channel("-X/2")
    xpi = chans.gate_channel("X")

    def idle_with_checks(total_ns, n_pi):
        parts = []
        segments = max(n_pi, 1) if kind == "cpmg" else 1
        seg = total_ns / segments
        for k in range(segments):
            parts.append(chans.idle_channel(0.5 * seg if kind == "cpmg" else seg))
            if kind == "cpmg":
                parts.append(xpi)
                parts.append(chans.idle_channel(0.5 * seg))
        if checks_per_delay:
            spaced = []
            stride = max(len(parts) // checks_per_delay, 1)
            for i, p in enumerate(parts):
                spaced.append(p)
                if (i + 1) % stride == 0:
                    spaced.append(check)
            parts = spaced
        return parts

    values = []
    for delay in delays:
        total_ns = delay * 1e3
        if kind == "t1":
            p0_of_init = []
            for init in (0, 1):
                rho = np.zeros((2, 2), dtype=complex)
                rho[init, init] = 1.0
                chain = idle_with_checks(total_ns, 0)
                out = compose_with_sectors(chain).apply(rho)
                keep = np.real(np.trace(out))
                p0 = np.real(out[0, 0]) / max(keep, 1e-12)
                if shots:
                    p0 = rng.binomial(shots, min(max(p0, 0), 1)) / shots
                p0_of_init.append(p0)
            values.append(p0_of_init[0] - p0_of_init[1])
        else:
            rho = np.zeros((2, 2), dtype=complex)
            rho[0, 0] = 1.0
            chain = [x2] + idle_with_checks(total_ns, cpmg_n) + [xm2]
            out = compose_with_sectors(chain).apply(rho)
            keep = np.real(np.trace(out))
            p0 = np.real(out[0, 0]) / max(keep, 1e-12)
            if shots:
                p0 = rng.binomial(shots, min(max(p0, 0), 1)) / shots
            values.append(p0)
    values = np.asarray(values)
    if kind == "t1":
        return fit_exponential(delays, values)
    signal = 2.0 * values - 1.0
    if frame_detuning_ghz:
        return fit_exponential_sinusoid(delays, signal,
                                        freq_guess=abs(frame_detuning_ghz) * 1e3)
    return fit_exponential(delays, signal)
