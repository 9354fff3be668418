"""Ancilla-based mid-circuit erasure check.

A check drives a conditional pi pulse on the ancilla, resonant only with
the pair-ground-conditioned transition (single- or two-photon), then
samples a Gaussian IQ point and thresholds it.  The check's back-action,
selectivity and misassignment statistics all come out of the same device
model used everywhere else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .device import DeviceConfig, GHZ_TO_RADNS, ReadoutSpec
from .dynamics import NoiseModel
from .encoding import LogicalFrame, ShotRecord, build_logical_frame
from .errors import ContractError, SelectionError
from .hamiltonian import (HamiltonianBuilder, ModeSpace, build_hamiltonian,
                          conditional_ancilla_frequencies, diagonalize,
                          lowering_operator)


@dataclass(frozen=True)
class CheckProtocol:
    """Calibrated parameters of one erasure check."""

    pair_index: int
    scheme: str                  # "single_photon" | "two_photon"
    drive_frequency: float       # GHz (f01, or f02/2 for two-photon)
    drive_duration: float        # ns
    drive_amplitude: float       # GHz
    readout: ReadoutSpec
    readout_duration: float = 800.0    # ns of excited-state exposure

    def __post_init__(self):
        if self.scheme not in ("single_photon", "two_photon"):
            raise ContractError(f"unknown scheme {self.scheme!r}")


@dataclass(frozen=True)
class IQCloudModel:
    """Two Gaussian clouds on the rotated I axis."""

    center_ground: float
    center_excited: float
    sigma: float
    threshold: float | None = None

    @staticmethod
    def from_readout(readout: ReadoutSpec) -> "IQCloudModel":
        # SNR^2 = (c_e - c_g)^2 / (2 sigma^2) with equal cloud widths
        sep = readout.snr * math.sqrt(2.0)
        return IQCloudModel(center_ground=0.0, center_excited=sep, sigma=1.0)

    @property
    def snr(self) -> float:
        return abs(self.center_excited - self.center_ground) / \
            (self.sigma * math.sqrt(2.0))

    def midpoint(self) -> float:
        return 0.5 * (self.center_ground + self.center_excited)

    def separation_error(self, threshold: float | None = None) -> float:
        """Per-state Gaussian tail beyond the threshold (midpoint default)."""
        thr = self.midpoint() if threshold is None else threshold
        z = abs(thr - self.center_ground) / self.sigma
        return 0.5 * math.erfc(z / math.sqrt(2.0))

    def total_error(self, threshold: float | None = None) -> float:
        """Symmetric-prior total misassignment probability."""
        thr = self.midpoint() if threshold is None else threshold
        zg = (thr - self.center_ground) / self.sigma
        ze = (self.center_excited - thr) / self.sigma
        return 0.25 * (math.erfc(zg / math.sqrt(2.0))
                       + math.erfc(ze / math.sqrt(2.0)))


def discriminate(iq_model: IQCloudModel, point: float) -> str:
    """Threshold classification of one rotated-I sample."""
    thr = iq_model.midpoint() if iq_model.threshold is None else iq_model.threshold
    lo, hi = sorted((iq_model.center_ground, iq_model.center_excited))
    if iq_model.center_excited >= iq_model.center_ground:
        return "excited" if point > thr else "ground"
    return "excited" if point < thr else "ground"


def sample_iq(iq_model: IQCloudModel, excited_probability: float,
              rng: np.random.Generator) -> tuple:
    """Draw the ancilla state by Born rule, then its IQ point."""
    excited = rng.random() < excited_probability
    center = iq_model.center_excited if excited else iq_model.center_ground
    point = rng.normal(center, iq_model.sigma)
    return excited, point


def select_check_frequency(config: DeviceConfig, pair_index: int,
                           rail_freq: float, ancilla_freq: float,
                           scheme: str = "two_photon",
                           drive_bandwidth_mhz: float = 2.0) -> float:
    """Pair-ground-conditioned ancilla drive frequency (GHz).

    Raises a selection error (with the measured gap) when the conditional
    peaks are closer than the drive bandwidth, or when the ancilla is
    decoupled and no conditioning exists.
    """
    rail_a, rail_b, ancilla = config.dual_rail_pairs[pair_index]
    if config.coupling_mhz(rail_a, ancilla, rail_freq, ancilla_freq) == 0.0 and \
            config.coupling_mhz(rail_b, ancilla, rail_freq, ancilla_freq) == 0.0:
        raise SelectionError("ancilla is decoupled from the pair; no conditional shift")
    peaks = conditional_ancilla_frequencies(config, pair_index, rail_freq,
                                            ancilla_freq, scheme)
    gap = min(abs(peaks["00"] - peaks["0L"]), abs(peaks["00"] - peaks["1L"])) * 1e3
    if gap < drive_bandwidth_mhz:
        raise SelectionError(
            f"conditional separation {gap:.3f} MHz below the drive bandwidth "
            f"{drive_bandwidth_mhz} MHz")
    return peaks["00"]


class CheckSimulator:
    """Driven pair+ancilla dynamics in the frame rotating at the check
    drive; the drive is a plain charge drive on the ancilla."""

    def __init__(self, config: DeviceConfig, pair_index: int, bias: dict,
                 levels: int = 3):
        rail_a, rail_b, ancilla = config.dual_rail_pairs[pair_index]
        self.config = config
        self.pair_index = pair_index
        self.rail_a, self.rail_b, self.ancilla = rail_a, rail_b, ancilla
        self.space = ModeSpace((rail_a, rail_b, ancilla),
                               (levels, levels, max(levels, 4)))
        self.bias = dict(bias)
        self.h0 = HamiltonianBuilder(config, self.space).matrix(
            {m: bias[m] for m in self.space.modes})
        low = lowering_operator(self.space, ancilla)
        self.drive_op = low + low.T
        # frame generator: total excitation number, so the number-conserving
        # rail couplings stay static while the drive co-rotates
        self.n_total = np.diag(
            self.space.occupation_arrays().sum(axis=1).astype(float))
        self.frame = build_logical_frame(config, pair_index, bias, levels=levels,
                                         ancilla_levels=max(levels, 4))

    def rotating_hamiltonian(self, f_drive: float, amplitude: float) -> np.ndarray:
        """H - w_d N_total + (A/2)(a + a_dag), time-independent under the
        rotating-wave approximation on the drive."""
        w_d = f_drive * GHZ_TO_RADNS
        amp = amplitude * GHZ_TO_RADNS
        return self.h0 - w_d * self.n_total + 0.5 * amp * self.drive_op

    def drive_excitation(self, state: np.ndarray, f_drive: float,
                         amplitude: float, duration: float) -> np.ndarray:
        h = self.rotating_hamiltonian(f_drive, amplitude)
        w, v = scipy.linalg.eigh(h)
        u = (v * np.exp(-1j * w * duration)) @ v.conj().T
        return u @ state

    def ancilla_level_populations(self, state: np.ndarray) -> np.ndarray:
        occ = self.space.occupation_arrays()[:, self.space.mode_index(self.ancilla)]
        probs = np.abs(state) ** 2
        d = self.space.levels[self.space.mode_index(self.ancilla)]
        return np.array([probs[occ == k].sum() for k in range(d)])


def calibrate_check(config: DeviceConfig, pair_index: int, bias: dict,
                    scheme: str = "two_photon",
                    drive_duration: float = 1200.0) -> CheckProtocol:
    """Pick the conditional drive frequency and the amplitude that makes a
    pi pulse (to |1> or |2>) when the pair is in its ground state."""
    rail_a, rail_b, ancilla = config.dual_rail_pairs[pair_index]
    f_drive = select_check_frequency(config, pair_index, bias[rail_a],
                                     bias[ancilla], scheme)
    sim = CheckSimulator(config, pair_index, bias)
    ground = np.zeros(sim.space.dimension, dtype=complex)
    ground[sim.space.index_of((0, 0, 0))] = 1.0

    def excited_pop(amp, df):
        out = sim.drive_excitation(ground, f_drive + df, amp, drive_duration)
        # the discriminator separates ground from everything above, and the
        # dressed target state spreads over bare levels; score what the
        # readout actually sees
        return sim.ancilla_level_populations(out)[1:].sum()

    # weak-drive regime only: the analytic pi-pulse amplitude seeds a
    # bounded scan, keeping the dynamic Stark shift small compared to the
    # conditional separation (strong drives have selective-looking but
    # chaotic multi-level resonances)
    if scheme == "single_photon":
        amp0 = 1.0 / (2.0 * drive_duration)      # pi A t = pi
    else:
        eta = abs(config.mode(ancilla).anharmonicity)
        delta = math.pi * eta                     # rad/ns, half anharmonicity
        amp0 = math.sqrt(delta / (drive_duration * math.pi ** 2 * math.sqrt(2.0)))
    amps = amp0 * np.linspace(0.5, 1.8, 16)
    offsets = np.linspace(-0.005, 0.002, 25)
    best = (0.0, amp0, 0.0)
    for amp in amps:
        for df in offsets:
            p = excited_pop(amp, df)
            if p > best[0]:
                best = (p, amp, df)
    refined = scipy.optimize.minimize(
        lambda x: -excited_pop(x[0], x[1]), [best[1], best[2]],
        method="Nelder-Mead",
        options={"fatol": 1e-9, "xatol": 1e-8, "maxiter": 200})
    p_final = -refined.fun
    amp_final = float(abs(refined.x[0]))
    if p_final < 0.95 or amp_final > 2.0 * amp0:
        raise SelectionError(
            f"conditional drive only reaches P={p_final:.3f} in the weak regime")
    return CheckProtocol(pair_index=pair_index, scheme=scheme,
                         drive_frequency=f_drive + float(refined.x[1]),
                         drive_duration=drive_duration,
                         drive_amplitude=amp_final,
                         readout=config.readout.get(ancilla,
                                                    ReadoutSpec(snr=3.8)))


def _cascade_matrix(n_levels: int, t1_us: float, duration_ns: float) -> np.ndarray:
    """T[k, j] = P(final level j | initial level k) for ladder relaxation
    at rates k/T1 over the readout exposure."""
    t = np.eye(n_levels)
    if t1_us <= 0 or math.isinf(t1_us) or duration_ns <= 0:
        return t
    gamma = 1e-3 / t1_us
    n_steps = 400
    dt = duration_ns / n_steps
    for _ in range(n_steps):
        dt_mat = np.zeros_like(t)
        for k in range(1, n_levels):
            rate = k * gamma * dt
            dt_mat[:, k] -= rate * t[:, k]
            dt_mat[:, k - 1] += rate * t[:, k]
        t = t + dt_mat
    return t


def run_check(config: DeviceConfig, protocol: CheckProtocol, state: np.ndarray,
              noise: NoiseModel, rng: np.random.Generator,
              bias: dict | None = None, sim: CheckSimulator | None = None):
    """Full check: conditional drive, relaxation exposure, IQ sample,
    discrimination, ideal ancilla reset.

    Returns (flag, post-check state on the pair+ancilla space).  The
    ancilla is assumed to start in its ground state.
    """
    if sim is None:
        if bias is None:
            raise ContractError("run_check needs a bias or a prepared simulator")
        sim = CheckSimulator(config, protocol.pair_index, bias)
    state = np.asarray(state, dtype=complex)
    if abs(np.linalg.norm(state) - 1.0) > 1e-6:
        raise ContractError("check input state must be normalized")
    driven = sim.drive_excitation(state, protocol.drive_frequency,
                                  protocol.drive_amplitude,
                                  protocol.drive_duration)
    pops = sim.ancilla_level_populations(driven)
    pops = np.clip(pops, 0.0, None)
    pops = pops / pops.sum()
    # the readout projectively resolves the ancilla level; the level then
    # relaxes down the ladder during the readout exposure and the IQ point
    # reflects where it ends up
    level_drive = int(rng.choice(len(pops), p=pops))
    anc_t1 = config.mode(sim.ancilla).t1
    if noise.damping.get(sim.ancilla, 0.0) == 0.0:
        anc_t1 = math.inf
    cascade = _cascade_matrix(len(pops), anc_t1, protocol.readout_duration)
    level_final = int(rng.choice(len(pops), p=np.clip(cascade[level_drive], 0, None)
                                 / cascade[level_drive].sum()))
    iq = IQCloudModel.from_readout(protocol.readout)
    excited, point = sample_iq(iq, 1.0 if level_final > 0 else 0.0, rng)
    flag = discriminate(iq, point) == "excited"
    # project the pair on the resolved ancilla level, then ideal reset
    occ = sim.space.occupation_arrays()[:, sim.space.mode_index(sim.ancilla)]
    post = driven.copy()
    post[occ != level_drive] = 0.0
    norm = np.linalg.norm(post)
    if norm < 1e-12:
        post = driven
    else:
        post = post / norm
    if level_drive > 0:
        collapsed = np.zeros_like(post)
        for idx, occ_row in enumerate(sim.space.basis):
            if occ_row[sim.space.mode_index(sim.ancilla)] == level_drive:
                target = list(occ_row)
                target[sim.space.mode_index(sim.ancilla)] = 0
                collapsed[sim.space.index_of(tuple(target))] += post[idx]
        n2 = np.linalg.norm(collapsed)
        post = collapsed / n2 if n2 > 1e-12 else post
    return flag, post


def characterize_check_errors(config: DeviceConfig, protocol: CheckProtocol,
                              noise: NoiseModel, n_shots: int, seed: int,
                              bias: dict):
    """False-negative / false-positive rates of the check.

    Prepares the pair ground state and both logical states, runs the check
    per shot, and post-selects on a matching ideal end measurement of the
    pair so rail decay between preparation and readout does not pollute
    the check statistics.  Returns ((fn, fn_err), (fp, fp_err)).
    """
    if n_shots < 1000:
        raise ContractError("check characterization needs at least 1e3 shots")
    sim = CheckSimulator(config, protocol.pair_index, bias)
    frame = sim.frame
    dim = sim.space.dimension
    ground = np.zeros(dim, dtype=complex)
    ground[sim.space.index_of((0, 0, 0))] = 1.0

    def run_many(state, expect_flag):
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=seed, spawn_key=(int(expect_flag),)))
        wrong = 0
        kept = 0
        for _ in range(n_shots):
            flag, post = run_check(config, protocol, state, noise, rng, sim=sim)
            # end measurement of the pair: post-select on the prepared sector
            probs = _pair_sector_probs(frame, post)
            outcome = rng.choice(4, p=probs)
            prepared_erased = bool(expect_flag)
            if prepared_erased and outcome != 2:
                continue
            if not prepared_erased and outcome == 2:
                continue
            kept += 1
            if flag != expect_flag:
                wrong += 1
        rate = wrong / max(kept, 1)
        err = math.sqrt(max(rate * (1 - rate), 1.0 / max(kept, 1)) / max(kept, 1))
        return rate, err

    fn = run_many(ground, True)
    fp0 = run_many(frame.vec_0l.astype(complex), False)
    fp1 = run_many(frame.vec_1l.astype(complex), False)
    fp = (0.5 * (fp0[0] + fp1[0]), 0.5 * math.hypot(fp0[1], fp1[1]))
    return fn, fp


def _pair_sector_probs(frame: LogicalFrame, state: np.ndarray) -> np.ndarray:
    p0 = abs(np.vdot(frame.vec_0l, state)) ** 2
    p1 = abs(np.vdot(frame.vec_1l, state)) ** 2
    pe = abs(np.vdot(frame.vec_00, state)) ** 2
    leak = max(0.0, 1.0 - p0 - p1 - pe)
    probs = np.array([p0, p1, pe, leak])
    return probs / probs.sum()
