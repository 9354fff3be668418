"""Truncated multi-mode Hamiltonians of coupled transmons, ancillas and couplers.

Matrices are Hermitian, in angular units (rad/ns).  Basis states are
occupation tuples over the modes of a :class:`ModeSpace`, ordered
little-endian: the first listed mode varies fastest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.linalg
import scipy.sparse

from .device import DeviceConfig, GHZ_TO_RADNS, MHZ_TO_RADNS, flux_to_frequency
from .errors import ConfigError, SelectionError

DENSE_DIMENSION_LIMIT = 64


@dataclass(frozen=True)
class ModeSpace:
    """Ordered mode list with per-mode truncation levels.

    ``total_excitation_cap`` optionally restricts the basis to states with
    at most that many total excitations, which keeps the dimension small for
    number-conserving dynamics.  Without a cap the dimension is the product
    of the per-mode levels.
    """

    modes: tuple
    levels: tuple
    total_excitation_cap: int | None = None

    def __post_init__(self):
        if len(self.modes) != len(self.levels):
            raise ConfigError("one level count required per mode")
        if any(d < 2 for d in self.levels):
            raise ConfigError("each mode needs at least 2 levels")
        if len(set(self.modes)) != len(self.modes):
            raise ConfigError("duplicate mode in ModeSpace")

    @property
    def basis(self) -> tuple:
        return _basis_states(self.levels, self.total_excitation_cap)

    @property
    def dimension(self) -> int:
        return len(self.basis)

    def index_of(self, occupation) -> int:
        return _basis_index(self.levels, self.total_excitation_cap)[tuple(occupation)]

    def mode_index(self, mode_id: str) -> int:
        return self.modes.index(mode_id)

    def occupation_arrays(self) -> np.ndarray:
        """(dimension, n_modes) integer array of basis occupations."""
        return np.array(self.basis, dtype=int)


def _basis_states(levels, cap):
    states = []
    for occ in product(*[range(d) for d in reversed(levels)]):
        occ = tuple(reversed(occ))
        if cap is not None and sum(occ) > cap:
            continue
        states.append(occ)
    return tuple(states)


_INDEX_CACHE: dict = {}


def _basis_index(levels, cap):
    key = (tuple(levels), cap)
    if key not in _INDEX_CACHE:
        _INDEX_CACHE[key] = {s: i for i, s in enumerate(_basis_states(levels, cap))}
    return _INDEX_CACHE[key]


@dataclass(frozen=True)
class HamiltonianOperator:
    """Hermitian operator on a ModeSpace, entries in rad/ns."""

    space: ModeSpace
    entries: object  # ndarray or scipy.sparse matrix

    @property
    def dimension(self) -> int:
        return self.space.dimension

    def dense(self) -> np.ndarray:
        if scipy.sparse.issparse(self.entries):
            return self.entries.toarray()
        return np.asarray(self.entries)

    def hermiticity_residual(self) -> float:
        h = self.dense()
        scale = max(np.abs(h).max(), 1e-30)
        return float(np.abs(h - h.conj().T).max() / scale)


@dataclass(frozen=True)
class EigenSolution:
    """Ascending eigenvalues (rad/ns), orthonormal eigenvector columns and
    the dominant bare-state label of each eigenvector."""

    space: ModeSpace
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    labels: tuple

    def energy_of(self, occupation) -> float:
        """Eigenvalue of the state labeled by a bare occupation tuple."""
        occupation = tuple(occupation)
        for lbl, ev in zip(self.labels, self.eigenvalues):
            if lbl == occupation:
                return float(ev)
        raise SelectionError(f"no eigenstate labeled {occupation}")

    def vector_of(self, occupation) -> np.ndarray:
        occupation = tuple(occupation)
        for i, lbl in enumerate(self.labels):
            if lbl == occupation:
                return self.eigenvectors[:, i]
        raise SelectionError(f"no eigenstate labeled {occupation}")


def lowering_operator(space: ModeSpace, mode_id: str) -> np.ndarray:
    """Dense annihilation operator for one mode on the (possibly capped) basis."""
    basis = space.basis
    index = _basis_index(space.levels, space.total_excitation_cap)
    k = space.mode_index(mode_id)
    dim = len(basis)
    op = np.zeros((dim, dim))
    for col, occ in enumerate(basis):
        n = occ[k]
        if n == 0:
            continue
        target = list(occ)
        target[k] = n - 1
        op[index[tuple(target)], col] = math.sqrt(n)
    return op


def number_diagonal(space: ModeSpace, mode_id: str) -> np.ndarray:
    """Diagonal of the number operator of one mode."""
    k = space.mode_index(mode_id)
    return space.occupation_arrays()[:, k].astype(float)


def exchange_operator(space: ModeSpace, mode_a: str, mode_b: str) -> np.ndarray:
    """a_dag_a a_b + a_dag_b a_a on the basis (number conserving)."""
    a = lowering_operator(space, mode_a)
    b = lowering_operator(space, mode_b)
    return a.T @ b + b.T @ a


def full_coupling_operator(space: ModeSpace, mode_a: str, mode_b: str) -> np.ndarray:
    """(a + a_dag)(b + b_dag); includes the counter-rotating terms."""
    a = lowering_operator(space, mode_a)
    b = lowering_operator(space, mode_b)
    xa = a + a.T
    xb = b + b.T
    return xa @ xb


class HamiltonianBuilder:
    """Caches the frequency-independent structure of H for one ModeSpace.

    Every coupling in the device scales exactly as sqrt(f_i f_j), so the
    full Hamiltonian at arbitrary mode frequencies is assembled from fixed
    coupling patterns with scalar coefficients.
    """

    def __init__(self, config: DeviceConfig, space: ModeSpace,
                 coupling_form: str = "exchange"):
        if coupling_form not in ("exchange", "full"):
            raise ConfigError(f"unknown coupling form {coupling_form!r}")
        self.config = config
        self.space = space
        self.coupling_form = coupling_form
        self._number = {m: number_diagonal(space, m) for m in space.modes}
        occ = space.occupation_arrays()
        self._anharm_diag = np.zeros(space.dimension)
        for k, mode in enumerate(space.modes):
            eta = config.mode(mode).anharmonicity * GHZ_TO_RADNS
            n = occ[:, k].astype(float)
            self._anharm_diag += 0.5 * eta * n * (n - 1.0)
        self._pairs = []
        op = exchange_operator if coupling_form == "exchange" else full_coupling_operator
        for i, mode_a in enumerate(space.modes):
            for mode_b in space.modes[i + 1:]:
                slope = config.coupling_mhz(mode_a, mode_b, 1.0, 1.0)
                if slope == 0.0:
                    continue
                self._pairs.append((mode_a, mode_b, slope, op(space, mode_a, mode_b)))

    def matrix(self, frequencies: dict) -> np.ndarray:
        """Dense H (rad/ns) at the given mode frequencies (GHz)."""
        for mode in self.space.modes:
            if mode not in frequencies:
                raise ConfigError(f"missing frequency for mode {mode!r}")
        diag = self._anharm_diag.copy()
        for mode in self.space.modes:
            diag += frequencies[mode] * GHZ_TO_RADNS * self._number[mode]
        h = np.diag(diag).astype(float)
        for mode_a, mode_b, slope, pattern in self._pairs:
            g_mhz = slope * math.sqrt(frequencies[mode_a] * frequencies[mode_b])
            h += (g_mhz * MHZ_TO_RADNS) * pattern
        return h


def build_hamiltonian(config: DeviceConfig, frequencies: dict, space: ModeSpace,
                      coupling_form: str = "exchange") -> HamiltonianOperator:
    """Assemble the truncated device Hamiltonian at fixed mode frequencies.

    ``coupling_form`` selects plain excitation-exchange couplings or the
    full (a + a_dag)(b + b_dag) form with counter-rotating terms.
    """
    h = HamiltonianBuilder(config, space, coupling_form).matrix(frequencies)
    if space.dimension >= DENSE_DIMENSION_LIMIT:
        return HamiltonianOperator(space, scipy.sparse.csr_matrix(h))
    return HamiltonianOperator(space, h)


def diagonalize(operator: HamiltonianOperator) -> EigenSolution:
    """Dense Hermitian eigendecomposition with dominant-bare-state labels.

    Ties in the dominant overlap are broken toward the lower bare index, and
    a label is recorded only when the dominant overlap exceeds 0.5 and has
    not already been claimed within the spectrum.
    """
    h = operator.dense()
    vals, vecs = scipy.linalg.eigh(h)
    basis = operator.space.basis
    labels = []
    claimed = set()
    weights = np.abs(vecs) ** 2
    for i in range(len(vals)):
        j = int(np.argmax(weights[:, i]))
        if weights[j, i] > 0.5 and basis[j] not in claimed:
            labels.append(basis[j])
            claimed.add(basis[j])
        else:
            labels.append(None)
    return EigenSolution(operator.space, vals, vecs, tuple(labels))


def excitation_manifold(solution: EigenSolution, n_excitations: int):
    """Indices of eigenstates whose total occupation expectation rounds to n."""
    occ = solution.space.occupation_arrays().sum(axis=1).astype(float)
    totals = (np.abs(solution.eigenvectors) ** 2 * occ[:, None]).sum(axis=0)
    return [i for i, t in enumerate(totals) if abs(t - n_excitations) < 0.25]


def single_excitation_energies(config: DeviceConfig, frequencies: dict,
                               space: ModeSpace,
                               coupling_form: str = "exchange") -> np.ndarray:
    sol = diagonalize(build_hamiltonian(config, frequencies, space, coupling_form))
    idx = excitation_manifold(sol, 1)
    return sol.eigenvalues[idx]


@dataclass(frozen=True)
class AvoidedCrossingScan:
    swept_mode: str
    flux_values: np.ndarray
    energies: np.ndarray           # (n_flux, n_single_excitation), rad/ns
    minimum_gap_mhz: float
    minimum_gap_flux: float


def avoided_crossing_scan(config: DeviceConfig, swept_mode: str, flux_range,
                          fixed_frequencies: dict, space: ModeSpace,
                          coupling_form: str = "exchange",
                          refine: bool = True) -> AvoidedCrossingScan:
    """Single-excitation spectrum versus the flux of one mode.

    Reports the minimum adjacent-level gap over the scan; with ``refine``
    the gap location is polished by golden-section search between the
    neighbouring grid points.
    """
    spec = config.mode(swept_mode)
    builder = HamiltonianBuilder(config, space, coupling_form)

    def energies_at(flux):
        freqs = dict(fixed_frequencies)
        freqs[swept_mode] = flux_to_frequency(spec, flux)
        sol = diagonalize(HamiltonianOperator(space, builder.matrix(freqs)))
        idx = excitation_manifold(sol, 1)
        return np.sort(sol.eigenvalues[idx])

    flux_values = np.asarray(flux_range, dtype=float)
    energies = np.array([energies_at(phi) for phi in flux_values])
    gaps = np.diff(energies, axis=1).min(axis=1)
    k = int(np.argmin(gaps))

    def gap_at(flux):
        e = energies_at(flux)
        return float(np.diff(e).min())

    best_flux = float(flux_values[k])
    best_gap = float(gaps[k])
    if refine and 0 < k < len(flux_values) - 1:
        lo, hi = flux_values[k - 1], flux_values[k + 1]
        best_flux, best_gap = _golden_minimize(gap_at, lo, hi, tol=1e-7)
    return AvoidedCrossingScan(
        swept_mode, flux_values, energies,
        minimum_gap_mhz=best_gap / MHZ_TO_RADNS,
        minimum_gap_flux=best_flux,
    )


def _golden_minimize(fn, lo, hi, tol=1e-9, max_iter=200):
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if abs(b - a) < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    x = (a + b) / 2.0
    return x, fn(x)


def _conditioned_states(solution: EigenSolution, space: ModeSpace,
                        pair_modes, ancilla_mode, pair_excitation, ancilla_level):
    """Eigenstate indices with the pair at a given excitation number and the
    ancilla at a given level, ordered by energy."""
    occ = space.occupation_arrays().astype(float)
    pair_cols = [space.mode_index(m) for m in pair_modes]
    anc_col = space.mode_index(ancilla_mode)
    w = np.abs(solution.eigenvectors) ** 2
    pair_n = w.T @ occ[:, pair_cols].sum(axis=1)
    anc_n = w.T @ occ[:, anc_col]
    out = []
    for i in range(len(solution.eigenvalues)):
        if abs(pair_n[i] - pair_excitation) < 0.4 and abs(anc_n[i] - ancilla_level) < 0.4:
            out.append(i)
    if not out:
        raise SelectionError(
            f"no eigenstate with pair excitation {pair_excitation} and "
            f"ancilla level {ancilla_level}; system too hybridized to label"
        )
    return out


def conditional_ancilla_frequencies(config: DeviceConfig, pair_index: int,
                                    rail_freq: float, ancilla_freq: float,
                                    scheme: str = "single_photon",
                                    levels: int = 3) -> dict:
    """Ancilla drive frequency (GHz) conditioned on the dual-rail state.

    Returns ``{"00": f, "0L": f, "1L": f}`` where f is the ancilla f01 for
    the single-photon scheme and f02/2 for the two-photon scheme.
    """
    rail_a, rail_b, ancilla = config.dual_rail_pairs[pair_index]
    n_anc = 1 if scheme == "single_photon" else 2
    # the driven ancilla level needs at least one level of headroom above it,
    # otherwise truncation distorts its repulsion from the next level
    space = ModeSpace((rail_a, rail_b, ancilla), (levels, levels, max(levels, n_anc + 2)))
    freqs = {rail_a: rail_freq, rail_b: rail_freq, ancilla: ancilla_freq}
    sol = diagonalize(build_hamiltonian(config, freqs, space))

    def transition(pair_exc, which):
        ground = _conditioned_states(sol, space, (rail_a, rail_b), ancilla, pair_exc, 0)
        excited = _conditioned_states(sol, space, (rail_a, rail_b), ancilla, pair_exc, n_anc)
        g = sorted(ground)[:2] if pair_exc == 1 else [ground[0]]
        e = sorted(excited)[:2] if pair_exc == 1 else [excited[0]]
        if which == "lower":
            de = sol.eigenvalues[e[0]] - sol.eigenvalues[g[0]]
        elif which == "upper":
            de = sol.eigenvalues[e[-1]] - sol.eigenvalues[g[-1]]
        else:
            de = sol.eigenvalues[e[0]] - sol.eigenvalues[g[0]]
        return float(de) / GHZ_TO_RADNS / n_anc

    return {
        "00": transition(0, "only"),
        "0L": transition(1, "lower"),
        "1L": transition(1, "upper"),
    }


def ancilla_dispersive_shifts(config: DeviceConfig, pair_index: int,
                              rail_freq: float, ancilla_freq: float,
                              scheme: str = "single_photon",
                              levels: int = 3):
    """Conditional ancilla peak separations (MHz).

    Returns ``(delta_f, f_c)``: the |1_L> minus |0_L> conditioned ancilla
    frequency difference, and the |00>-conditioned peak minus the mean of
    the two logical-state peaks.
    """
    rail_a, rail_b, ancilla = config.dual_rail_pairs[pair_index]
    g_anc = max(abs(config.coupling_mhz(rail_a, ancilla, rail_freq, ancilla_freq)),
                abs(config.coupling_mhz(rail_b, ancilla, rail_freq, ancilla_freq)))
    if abs(ancilla_freq - rail_freq) * 1e3 < 5.0 * g_anc:
        raise SelectionError(
            f"ancilla detuning {abs(ancilla_freq - rail_freq) * 1e3:.1f} MHz is inside "
            f"5x the coupling ({g_anc:.1f} MHz); dispersive labeling unreliable"
        )
    peaks = conditional_ancilla_frequencies(config, pair_index, rail_freq,
                                            ancilla_freq, scheme, levels)
    delta_f = (peaks["1L"] - peaks["0L"]) * 1e3
    f_c = (peaks["00"] - 0.5 * (peaks["0L"] + peaks["1L"])) * 1e3
    return delta_f, f_c


def logical_gap_mhz(config: DeviceConfig, pair_index: int, rail_freqs: dict,
                    include_ancilla: bool = True, levels: int = 3) -> float:
    """Dressed dual-rail gap E(1_L) - E(0_L) in MHz at the given bias."""
    rail_a, rail_b, ancilla = config.dual_rail_pairs[pair_index]
    modes = [rail_a, rail_b] + ([ancilla] if include_ancilla else [])
    space = ModeSpace(tuple(modes), tuple([levels] * len(modes)),
                      total_excitation_cap=1)
    freqs = {m: rail_freqs[m] for m in modes}
    sol = diagonalize(build_hamiltonian(config, freqs, space))
    idx = excitation_manifold(sol, 1)
    vals = np.sort(sol.eigenvalues[idx])
    # the two rail-dominated states are the closest pair when the ancilla is
    # far detuned; take the two levels nearest the rail bias energy
    rail_energy = rail_freqs[rail_a] * GHZ_TO_RADNS
    order = np.argsort(np.abs(vals - rail_energy))[:2]
    pair_levels = np.sort(vals[order])
    return float(pair_levels[1] - pair_levels[0]) / MHZ_TO_RADNS
