"""State and process reconstruction from logical measurement records, plus
fidelity and entanglement metrics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ContractError, DomainError

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.diag([1.0, -1.0]).astype(complex),
}


def pauli_string(label: str) -> np.ndarray:
    op = PAULI[label[0]]
    for ch in label[1:]:
        op = np.kron(op, PAULI[ch])
    return op


def pauli_labels(n_qubits: int, include_identity: bool = True):
    letters = "IXYZ" if include_identity else "XYZ"
    return ["".join(c) for c in itertools.product(letters, repeat=n_qubits)]


def measurement_settings(n_qubits: int):
    """The 3^n Pauli measurement settings (no identity axes)."""
    return ["".join(c) for c in itertools.product("XYZ", repeat=n_qubits)]


@dataclass
class DensityEstimate:
    """Reconstructed state with physicality metadata."""

    matrix: np.ndarray
    shots_per_setting: dict = field(default_factory=dict)
    physical: bool = True
    trace_residual: float = 0.0
    psd_residual: float = 0.0

    @property
    def n_qubits(self) -> int:
        return int(round(math.log2(self.matrix.shape[0])))


@dataclass
class ChiEstimate:
    """Process matrix in the Pauli basis with CPTP residuals."""

    chi: np.ndarray
    labels: list
    tp_residual: float = 0.0
    psd_residual: float = 0.0


def project_to_density(rho: np.ndarray) -> np.ndarray:
    """Nearest (Frobenius) trace-one positive-semidefinite matrix.

    Eigenvalue truncation with uniform rescaling of the remainder; the
    standard fixed-trace water-filling construction.
    """
    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / np.trace(rho).real
    vals, vecs = scipy.linalg.eigh(rho)
    if vals.min() >= 0:
        return rho
    d = len(vals)
    vals_desc = vals[::-1].copy()
    out = np.zeros(d)
    acc = 0.0
    i = d
    while vals_desc[i - 1] + acc / i < 0:
        acc += vals_desc[i - 1]
        i -= 1
    out[:i] = vals_desc[:i] + acc / i
    fixed = (vecs[:, ::-1] * out) @ vecs[:, ::-1].conj().T
    return 0.5 * (fixed + fixed.conj().T)


def expectation_from_counts(counts: dict) -> float:
    """<P> from outcome counts keyed by bitstrings (post-selected shots)."""
    total = sum(counts.values())
    if total == 0:
        raise ContractError("no shots in setting")
    acc = 0.0
    for bits, n in counts.items():
        sign = (-1) ** sum(int(b) for b in bits)
        acc += sign * n
    return acc / total


def qst(setting_counts: dict, n_qubits: int) -> DensityEstimate:
    """Linear-inversion state tomography with physicality projection.

    ``setting_counts`` maps each of the 3^n Pauli settings (e.g. "XZ") to
    outcome counts {bitstring: n} over the kept shots.  Expectation values
    of sub-strings containing identities are taken from any setting that
    measures the remaining axes.
    """
    needed = set(measurement_settings(n_qubits))
    missing = needed - set(setting_counts)
    if missing:
        raise ContractError(f"incomplete measurement set; missing {sorted(missing)[:4]}")
    dim = 2 ** n_qubits
    rho = np.zeros((dim, dim), dtype=complex)
    for label in pauli_labels(n_qubits):
        if set(label) == {"I"}:
            exp = 1.0
        else:
            setting = "".join(c if c != "I" else "Z" for c in label)
            counts = setting_counts[setting]
            exp = _marginal_expectation(counts, label)
        rho += exp * pauli_string(label)
    rho /= dim
    projected = project_to_density(rho)
    return DensityEstimate(
        matrix=projected,
        shots_per_setting={s: sum(c.values()) for s, c in setting_counts.items()},
        physical=True,
        trace_residual=abs(np.trace(rho).real - 1.0),
        psd_residual=float(max(0.0, -scipy.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min())),
    )


def _marginal_expectation(counts: dict, label: str) -> float:
    total = sum(counts.values())
    if total == 0:
        raise ContractError("no shots in setting")
    acc = 0.0
    for bits, n in counts.items():
        sign = 1
        for ch, b in zip(label, bits):
            if ch != "I" and b == "1":
                sign = -sign
        acc += sign * n
    return acc / total


def state_fidelity(rho: np.ndarray, target: np.ndarray) -> float:
    """<psi|rho|psi> for a pure target state."""
    target = np.asarray(target, dtype=complex)
    if abs(np.linalg.norm(target) - 1.0) > 1e-6:
        raise ContractError("target state must be normalized")
    if abs(np.trace(rho) - 1.0) > 1e-6:
        raise ContractError("density matrix must have unit trace")
    return float(np.real(target.conj() @ rho @ target))


def purity(rho: np.ndarray) -> float:
    return float(np.real(np.trace(rho @ rho)))


def log_negativity(rho: np.ndarray, dims=(2, 2), transpose_subsystem: int = 1) -> float:
    """log2 of the trace norm of the partial transpose."""
    da, db = dims
    if rho.shape != (da * db, da * db):
        raise DomainError("density matrix does not match the bipartition")
    r = rho.reshape(da, db, da, db)
    if transpose_subsystem == 1:
        rt = r.transpose(0, 3, 2, 1)
    else:
        rt = r.transpose(2, 1, 0, 3)
    rt = rt.reshape(da * db, da * db)
    trace_norm = np.abs(scipy.linalg.eigvalsh(0.5 * (rt + rt.conj().T))).sum()
    return float(max(0.0, math.log2(trace_norm)))


# ---------------------------------------------------------------------------
# process tomography
# ---------------------------------------------------------------------------

_SINGLE_INPUTS = {
    "0": np.array([1.0, 0.0], dtype=complex),
    "1": np.array([0.0, 1.0], dtype=complex),
    "+": np.array([1.0, 1.0], dtype=complex) / math.sqrt(2.0),
    "-": np.array([1.0, -1.0], dtype=complex) / math.sqrt(2.0),
    "+i": np.array([1.0, 1.0j], dtype=complex) / math.sqrt(2.0),
    "-i": np.array([1.0, -1.0j], dtype=complex) / math.sqrt(2.0),
}


def qpt_input_states(n_qubits: int):
    """Informationally complete product inputs: |0>,|1>,|+>,|->,|+i>,|-i>
    per qubit; returns (label tuple, state vector) pairs."""
    singles = list(_SINGLE_INPUTS.items())
    out = []
    for combo in itertools.product(singles, repeat=n_qubits):
        labels = tuple(c[0] for c in combo)
        vec = combo[0][1]
        for _, v in combo[1:]:
            vec = np.kron(vec, v)
        out.append((labels, vec))
    return out


def qpt(input_outputs, n_qubits: int) -> ChiEstimate:
    """Least-squares chi matrix in the Pauli basis with CPTP projection.

    ``input_outputs`` is a list of (input state vector, output density
    matrix estimate).  The chi matrix satisfies
    E(rho) = sum_mn chi_mn P_m rho P_n^dag, normalized to trace one.
    """
    labels = pauli_labels(n_qubits)
    dim = 2 ** n_qubits
    n_p = len(labels)
    paulis = [pauli_string(lb) for lb in labels]
    if not input_outputs:
        raise ContractError("process tomography needs input/output pairs")
    seen = {tuple(np.round(np.abs(vec) ** 2, 6)) for vec, _ in input_outputs}
    if len(input_outputs) < dim * dim:
        raise ContractError("input set is not informationally complete")
    rows = []
    rhs = []
    for vec, rho_out in input_outputs:
        rho_in = np.outer(vec, vec.conj())
        basis_action = np.stack([p @ rho_in @ q.conj().T
                                 for p in paulis for q in paulis])
        rows.append(basis_action.reshape(n_p * n_p, dim * dim).T)
        rhs.append(rho_out.reshape(-1))
    a = np.concatenate(rows, axis=0)
    b = np.concatenate(rhs, axis=0)
    chi_vec, *_ = np.linalg.lstsq(a, b, rcond=None)
    chi = chi_vec.reshape(n_p, n_p)
    chi = 0.5 * (chi + chi.conj().T)
    chi, tp_res, psd_res = _project_cptp(chi, paulis, dim)
    return ChiEstimate(chi=chi, labels=labels, tp_residual=tp_res,
                       psd_residual=psd_res)


def _project_cptp(chi: np.ndarray, paulis, dim: int, n_iter: int = 80):
    """Alternating projection onto the PSD cone and the trace-preservation
    affine set (sum_mn chi_mn P_n^dag P_m = I, which implies unit trace)."""
    n_p = len(paulis)
    constraint = np.stack([(q.conj().T @ p).reshape(-1)
                           for p in paulis for q in paulis], axis=1)
    target = np.eye(dim, dtype=complex).reshape(-1)
    pinv = np.linalg.pinv(constraint)
    current = chi.copy()
    for _ in range(n_iter):
        vals, vecs = scipy.linalg.eigh(current)
        current = (vecs * np.clip(vals, 0.0, None)) @ vecs.conj().T
        defect = constraint @ current.reshape(-1) - target
        current = (current.reshape(-1) - pinv @ defect).reshape(n_p, n_p)
        current = 0.5 * (current + current.conj().T)
        tp_res = float(np.abs(constraint @ current.reshape(-1) - target).max())
        psd_res = float(max(0.0, -scipy.linalg.eigvalsh(current).min()))
        if tp_res < 1e-8 and psd_res < 1e-9:
            break
    tp_res = float(np.abs(constraint @ current.reshape(-1) - target).max())
    psd_res = float(max(0.0, -scipy.linalg.eigvalsh(current).min()))
    return current, tp_res, psd_res


def chi_of_unitary(u: np.ndarray) -> ChiEstimate:
    """Ideal chi matrix of a unitary, for process-fidelity targets."""
    dim = u.shape[0]
    n_qubits = int(round(math.log2(dim)))
    labels = pauli_labels(n_qubits)
    coeffs = np.array([np.trace(pauli_string(lb).conj().T @ u) / dim
                       for lb in labels])
    chi = np.outer(coeffs, coeffs.conj())
    chi = chi / np.trace(chi).real
    return ChiEstimate(chi=chi, labels=labels)


def process_fidelity(chi: ChiEstimate, target) -> float:
    """Tr(chi chi_target) with both matrices trace-normalized."""
    if isinstance(target, np.ndarray) and target.ndim == 2 and \
            target.shape[0] == target.shape[1] and \
            target.shape[0] != chi.chi.shape[0]:
        target = chi_of_unitary(target)
    chi_t = target.chi if isinstance(target, ChiEstimate) else target
    a = chi.chi / np.trace(chi.chi).real
    b = chi_t / np.trace(chi_t).real
    return float(np.real(np.trace(a @ b)))
