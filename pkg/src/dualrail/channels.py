"""Quantum-channel extraction and composition.

Gate-level experiments (benchmarking, tomography, coherence scans) compose
channels extracted once from pulse-level simulations.  A channel is a
superoperator acting on row-major vectorized density matrices restricted to
a named basis of dressed states, reported in the interaction frame of the
static bias Hamiltonian so that idling is the identity up to decoherence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .dynamics import (CollapseSet, NoiseModel, ScheduleHamiltonian,
                       evolve_lindblad, propagate_unitary, schedule_unitary)


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).reshape(-1)

def unvec(v: np.ndarray) -> np.ndarray:
    d = int(round(math.sqrt(v.size)))
    return np.asarray(v).reshape(d, d)


def unitary_superop(u: np.ndarray) -> np.ndarray:
    return np.kron(u, u.conj())


def superop_kron(s_a: np.ndarray, d_a: int, s_b: np.ndarray, d_b: int) -> np.ndarray:
    """Superoperator of the product channel E_A (x) E_B on H_A (x) H_B."""
    a = s_a.reshape(d_a, d_a, d_a, d_a)
    b = s_b.reshape(d_b, d_b, d_b, d_b)
    joint = np.einsum("ijkl,mnpq->imjnkplq", a, b)
    d = d_a * d_b
    return joint.reshape(d * d, d * d)


def apply_superop(s: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return unvec(s @ vec(rho))


def liouvillian(h: np.ndarray, collapse: CollapseSet) -> np.ndarray:
    """Lindblad generator as a dense superoperator (rad/ns units)."""
    dim = h.shape[0]
    eye = np.eye(dim)
    lv = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    ops = []
    for op in collapse.mapped_ops:
        mat = np.zeros((dim, dim))
        mat[op.rows, op.cols] = op.vals
        ops.append(mat)
    for _, ell in collapse.deph_vectors:
        ops.append(np.diag(ell))
    for op in collapse.dense_ops:
        ops.append(op.matrix)
    for mat in ops:
        mm = mat.conj().T @ mat
        lv += np.kron(mat, mat.conj())
        lv -= 0.5 * (np.kron(mm, eye) + np.kron(eye, mm.T))
    return lv


@dataclass
class StaticChannel:
    """Exact e^{L t} for a constant Hamiltonian and noise, any duration."""

    evals: np.ndarray
    right: np.ndarray
    right_inv: np.ndarray
    dim: int

    @staticmethod
    def build(h: np.ndarray, noise: NoiseModel, space, config) -> "StaticChannel":
        collapse = CollapseSet(noise, space, config)
        lv = liouvillian(h, collapse)
        evals, right = scipy.linalg.eig(lv)
        return StaticChannel(evals, right, np.linalg.inv(right), h.shape[0])

    def superop(self, t_ns: float) -> np.ndarray:
        return (self.right * np.exp(self.evals * t_ns)) @ self.right_inv

    def apply(self, rho: np.ndarray, t_ns: float) -> np.ndarray:
        return unvec(self.superop(t_ns) @ vec(rho))


@dataclass
class BlockChannel:
    """Channel restricted to a dressed input basis, with sector bookkeeping.

    ``superop`` maps vec(rho) on the input basis to vec(rho) on the output
    basis (interaction frame applied).  ``sector_maps`` gives, per sector
    label, the linear map from vec(rho_in) to the sector population of the
    output state.  The trace of the output block is the retained
    probability, so 1 - trace = total weight transferred to the sectors and
    beyond.
    """

    superop: np.ndarray
    in_dim: int
    out_dim: int
    sector_maps: dict

    def apply(self, rho: np.ndarray) -> np.ndarray:
        out = self.superop @ np.asarray(rho, dtype=complex).reshape(-1)
        return out.reshape(self.out_dim, self.out_dim)

    def sector_population(self, label: str, rho: np.ndarray) -> float:
        return float(np.real(self.sector_maps[label] @ np.asarray(rho).reshape(-1)))

    def compose(self, other: "BlockChannel") -> "BlockChannel":
        """self after other (matrix order: S_self @ S_other).

        Sector populations are absorbing: weight already in a sector stays
        there, and the later channel adds what it removes from the block.
        """
        if other.out_dim != self.in_dim:
            raise ValueError("dimension mismatch in channel composition")
        sectors = {}
        labels = set(self.sector_maps) | set(other.sector_maps)
        for label in labels:
            row = np.zeros(other.in_dim ** 2, dtype=complex)
            if label in self.sector_maps:
                row = row + self.sector_maps[label] @ other.superop
            if label in other.sector_maps:
                row = row + other.sector_maps[label]
            sectors[label] = row
        return BlockChannel(self.superop @ other.superop, other.in_dim,
                            self.out_dim, sectors)


def identity_block(dim: int) -> BlockChannel:
    return BlockChannel(np.eye(dim * dim, dtype=complex), dim, dim, {})


def block_from_unitary(u_block: np.ndarray) -> BlockChannel:
    out_dim, in_dim = u_block.shape
    return BlockChannel(np.kron(u_block, u_block.conj()), in_dim, out_dim, {})


def extract_unitary_block(ham: ScheduleHamiltonian, in_states, out_states,
                          out_energies, dt_max: float) -> np.ndarray:
    """Interaction-frame matrix elements <out_m| U |in_k> of a schedule.

    ``out_energies`` are the dressed energies (rad/ns) defining the frame
    rotation over the schedule duration.
    """
    from .dynamics import fast_schedule_unitary
    batch = np.stack(in_states, axis=1).astype(complex)
    final = fast_schedule_unitary(ham, dt_max) @ batch
    out = np.stack(out_states, axis=0).conj()
    block = out @ final
    phases = np.exp(1j * np.asarray(out_energies) * ham.duration)
    return phases[:, None] * block


def extract_block_channel(ham: ScheduleHamiltonian, noise: NoiseModel,
                          in_states, out_states, out_energies,
                          sectors: dict | None = None,
                          dt_max: float = 0.1) -> BlockChannel:
    """Open-system channel on a dressed subspace from one Lindblad run.

    Evolves the k*k basis matrices of the input span in a stack, projects
    the outputs onto the output span (with interaction-frame phases) and
    onto any sector projectors supplied.
    """
    in_mat = np.stack(in_states, axis=1).astype(complex)      # (dim, k)
    k = in_mat.shape[1]
    basis = []
    for i in range(k):
        for j in range(k):
            basis.append(np.outer(in_mat[:, i], in_mat[:, j].conj()))
    stack = np.stack(basis)
    final = evolve_lindblad(ham, noise, stack, dt_max=dt_max, validate=False)
    out_mat = np.stack(out_states, axis=1).astype(complex)    # (dim, m)
    m = out_mat.shape[1]
    phases = np.exp(1j * np.asarray(out_energies) * ham.duration)
    framed = out_mat * phases[None, :].conj()
    blocks = np.einsum("mi,nij,jl->nml", framed.conj().T, final, framed)
    superop = blocks.reshape(k * k, m * m).T.copy()
    sector_maps = {}
    for label, proj in (sectors or {}).items():
        pops = np.einsum("ij,nji->n", proj, final).real
        sector_maps[label] = pops.copy()
    return BlockChannel(superop, k, m, sector_maps)


def average_gate_fidelity(u_actual: np.ndarray, u_target: np.ndarray) -> float:
    """Average gate fidelity between two unitaries of dimension d."""
    d = u_target.shape[0]
    tr = np.trace(u_target.conj().T @ u_actual)
    return float((abs(tr) ** 2 / d + 1.0) / (d + 1.0))


def block_channel_from_superop(superop, in_dim, out_dim, sector_maps=None):
    return BlockChannel(np.asarray(superop, dtype=complex), in_dim, out_dim,
                        dict(sector_maps or {}))
