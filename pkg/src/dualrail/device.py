"""Static device description and closed-form coupling/gap formulas.

All frequencies are linear (GHz for mode frequencies, MHz for couplings and
gaps) at this module's boundary; angular frequencies (rad/ns) appear only
inside the Hamiltonian builder.  Capacitances are in fF, times in us.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError, DomainError, SingularityError

TWO_PI = 2.0 * math.pi

# rad/ns per GHz of linear frequency
GHZ_TO_RADNS = TWO_PI
# rad/ns per MHz of linear frequency
MHZ_TO_RADNS = TWO_PI * 1e-3


@dataclass(frozen=True)
class TransmonSpec:
    """Parameters of a single flux-tunable transmon.

    ``anharmonicity`` is negative (GHz).  ``t1``/``t_phi`` are white-noise
    relaxation and pure-dephasing times in us; ``t_phi`` is the effective
    white rate seen at the dual-rail gap frequency, not the low-frequency
    Ramsey value.  ``heating_rate`` is the 0->1 thermal excitation rate in
    1/us.  ``flux_period`` is the flux-quantum period of the dispersion in
    Phi0 units.
    """

    id: str
    f_max: float
    f_min: float
    anharmonicity: float
    t1: float
    t_phi: float
    heating_rate: float = 0.0
    flux_period: float = 1.0

    def __post_init__(self):
        if not self.f_min < self.f_max:
            raise ConfigError(f"{self.id}: require f_min < f_max")
        if self.anharmonicity >= 0:
            raise ConfigError(f"{self.id}: anharmonicity must be negative")
        if self.t1 <= 0 or self.t_phi <= 0:
            raise ConfigError(f"{self.id}: t1 and t_phi must be positive")
        if self.heating_rate < 0:
            raise ConfigError(f"{self.id}: heating_rate must be >= 0")
        if self.flux_period <= 0:
            raise ConfigError(f"{self.id}: flux_period must be positive")

    @property
    def junction_asymmetry(self) -> float:
        """Effective junction asymmetry reproducing the f_min endpoint."""
        eta = -self.anharmonicity
        return ((self.f_min + eta) / (self.f_max + eta)) ** 2


@dataclass(frozen=True)
class CouplerSpec(TransmonSpec):
    """Floating tunable coupler; adds the pad-to-ground capacitance (fF)."""

    pad_ground_capacitance: float = 120.0

    def __post_init__(self):
        super().__post_init__()
        if self.pad_ground_capacitance <= 0:
            raise ConfigError(f"{self.id}: pad_ground_capacitance must be > 0")


@dataclass(frozen=True)
class CapacitanceNetwork:
    """Mutual capacitances between modes plus the shared pad-ground value.

    ``mutual`` maps a frozenset of two mode ids to ``(capacitance_fF, sign)``
    where the sign encodes same-pad (+1) versus different-pad (-1) geometry.
    """

    c_g: float
    mutual: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.c_g <= 0:
            raise ConfigError("pad-ground capacitance c_g must be > 0")
        for key, (cap, sign) in self.mutual.items():
            if len(key) != 2:
                raise ConfigError(f"mutual key {key} must pair two distinct modes")
            if cap <= 0:
                raise ConfigError(f"mutual capacitance for {set(key)} must be > 0")
            if sign not in (+1, -1):
                raise ConfigError(f"sign for {set(key)} must be +1 or -1")

    def entry(self, mode_a: str, mode_b: str):
        """Return (capacitance, sign) for an unordered mode pair, or None."""
        return self.mutual.get(frozenset((mode_a, mode_b)))


@dataclass(frozen=True)
class ReadoutSpec:
    """Gaussian IQ readout abstraction for one ancilla."""

    snr: float
    assignment_scheme: str = "two_photon"

    def __post_init__(self):
        if self.snr <= 0:
            raise ConfigError("readout SNR must be > 0")
        if self.assignment_scheme not in ("single_photon", "two_photon"):
            raise ConfigError(f"unknown assignment scheme {self.assignment_scheme!r}")


@dataclass(frozen=True)
class DeviceConfig:
    """Full parametric description of the processor.

    ``dual_rail_pairs`` lists (rail_a_id, rail_b_id, ancilla_id) triples;
    ``coupler_bindings`` lists (coupler_id, rail_b_of_pair_i, rail_a_of_pair_j)
    triples connecting physical qubits of distinct pairs.
    """

    transmons: tuple
    ancillas: tuple
    couplers: tuple
    network: CapacitanceNetwork
    dual_rail_pairs: tuple
    coupler_bindings: tuple
    readout: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.transmons + self.ancillas + self.couplers]
        if len(ids) != len(set(ids)):
            raise ConfigError("duplicate mode id in device config")
        known = set(ids)
        rail_ids = {s.id for s in self.transmons}
        ancilla_ids = {s.id for s in self.ancillas}
        seen_ancillas = set()
        for pair in self.dual_rail_pairs:
            rail_a, rail_b, anc = pair
            for rid in (rail_a, rail_b):
                if rid not in rail_ids:
                    raise ConfigError(f"pair references unknown rail {rid!r}")
            if anc not in ancilla_ids:
                raise ConfigError(f"pair references unknown ancilla {anc!r}")
            if anc in seen_ancillas:
                raise ConfigError(f"ancilla {anc!r} assigned to more than one pair")
            seen_ancillas.add(anc)
        pair_of_rail = {}
        for idx, (rail_a, rail_b, _) in enumerate(self.dual_rail_pairs):
            pair_of_rail[rail_a] = idx
            pair_of_rail[rail_b] = idx
        coupler_ids = {s.id for s in self.couplers}
        for coupler, rail_i, rail_j in self.coupler_bindings:
            if coupler not in coupler_ids:
                raise ConfigError(f"binding references unknown coupler {coupler!r}")
            for rid in (rail_i, rail_j):
                if rid not in rail_ids:
                    raise ConfigError(f"binding references unknown rail {rid!r}")
            if pair_of_rail[rail_i] == pair_of_rail[rail_j]:
                raise ConfigError(
                    f"coupler {coupler!r} must connect rails of distinct pairs"
                )
        for key in self.network.mutual:
            for mid in key:
                if mid not in known:
                    raise ConfigError(f"capacitance entry references unknown mode {mid!r}")
        for anc_id in self.readout:
            if anc_id not in ancilla_ids:
                raise ConfigError(f"readout entry references unknown ancilla {anc_id!r}")

    def mode(self, mode_id: str) -> TransmonSpec:
        for spec in self.transmons + self.ancillas + self.couplers:
            if spec.id == mode_id:
                return spec
        raise ConfigError(f"unknown mode id {mode_id!r}")

    def pair(self, index: int):
        return self.dual_rail_pairs[index]

    def pad_ground(self, mode_id: str) -> float:
        """Pad-ground capacitance of a mode (c_g for qubits, c_gc for couplers)."""
        for spec in self.couplers:
            if spec.id == mode_id:
                return spec.pad_ground_capacitance
        return self.network.c_g

    def coupler_for(self, rail_i: str, rail_j: str):
        """Coupler id bound between two rails, or None."""
        for coupler, a, b in self.coupler_bindings:
            if {a, b} == {rail_i, rail_j}:
                return coupler
        return None

    def coupling_mhz(self, mode_a: str, mode_b: str, f_a: float, f_b: float) -> float:
        """Total capacitive coupling between two modes at given frequencies (MHz).

        Rails that share a tunable coupler pick up the indirect pad-network
        term in addition to their direct mutual capacitance; every other
        connected pair uses the plain pad formula.
        """
        entry = self.network.entry(mode_a, mode_b)
        coupler = self.coupler_for(mode_a, mode_b)
        if coupler is not None:
            c_ac = self.network.entry(mode_a, coupler)
            c_bc = self.network.entry(mode_b, coupler)
            if c_ac is None or c_bc is None or entry is None:
                raise ConfigError(
                    f"incomplete capacitance data for {mode_a}-{coupler}-{mode_b}"
                )
            c_gc = self.pad_ground(coupler)
            return network_coupling(
                f_a, f_b, entry[0], c_ac[0], c_bc[0],
                self.network.c_g, c_gc, direct_sign=entry[1],
            )
        if entry is None:
            return 0.0
        cap, sign = entry
        c_ground = math.sqrt(self.pad_ground(mode_a) * self.pad_ground(mode_b))
        return pad_coupling(f_a, f_b, cap, c_ground, sign)


def pad_coupling(f_i: float, f_j: float, c_mutual: float, c_ground: float,
                 sign: int = +1) -> float:
    """Capacitive coupling between two pad-coupled modes, in MHz.

    g = sign * (sqrt(f_i f_j) / 8) * c_mutual / (c_ground / 2), with the
    frequencies in GHz and the result scaled to MHz.
    """
    if f_i <= 0 or f_j <= 0:
        raise DomainError("frequencies must be positive")
    if c_mutual < 0 or c_ground <= 0:
        raise DomainError("capacitances must be positive (mutual may be zero)")
    if sign not in (+1, -1):
        raise DomainError("sign must be +1 or -1")
    return sign * (math.sqrt(f_i * f_j) / 8.0) * (c_mutual / (c_ground / 2.0)) * 1e3


def network_coupling(f_i: float, f_j: float, c_direct: float, c_i_coupler: float,
                     c_j_coupler: float, c_g: float, c_gc: float,
                     direct_sign: int = +1) -> float:
    """Qubit-qubit coupling including the indirect coupler-pad network, in MHz.

    The direct term carries a geometry sign (the reference device routes the
    two rails over different coupler pads, so its direct term is negative);
    the indirect pad-network term is always positive.
    """
    if f_i <= 0 or f_j <= 0:
        raise DomainError("frequencies must be positive")
    if min(c_direct, c_i_coupler, c_j_coupler) < 0 or c_g <= 0 or c_gc <= 0:
        raise DomainError("capacitances must be positive (mutuals may be zero)")
    if direct_sign not in (+1, -1):
        raise DomainError("direct_sign must be +1 or -1")
    direct = direct_sign * c_direct / (c_g / 2.0)
    indirect = (c_i_coupler * c_j_coupler) / (c_g * c_gc / 4.0)
    return (math.sqrt(f_i * f_j) / 8.0) * (direct + indirect) * 1e3


def effective_coupling(g_direct: float, g_ic: float, g_jc: float,
                       f_i: float, f_j: float, f_c: float) -> float:
    """Coupler-mediated effective qubit-qubit coupling, in MHz.

    g_eff = g_direct + (g_ic g_jc / 2) (1/D_i + 1/D_j - 1/S_i - 1/S_j) with
    D_k = f_k - f_c and S_k = f_k + f_c; couplings in MHz, frequencies GHz.
    """
    if f_c == f_i or f_c == f_j:
        raise SingularityError("coupler degenerate with a qubit frequency")
    d_i = (f_i - f_c) * 1e3
    d_j = (f_j - f_c) * 1e3
    s_i = (f_i + f_c) * 1e3
    s_j = (f_j + f_c) * 1e3
    return g_direct + 0.5 * g_ic * g_jc * (1.0 / d_i + 1.0 / d_j - 1.0 / s_i - 1.0 / s_j)


def dual_rail_gap(g: float, delta: float = 0.0) -> float:
    """Dual-rail energy gap E = sqrt((2g)^2 + delta^2), in MHz."""
    if g <= 0:
        raise DomainError("coupling g must be positive")
    return math.hypot(2.0 * g, delta)


def flux_to_frequency(spec: TransmonSpec, flux: float) -> float:
    """Qubit frequency (GHz) at a flux bias in flux-quantum units.

    Periodic, even, f(0) = f_max and f(period/2) = f_min; quartic-root
    cosine dispersion with the asymmetry back-solved from the endpoints.
    """
    eta = -spec.anharmonicity
    d = spec.junction_asymmetry
    phase = math.pi * flux / spec.flux_period
    c2 = math.cos(phase) ** 2
    return (spec.f_max + eta) * (c2 + d * d * (1.0 - c2)) ** 0.25 - eta


def frequency_to_flux(spec: TransmonSpec, f01: float) -> float:
    """Inverse of :func:`flux_to_frequency` on the branch [0, period/2]."""
    if not (spec.f_min <= f01 <= spec.f_max):
        raise DomainError(f"{f01} GHz outside [{spec.f_min}, {spec.f_max}]")
    eta = -spec.anharmonicity
    d = spec.junction_asymmetry
    x4 = ((f01 + eta) / (spec.f_max + eta)) ** 4
    c2 = (x4 - d * d) / (1.0 - d * d)
    c2 = min(1.0, max(0.0, c2))
    return spec.flux_period / math.pi * math.acos(math.sqrt(c2))
