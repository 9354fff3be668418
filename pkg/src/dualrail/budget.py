"""Closed-form coherence-limited error budgets for logical gates."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import DomainError


@dataclass(frozen=True)
class ErrorBudget:
    """Additive error-contribution report, with optional bounds where the
    edge-exposure ambiguity of the flux pulse applies."""

    contributions: tuple          # ((label, fraction), ...)
    low: float | None = None
    high: float | None = None

    @property
    def total(self) -> float:
        return float(sum(frac for _, frac in self.contributions))

    def __post_init__(self):
        if self.low is not None and self.high is not None:
            if not (self.low <= self.total <= self.high) and \
                    not (abs(self.low - self.total) < 1e-15):
                raise DomainError("budget total outside its stated bounds")

    def rows(self):
        out = [(label, frac) for label, frac in self.contributions]
        out.append(("total", self.total))
        if self.low is not None:
            out.append(("bound_low", self.low))
        if self.high is not None:
            out.append(("bound_high", self.high))
        return out


def single_qubit_limit(tau_ns: float, t1_us: float, t_phi_us: float) -> float:
    """Coherence-limited error of a single logical gate of duration tau:
    eps = tau/(3 T1) + tau/(3 Tphi)."""
    if tau_ns < 0 or t1_us <= 0 or t_phi_us <= 0:
        raise DomainError("need tau >= 0 and positive coherence times")
    tau_us = tau_ns * 1e-3
    return tau_us / (3.0 * t1_us) + tau_us / (3.0 * t_phi_us)


def pure_dephasing_time(t1_us: float, t2_us: float) -> float:
    """White-noise pure-dephasing time from T1 and the echoed T2.

    Uses 1/Tphi = 1/T2 - 1/(2 T1).  The published writeup prints the
    relation with a different grouping that turns negative for T2 < T1;
    this form reproduces its own quoted value from its own inputs.
    """
    if t1_us <= 0 or t2_us <= 0:
        raise DomainError("coherence times must be positive")
    rate = 1.0 / t2_us - 1.0 / (2.0 * t1_us)
    if rate <= 0:
        raise DomainError("T2 exceeds the 2*T1 limit; no dephasing to assign")
    return 1.0 / rate


def two_qubit_limit(t1_us, t_phi_us, tau_low_ns: float = 50.0,
                    tau_high_ns: float = 150.0) -> ErrorBudget:
    """Coherence-limited entangling-gate error with edge-exposure bounds.

    eps(tau) = sum_i (2/5) (1/T1_i + 1/Tphi_i) tau, evaluated at the
    plateau-only duration for the lower bound and the full pulse duration
    for the upper bound.  ``t1_us``/``t_phi_us`` are per-pair sequences of
    the logical coherence times while the coupler sits at the interaction
    point.
    """
    t1_us = list(t1_us)
    t_phi_us = list(t_phi_us)
    if len(t1_us) != len(t_phi_us):
        raise DomainError("need one Tphi per T1")
    if any(t <= 0 for t in t1_us + t_phi_us):
        raise DomainError("coherence times must be positive")
    if not 0 < tau_low_ns <= tau_high_ns:
        raise DomainError("need 0 < tau_low <= tau_high")
    rate = sum(1.0 / t1 + 1.0 / tp for t1, tp in zip(t1_us, t_phi_us))

    def eps(tau_ns):
        return 0.4 * rate * tau_ns * 1e-3

    contributions = tuple(
        (f"pair{i}", 0.4 * (1.0 / t1 + 1.0 / tp) * tau_low_ns * 1e-3)
        for i, (t1, tp) in enumerate(zip(t1_us, t_phi_us)))
    return ErrorBudget(contributions, low=eps(tau_low_ns), high=eps(tau_high_ns))


def cnot_budget(swap_budgets, single_qubit_errors=()) -> ErrorBudget:
    """Additive composition of two entangling-gate budgets plus the
    single-qubit dressing errors."""
    contributions = []
    low = high = 0.0
    for k, b in enumerate(swap_budgets):
        contributions.append((f"swap{k}", b.total))
        low += b.low if b.low is not None else b.total
        high += b.high if b.high is not None else b.total
    for k, err in enumerate(single_qubit_errors):
        if err < 0:
            raise DomainError("single-qubit errors must be >= 0")
        contributions.append((f"single{k}", err))
        low += err
        high += err
    return ErrorBudget(tuple(contributions), low=low, high=high)
