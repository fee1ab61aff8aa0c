"""Closed-form asymptotics of the three cooling protocols.

Energies are in hbar*omega/2 units (ground state = 1), variances are
dimensionless, rates share the unit of omega.  Formulas are exact fixed
points of the moment systems except where noted as regime asymptotics.

Two sentinel values keep non-numbers out of arithmetic: ``DIVERGENT``
(the X/XP position variance at b = 1, a physical operating point, not an
error) and ``UNKNOWN`` (no closed-form relaxation rate outside the
characterized regimes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import ProtocolConfig, ProtocolKind

__all__ = [
    "DIVERGENT",
    "UNKNOWN",
    "Objective",
    "OutOfValidityError",
    "AsymptoticReport",
    "ThermalEnergy",
    "asymptotic_energy",
    "asymptotic_var_x",
    "optimal_gain",
    "relaxation_rate_formula",
    "thermal_energy",
    "bath_energy_exact",
    "thermal_weighted_energy",
    "report",
]

# Hierarchies like "omega >> gamma" are applied when the separation reaches
# this factor; the closed regime formulas are returned only then.
REGIME_FACTOR = 10.0


class _Sentinel:
    def __init__(self, name):
        self._name = name

    def __repr__(self):
        return self._name


DIVERGENT = _Sentinel("Divergent")
UNKNOWN = _Sentinel("Unknown")


class OutOfValidityError(ValueError):
    """A closed-form optimum was requested outside its validity domain."""


class Objective:
    ENERGY = "Energy"
    VARIANCE = "Variance"


@dataclass(frozen=True)
class AsymptoticReport:
    """Asymptotic performance of one protocol at one parameter point."""

    kind: ProtocolKind
    energy: float
    var_x: object          # float or DIVERGENT
    relaxation_rate: object  # float or UNKNOWN
    trapped: bool
    regime_notes: str


@dataclass(frozen=True)
class ThermalEnergy:
    """Bath-coupled asymptotic energy and which formula produced it."""

    energy: float
    path: str  # "weighted" (regime average) or "exact"


def _check_gain(kind: ProtocolKind, gain: float):
    if kind in (ProtocolKind.X, ProtocolKind.XP):
        if not 0 < gain <= 1:
            raise OutOfValidityError(
                f"Protocol {kind.value} requires 0 < b <= 1, got {gain!r}"
            )
    elif not gain > 0:
        raise OutOfValidityError(f"Protocol C requires mu > 0, got {gain!r}")


def _check_rates(omega, gamma, lam):
    for name, v in (("omega", omega), ("gamma", gamma), ("lambda", lam)):
        if not v > 0:
            raise ValueError(f"{name} must be > 0, got {v!r}")


def asymptotic_energy(kind: ProtocolKind | str, omega, gamma, lam, gain) -> float:
    """Asymptotic mean energy in hbar*omega/2 units.

    X :  l/bg + bg/4l + (2-b) g l / (2 b w^2)
    XP:  l/bg + bg/4l + (1-b) g l / (b w^2)
    C :  mw/4l + l/mw + l/2g + l w/(g^2 m) + g m^2/8l

    Each expression is the exact fixed point of the matching moment
    system (see the tests for the cross-checks).  The X-XP energy gap is
    exactly g l/(2 w^2) at every b, and both protocols share the same
    optimal gain.  Protocol C's expression assumes the dynamics converge,
    which is not guaranteed for arbitrary parameters.
    """
    kind = ProtocolKind(kind)
    _check_rates(omega, gamma, lam)
    _check_gain(kind, gain)
    if kind is ProtocolKind.X:
        b = gain
        return lam / (b * gamma) + b * gamma / (4 * lam) \
            + (2 - b) * gamma * lam / (2 * b * omega**2)
    if kind is ProtocolKind.XP:
        b = gain
        return lam / (b * gamma) + b * gamma / (4 * lam) \
            + (1 - b) * gamma * lam / (b * omega**2)
    mu = gain
    return mu * omega / (4 * lam) + lam / (mu * omega) + lam / (2 * gamma) \
        + lam * omega / (gamma**2 * mu) + gamma * mu**2 / (8 * lam)


def asymptotic_var_x(kind: ProtocolKind | str, omega, gamma, lam, gain):
    """Asymptotic position variance; DIVERGENT for X/XP at b = 1 (cooling
    without trapping: particle and detector random-walk together)."""
    kind = ProtocolKind(kind)
    _check_rates(omega, gamma, lam)
    if kind in (ProtocolKind.X, ProtocolKind.XP):
        b = gain
        if not 0 < b <= 1:
            raise OutOfValidityError(
                f"Protocol {kind.value} requires 0 < b <= 1, got {b!r}"
            )
        if b == 1:
            return DIVERGENT
        return 0.5 * (lam / (b * gamma) + b * gamma / (4 * (1 - b) * lam)
                      + gamma * lam / (b * (1 - b) * omega**2))
    mu = gain
    _check_gain(kind, mu)
    return 0.5 * (mu * omega / (4 * lam) + lam / (mu * omega)
                  + lam * omega / (gamma**2 * mu))


def optimal_gain(kind: ProtocolKind | str, objective: str, omega, gamma, lam) -> float:
    """Gain minimizing the asymptotic energy or position variance.

    X/XP share both optima: b_e = 2 l sqrt(1/w^2 + 1/g^2) for energy
    (valid only while b_e < 1) and b_v = 1/(1 + (g/2l) sqrt((4l^2+w^2)/(g^2+w^2)))
    for variance.  Protocol C returns the hierarchy optimum mu* = 2 l/w,
    valid for 1 >> w/g >> l/w.
    """
    kind = ProtocolKind(kind)
    _check_rates(omega, gamma, lam)
    if objective not in (Objective.ENERGY, Objective.VARIANCE):
        raise ValueError(f"unknown objective {objective!r}")
    if kind is ProtocolKind.C:
        return 2 * lam / omega
    if objective == Objective.ENERGY:
        b_e = 2 * lam * math.sqrt(1 / omega**2 + 1 / gamma**2)
        if b_e >= 1:
            raise OutOfValidityError(
                f"b_e = {b_e:g} >= 1: the energy optimum formula only holds "
                "for b_e < 1 (measurement too strong for these rates)"
            )
        return b_e
    return 1.0 / (1.0 + gamma / (2 * lam)
                  * math.sqrt((4 * lam**2 + omega**2) / (gamma**2 + omega**2)))


def relaxation_rate_formula(kind: ProtocolKind | str, omega, gamma, lam, gain):
    """Closed-form relaxation rate where the paper gives one, else UNKNOWN.

    X: gamma at (b = 1, gamma < 2 omega); gamma*b for omega >> gamma.
    XP: exact smallest eigenvalue of the four-moment matrix at b < 1; at
    b = 1 the slow trapping mode decouples from the energy and the energy
    relaxes at exactly 2*gamma.
    C: mu*omega for small mu under gamma >> omega.
    """
    kind = ProtocolKind(kind)
    _check_rates(omega, gamma, lam)
    _check_gain(kind, gain)
    if kind is ProtocolKind.X:
        b = gain
        if b == 1 and gamma < 2 * omega:
            return gamma
        if omega >= REGIME_FACTOR * gamma:
            return gamma * b
        return UNKNOWN
    if kind is ProtocolKind.XP:
        b = gain
        if b == 1:
            return 2 * gamma
        Om = math.sqrt(omega**4 + 2 * (1 - 8 * b + 8 * b**2) * omega**2 * gamma**2
                       + gamma**4)
        rates = []
        for sgn_inner in (+1.0, -1.0):
            delta = complex(-omega**2 + gamma**2 + sgn_inner * Om) ** 0.5
            for sgn in (+1.0, -1.0):
                rates.append((gamma + sgn * delta / math.sqrt(2)).real)
        positive = [r for r in rates if r > 1e-12 * gamma]
        return min(positive)
    mu = gain
    if mu < 0.1 and gamma >= REGIME_FACTOR * omega:
        return mu * omega
    return UNKNOWN


def thermal_energy(omega, nbar) -> float:
    """Bath equilibrium energy 2(nbar + 1/2), in hbar*omega/2 units."""
    if nbar < 0:
        raise ValueError(f"nbar must be >= 0, got {nbar!r}")
    return 2 * (nbar + 0.5)


def bath_energy_exact(kind: ProtocolKind | str, cfg: ProtocolConfig) -> float:
    """Exact bath-coupled asymptotic energy (hbar*omega/2 units).

    X and XP are derived at b = 1; Protocol C holds for any mu.  At
    Gamma = 0 each reduces to the closed-system asymptote.
    """
    kind = ProtocolKind(kind)
    w, G = cfg.omega, cfg.Gamma
    Uth = thermal_energy(w, cfg.nbar)
    if kind is ProtocolKind.X:
        g, lam, b = cfg.gamma_x, cfg.lambda_x, cfg.cx
        if b != 1:
            raise OutOfValidityError("X bath formula is derived for b = 1")
        Einf = asymptotic_energy(kind, w, g, lam, 1.0)
        num = (Einf * (4 * w**2 * g + g * G * (g + G))
               + Uth * (4 * w**2 * G + G * (g + G)**2)
               + 2 * lam * g * G * (1 - g * (g + G) / (4 * w**2)))
        return num / (4 * w**2 * (g + G) + (g + G) * (2 * g + G) * G)
    if kind is ProtocolKind.XP:
        g, lam, b = cfg.gamma_x, cfg.lambda_x, cfg.cx
        if b != 1:
            raise OutOfValidityError("XP bath formula is derived for b = 1")
        Einf = asymptotic_energy(kind, w, g, lam, 1.0)
        return (2 * g * Einf + G * Uth) / (2 * g + G)
    g, lam, mu = cfg.gamma_x, cfg.lambda_x, cfg.bx
    _check_gain(kind, mu)
    # <H_c>_Gamma, transcribed term by term (verified against the moment
    # system's fixed point); U has hbar*omega/2 units absorbed.
    U = Uth * w / 2
    num = (2 * mu**3 * w**2 * g**3
           + mu**2 * w * g**2 * (4 * w**2 + G * (2 * g + G))
           + 8 * mu * w**2 * g * lam**2
           + 4 * w * lam**2 * (4 * w**2 + (2 * g + G)**2)
           + 8 * G * (4 * w**2 + 4 * mu * w * g + g**2 * (4 + mu**2)
                      + 4 * g * G + G**2) * lam * U)
    den = 32 * mu * w * g * lam * (g + G) + 8 * lam * G * (4 * w**2 + (2 * g + G)**2)
    return (num / den) * 2 / w


def _weight_rate(kind: ProtocolKind, cfg: ProtocolConfig) -> float:
    if kind is ProtocolKind.X:
        return cfg.gamma_x
    if kind is ProtocolKind.XP:
        return 2 * cfg.gamma_x
    return cfg.bx * cfg.omega  # mu * omega


def _in_weighted_regime(kind: ProtocolKind, cfg: ProtocolConfig) -> bool:
    w, g, lam, G = cfg.omega, cfg.gamma_x, cfg.lambda_x, cfg.Gamma
    if kind is ProtocolKind.X:
        return w >= REGIME_FACTOR * max(g, lam, G)
    if kind is ProtocolKind.XP:
        return True  # the weighted average is exact for XP at b = 1
    mu = cfg.bx
    return (g >= REGIME_FACTOR * w
            and w >= REGIME_FACTOR * max(mu * g, lam * g / w, G * g / w))


def thermal_weighted_energy(kind: ProtocolKind | str, cfg: ProtocolConfig) -> ThermalEnergy:
    """Bath-coupled asymptotic energy as a competition of rates.

    Inside each protocol's hierarchy the energy is the weighted average
    (G_i E_inf + Gamma U_th)/(G_i + Gamma) with G_x = gamma, G_xp =
    2 gamma, G_c = mu omega; outside it, the exact formula is used and the
    returned path says so.
    """
    kind = ProtocolKind(kind)
    if _in_weighted_regime(kind, cfg):
        w = cfg.omega
        gain = cfg.cx if kind is not ProtocolKind.C else cfg.bx
        Einf = asymptotic_energy(kind, w, cfg.gamma_x, cfg.lambda_x, gain)
        Gi = _weight_rate(kind, cfg)
        Uth = thermal_energy(w, cfg.nbar)
        return ThermalEnergy((Gi * Einf + cfg.Gamma * Uth) / (Gi + cfg.Gamma), "weighted")
    return ThermalEnergy(bath_energy_exact(kind, cfg), "exact")


def report(kind: ProtocolKind | str, omega, gamma, lam, gain) -> AsymptoticReport:
    """Assemble the full asymptotic picture at one parameter point."""
    kind = ProtocolKind(kind)
    energy = asymptotic_energy(kind, omega, gamma, lam, gain)
    var_x = asymptotic_var_x(kind, omega, gamma, lam, gain)
    rate = relaxation_rate_formula(kind, omega, gamma, lam, gain)
    if kind is ProtocolKind.C:
        notes = "exact fixed point (assumes convergence)"
    elif gain == 1:
        notes = "b = 1: ground-state-cooling line, no trapping"
    else:
        notes = "exact fixed point, 0 < b < 1"
    if rate is UNKNOWN:
        notes += "; no closed-form rate in this regime"
    return AsymptoticReport(
        kind=kind,
        energy=energy,
        var_x=var_x,
        relaxation_rate=rate,
        trapped=var_x is not DIVERGENT,
        regime_notes=notes,
    )
