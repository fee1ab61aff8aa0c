"""Shared domain types for the feedback-cooling laboratory.

Conventions used throughout the package:

* dimensionless oscillator operators, ``[x, p] = i`` (hbar = 1, mass
  absorbed into the quadratures);
* every rate (``omega``, ``gamma``, ``lambda``, ``Gamma``) in the same
  inverse-time unit;
* energies stored and reported in units of ``hbar*omega/2``, so the ground
  state reads exactly 1.0.

The feedback Hamiltonian has the general quadratic form

    H(D) = (hbar w / 2) [ (p - bx*Dx - bp*Dp)^2 + (x - cx*Dx - cp*Dp)^2 ]

and the three named protocols are gain patterns of it:

* Protocol X  — trap displacement from a position measurement:
  ``cx = b``, p-channel off.
* Protocol XP — trap displacement from position and momentum measurements:
  ``cx = bp = b``, both channels on with equal strength and bandwidth.
* Protocol C  — cross feedback (cold-damping analog), momentum kick from a
  position measurement: ``bx = mu``, p-channel off.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

__all__ = [
    "HEISENBERG_TOL",
    "ConfigError",
    "StateError",
    "ProtocolKind",
    "ProtocolConfig",
    "GaussianState",
    "DetectorState",
    "make_protocol",
    "with_bath",
    "energy_expectation",
]

# Absolute slack on the Heisenberg bound Vx*Vp - C^2/4 >= 1/4.  Integrators
# are expected to keep states far inside this.
HEISENBERG_TOL = 1e-9


class ConfigError(ValueError):
    """A protocol parameter violates its constraint; names the field."""


class StateError(ValueError):
    """A Gaussian state violates positivity or the Heisenberg bound."""


class ProtocolKind(enum.Enum):
    X = "X"
    XP = "XP"
    C = "C"


def _require_positive(name, value):
    if not value > 0:
        raise ConfigError(f"{name} must be > 0, got {value!r}")


def _require_nonnegative(name, value):
    if value < 0:
        raise ConfigError(f"{name} must be >= 0, got {value!r}")


@dataclass(frozen=True)
class ProtocolConfig:
    """Unified quadratic-feedback parameter set.

    Attributes
    ----------
    omega : float
        Oscillator angular frequency; the unit of all quoted rates.
    lambda_x, lambda_p : float
        Measurement strengths per channel.  A channel is active iff its
        strength is positive.
    gamma_x, gamma_p : float
        Detector bandwidths per channel (1/gamma is the detector delay).
    bx, bp, cx, cp : float
        Dimensionless feedback gains of the general quadratic Hamiltonian
        (``bx, bp`` shift the momentum, ``cx, cp`` shift the position).
    Gamma : float
        Thermal bath coupling rate (0 for a closed system).
    nbar : float
        Bath mean occupation number.
    """

    omega: float
    lambda_x: float = 0.0
    lambda_p: float = 0.0
    gamma_x: float = 0.0
    gamma_p: float = 0.0
    bx: float = 0.0
    bp: float = 0.0
    cx: float = 0.0
    cp: float = 0.0
    Gamma: float = 0.0
    nbar: float = 0.0

    def __post_init__(self):
        _require_positive("omega", self.omega)
        for name in ("lambda_x", "lambda_p", "gamma_x", "gamma_p", "Gamma", "nbar"):
            _require_nonnegative(name, getattr(self, name))
        # An inactive channel has no detector variable: its gains must vanish
        # (the gamma/sqrt(4*lambda) detector noise diverges as lambda -> 0,
        # so "off" is structural, not a lambda -> 0 limit).
        if not self.channel_x_active:
            for name in ("bx", "cx"):
                if getattr(self, name) != 0.0:
                    raise ConfigError(
                        f"{name} must be 0 when the x channel is inactive (lambda_x = 0)"
                    )
        if not self.channel_p_active:
            for name in ("bp", "cp"):
                if getattr(self, name) != 0.0:
                    raise ConfigError(
                        f"{name} must be 0 when the p channel is inactive (lambda_p = 0)"
                    )
        for active, lam, gam, ch in (
            (self.channel_x_active, self.lambda_x, self.gamma_x, "x"),
            (self.channel_p_active, self.lambda_p, self.gamma_p, "p"),
        ):
            if active and not gam > 0:
                raise ConfigError(f"gamma_{ch} must be > 0 on the active {ch} channel")

    @property
    def channel_x_active(self) -> bool:
        return self.lambda_x > 0

    @property
    def channel_p_active(self) -> bool:
        return self.lambda_p > 0


@dataclass(frozen=True)
class GaussianState:
    """First and second cumulants of the conditional Gaussian wavefunction.

    ``cov`` is the symmetrized cross cumulant <xp + px> - 2<x><p>.  The
    purity invariant of a valid state is var_x*var_p - cov^2/4 >= 1/4
    (equality for pure states).
    """

    mean_x: float = 0.0
    mean_p: float = 0.0
    var_x: float = 0.5
    var_p: float = 0.5
    cov: float = 0.0

    def __post_init__(self):
        if not self.var_x > 0:
            raise StateError(f"var_x must be > 0, got {self.var_x!r}")
        if not self.var_p > 0:
            raise StateError(f"var_p must be > 0, got {self.var_p!r}")
        if self.purity < 0.25 - HEISENBERG_TOL:
            raise StateError(
                "Heisenberg bound violated: "
                f"var_x*var_p - cov^2/4 = {self.purity!r} < 1/4"
            )

    @property
    def purity(self) -> float:
        """Gaussian purity invariant Vx*Vp - C^2/4 (1/4 for pure states)."""
        return self.var_x * self.var_p - 0.25 * self.cov**2


@dataclass(frozen=True)
class DetectorState:
    """Low-pass filtered measurement outcomes, one per channel.

    An inactive channel's outcome is pinned to exactly 0 for the whole run.
    """

    d_x: float = 0.0
    d_p: float = 0.0


def make_protocol(
    kind: ProtocolKind | str,
    omega: float,
    lam: float,
    gamma: float,
    gain: float,
    Gamma: float = 0.0,
    nbar: float = 0.0,
) -> ProtocolConfig:
    """Build a validated configuration for one of the named protocols.

    Parameters
    ----------
    kind : {"X", "XP", "C"}
    omega, lam, gamma : float
        Frequency, measurement strength, detector bandwidth (all > 0).
        Protocol XP uses the same ``lam`` and ``gamma`` on both channels.
    gain : float
        Feedback gain: ``b`` for X/XP (trap displacement), ``mu`` for C
        (momentum kick).  Must be > 0.
    Gamma, nbar : float, optional
        Thermal bath coupling and occupation (default: closed system).
    """
    kind = ProtocolKind(kind)
    _require_positive("omega", omega)
    _require_positive("lambda", lam)
    _require_positive("gamma", gamma)
    _require_positive("b" if kind is not ProtocolKind.C else "mu", gain)
    if kind is ProtocolKind.X:
        return ProtocolConfig(
            omega=omega, lambda_x=lam, gamma_x=gamma, cx=gain, Gamma=Gamma, nbar=nbar
        )
    if kind is ProtocolKind.XP:
        return ProtocolConfig(
            omega=omega,
            lambda_x=lam,
            lambda_p=lam,
            gamma_x=gamma,
            gamma_p=gamma,
            cx=gain,
            bp=gain,
            Gamma=Gamma,
            nbar=nbar,
        )
    return ProtocolConfig(
        omega=omega, lambda_x=lam, gamma_x=gamma, bx=gain, Gamma=Gamma, nbar=nbar
    )


def with_bath(cfg: ProtocolConfig, Gamma: float, nbar: float) -> ProtocolConfig:
    """Copy of ``cfg`` coupled to a thermal bath (Gamma, nbar)."""
    return replace(cfg, Gamma=Gamma, nbar=nbar)


def energy_expectation(
    state: GaussianState, det: DetectorState, cfg: ProtocolConfig
) -> float:
    """Feedback-Hamiltonian expectation value, in units of hbar*omega/2.

    Evaluates Vx + (<x> - cx*Dx - cp*Dp)^2 + Vp + (<p> - bx*Dx - bp*Dp)^2,
    i.e. 2<H>/(hbar*omega) for the general quadratic Hamiltonian.  The
    ground state of the displaced trap gives exactly 1.0.
    """
    dx_shift = state.mean_x - cfg.cx * det.d_x - cfg.cp * det.d_p
    dp_shift = state.mean_p - cfg.bx * det.d_x - cfg.bp * det.d_p
    return state.var_x + dx_shift**2 + state.var_p + dp_shift**2
