"""Exact ensemble-level dynamics of the feedback protocols.

Each protocol's joint system/detector moments close into a small linear ODE
system  d(nu)/dt = M nu + s.  This module holds the literal entry-by-entry
builders for those systems, plus a generic engine: fixed points, residual
verified eigenvalues, fixed-step RK4 integration, and maps from the moment
vector to physical observables (energy in hbar*omega/2 units, position
variance).

Component conventions per system kind (b is the trap-displacement gain,
u = x - b*Dx, v = p - b*Dp, all expectations joint over system + detector):

* X            nu = (<u^2>/2, <p^2>/2, <pu + up>, <u Dx>, <p Dx>, <Dx^2>)
* XP           nu = ((<u^2> + <v^2>)/2, <u Dx + v Dp>, <v Dx - u Dp>,
                     <Dx^2 + Dp^2>)
* C            nu = ((w/2)<x^2>, (w/2)<p^2>, (w/2)<xp + px>, <Dx x>,
                     <Dx p>, <Dx^2>)
* X_THERMAL_B1 nu = (<V>, <K>, <G>, <Hx>) with V = (w/2)(x - Dx)^2,
                     K = (w/2)p^2, G = (x - Dx)p + p(x - Dx)   [hbar = 1]
* XP_THERMAL_B1 likewise with both quadratures detector-shifted.

Every builder is validated two independent ways in the test suite: its
fixed point against the closed-form asymptotics, and its generator against
the Ito generator of the trajectory SDEs applied to the defining moments
(which is how transcription slips get caught).  Note the XP source's first
component carries the measurement-backaction heating ``lambda`` on top of
the detector-diffusion term.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import ProtocolConfig

__all__ = [
    "SystemKind",
    "MomentSystem",
    "Spectrum",
    "RelaxationReport",
    "SingularSystemError",
    "UnstableSystemError",
    "StepSizeError",
    "build_system",
    "fixed_point",
    "eigenvalues",
    "relaxation_rate",
    "integrate",
    "observables",
]

# Eigenpair acceptance threshold (relative to the matrix scale) and the
# scale-relative cutoff below which a mode counts as marginal.
RESIDUAL_TOL = 1e-9
MARGINAL_TOL = 1e-9
# Relative projection of an eigenvector onto the energy map below which the
# mode is invisible to the energy (exact zeros occur at b = 1, where the
# moment matrices turn block triangular).
VISIBILITY_TOL = 1e-9


class SystemKind(enum.Enum):
    X = "X"
    XP = "XP"
    C = "C"
    X_THERMAL_B1 = "X_thermal_b1"
    XP_THERMAL_B1 = "XP_thermal_b1"


class SingularSystemError(ValueError):
    """The moment matrix is singular (e.g. the marginal detector-diffusion
    mode at b = 1); carries the near-null direction."""

    def __init__(self, message, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction


class UnstableSystemError(ValueError):
    """An eigenvalue with positive real part: no relaxation rate exists."""


class StepSizeError(ValueError):
    """RK4 step too large for the system's fastest scale."""


@dataclass(frozen=True)
class MomentSystem:
    """Linear moment ODE  d(nu)/dt = matrix @ nu + source  with labeled
    components and affine observable-extraction maps.

    ``energy_map @ nu`` is the protocol energy in hbar*omega/2 units;
    ``varx_map @ nu`` is <x^2> (equal to the position variance at the fixed
    point, where <x> = 0), or None where the protocol does not trap.
    """

    kind: SystemKind
    matrix: np.ndarray
    source: np.ndarray
    labels: tuple
    energy_map: np.ndarray
    varx_map: np.ndarray | None = None

    def __post_init__(self):
        for arr in (self.matrix, self.source, self.energy_map, self.varx_map):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class Spectrum:
    """Eigenvalues in deterministic (Re, Im) order with per-eigenpair
    backward-error residuals; ``flagged[i]`` marks residuals that failed
    the acceptance threshold."""

    eigenvalues: tuple
    residuals: tuple
    flagged: tuple


@dataclass(frozen=True)
class RelaxationReport:
    """Slowest energy-visible decay rate, with the excluded modes."""

    rate: float
    marginal_modes: tuple
    invisible_modes: tuple


def _require(cond, message):
    if not cond:
        raise ValueError(message)


def _protocol_rates(cfg: ProtocolConfig, kind: SystemKind):
    """Validate that cfg carries the gain pattern of ``kind`` and pull out
    (omega, gamma, lambda, gain)."""
    w = cfg.omega
    if kind in (SystemKind.X, SystemKind.X_THERMAL_B1):
        _require(cfg.channel_x_active and not cfg.channel_p_active,
                 f"{kind.value} needs an active x channel only")
        _require(cfg.cx > 0 and cfg.bx == 0,
                 f"{kind.value} needs the Protocol X gain pattern (cx = b, bx = 0)")
        return w, cfg.gamma_x, cfg.lambda_x, cfg.cx
    if kind in (SystemKind.XP, SystemKind.XP_THERMAL_B1):
        _require(cfg.channel_x_active and cfg.channel_p_active,
                 f"{kind.value} needs both channels active")
        _require(cfg.lambda_x == cfg.lambda_p and cfg.gamma_x == cfg.gamma_p,
                 f"{kind.value} is derived for equal strengths and bandwidths "
                 "(lambda_x = lambda_p, gamma_x = gamma_p)")
        _require(cfg.cx == cfg.bp and cfg.cx > 0 and cfg.bx == 0 and cfg.cp == 0,
                 f"{kind.value} needs the Protocol XP gain pattern (cx = bp = b)")
        return w, cfg.gamma_x, cfg.lambda_x, cfg.cx
    # Protocol C
    _require(cfg.channel_x_active and not cfg.channel_p_active,
             "C needs an active x channel only")
    _require(cfg.bx > 0 and cfg.cx == 0,
             "C needs the cross-feedback gain pattern (bx = mu, cx = 0)")
    return w, cfg.gamma_x, cfg.lambda_x, cfg.bx


def build_system(cfg: ProtocolConfig, kind: SystemKind | str, reduced: bool = False) -> MomentSystem:
    """Assemble the moment system of ``kind`` for a matching configuration.

    ``reduced=True`` returns the closed energy sub-block that exists at
    b = 1, where the full X/XP systems are singular: the (nu1, nu2, nu3)
    block for X, the single energy component for XP.  The thermal kinds
    require b = 1 outright (the general-b open systems are not part of the
    model).
    """
    kind = SystemKind(kind)
    w, g, lam, gain = _protocol_rates(cfg, kind)
    G, nbar = cfg.Gamma, cfg.nbar
    if kind in (SystemKind.X, SystemKind.XP) and G != 0:
        raise ValueError(
            f"{kind.value} is a closed-system model; use {kind.value}_thermal_b1 "
            "for a bath-coupled oscillator"
        )
    if kind in (SystemKind.X_THERMAL_B1, SystemKind.XP_THERMAL_B1):
        _require(gain == 1.0, f"{kind.value} is derived for b = 1 only")
    if reduced and kind not in (SystemKind.X, SystemKind.XP):
        raise ValueError(f"no reduced sub-block for {kind.value}")
    if reduced:
        _require(gain == 1.0, "the closed energy sub-block exists at b = 1 only")

    b = mu = gain
    if kind is SystemKind.X:
        if reduced:
            M = np.array([
                [-2 * g, 0.0, w / 2],
                [0.0, 0.0, -w / 2],
                [-4 * w, 4 * w, -g],
            ])
            s = np.array([g**2 / (8 * lam), lam / 2, 0.0])
            return MomentSystem(
                kind, M, s,
                ("<u^2>/2", "<p^2>/2", "<pu + up>"),
                energy_map=np.array([2.0, 2.0, 0.0]),
            )
        M = np.array([
            [-2 * g * b, 0.0, w / 2, -g * b * (b - 1), 0.0, 0.0],
            [0.0, 0.0, -w / 2, 0.0, 0.0, 0.0],
            [-4 * w, 4 * w, -g * b, 0.0, 2 * g * b * (1 - b), 0.0],
            [2 * g, 0.0, 0.0, -g, w, g * b * (1 - b)],
            [0.0, 0.0, g / 2, -w, -g * (1 - b), 0.0],
            [0.0, 0.0, 0.0, 2 * g, 0.0, -2 * g * (1 - b)],
        ])
        s = np.array([
            b**2 * g**2 / (8 * lam), lam / 2, 0.0,
            -b * g**2 / (4 * lam), 0.0, g**2 / (4 * lam),
        ])
        return MomentSystem(
            kind, M, s,
            ("<u^2>/2", "<p^2>/2", "<pu + up>", "<u Dx>", "<p Dx>", "<Dx^2>"),
            energy_map=np.array([2.0, 2.0, 0.0, 0.0, 0.0, 0.0]),
            varx_map=np.array([2.0, 0.0, 0.0, 2 * b, 0.0, b**2]),
        )

    if kind is SystemKind.XP:
        if reduced:
            M = np.array([[-2 * g]])
            s = np.array([lam + g**2 / (4 * lam)])
            return MomentSystem(
                kind, M, s, ("(<u^2> + <v^2>)/2",),
                energy_map=np.array([2.0]),
            )
        M = np.array([
            [-2 * g * b, -g * b * (b - 1), 0.0, 0.0],
            [2 * g, -g, w, -g * b * (b - 1)],
            [0.0, -w, -g, 0.0],
            [0.0, 2 * g, 0.0, 2 * g * (b - 1)],
        ])
        # First source entry carries the backaction heating lambda on top of
        # the detector-diffusion b^2 g^2/4lam term.
        s = np.array([
            lam + b**2 * g**2 / (4 * lam), -b * g**2 / (2 * lam),
            0.0, g**2 / (2 * lam),
        ])
        return MomentSystem(
            kind, M, s,
            ("(<u^2> + <v^2>)/2", "<u Dx + v Dp>", "<v Dx - u Dp>", "<Dx^2 + Dp^2>"),
            energy_map=np.array([2.0, 0.0, 0.0, 0.0]),
            varx_map=np.array([1.0, b, 0.0, b**2 / 2]),
        )

    if kind is SystemKind.C:
        U2 = w * (nbar + 0.5) / 2  # Gamma*U_th/2 feeds the quadrature heating
        M = np.array([
            [-G, 0.0, w, -mu * w**2, 0.0, 0.0],
            [0.0, -G, -w, 0.0, G * w * mu / 2, 0.0],
            [-2 * w, 2 * w, -G, G * w * mu / 2, -mu * w**2, 0.0],
            [2 * g / w, 0.0, 0.0, -g - G / 2, w, -mu * w],
            [0.0, 0.0, g / w, -w, -g - G / 2, G * mu / 2],
            [0.0, 0.0, 0.0, 2 * g, 0.0, -2 * g],
        ])
        s = np.array([G * U2, w * lam / 2 + G * U2, 0.0, 0.0, 0.0, g**2 / (4 * lam)])
        return MomentSystem(
            kind, M, s,
            ("(w/2)<x^2>", "(w/2)<p^2>", "(w/2)<xp + px>",
             "<Dx x>", "<Dx p>", "<Dx^2>"),
            # <H_c> = (hw/2)[<x^2> + <p^2> - 2 mu <Dx p> + mu^2 <Dx^2>]
            energy_map=np.array([2 / w, 2 / w, 0.0, 0.0, -2 * mu, mu**2]),
            varx_map=np.array([2 / w, 0.0, 0.0, 0.0, 0.0, 0.0]),
        )

    Uth = w * (nbar + 0.5)
    if kind is SystemKind.X_THERMAL_B1:
        M = np.array([
            [-(2 * g + G), 0.0, w**2 / 2, 0.0],
            [0.0, -G, -w**2 / 2, 0.0],
            [-4.0, 4.0, -(g + G), 0.0],
            [-2 * g, 0.0, 0.0, -G],
        ])
        s = np.array([
            w * g**2 / (8 * lam) + G * Uth / 2,
            w * lam / 2 + G * Uth / 2,
            0.0,
            w * lam / 2 + w * g**2 / (8 * lam) + G * Uth,
        ])
        labels = ("<V>", "<K>", "<G>", "<Hx>")
    else:  # XP_THERMAL_B1
        Hinf = w * (lam / (2 * g) + g / (8 * lam))  # closed-system asymptote, b = 1
        M = np.array([
            [-(2 * g + G), 0.0, w**2 / 2, 0.0],
            [0.0, -(2 * g + G), -w**2 / 2, 0.0],
            [-4.0, 4.0, -(2 * g + G), 0.0],
            [0.0, 0.0, 0.0, -(2 * g + G)],
        ])
        heat = w * lam / 2 + w * g**2 / (8 * lam) + G * Uth / 2
        s = np.array([heat, heat, 0.0, 2 * g * Hinf + G * Uth])
        labels = ("<V>", "<K>", "<G>", "<Hxp>")
    return MomentSystem(
        kind, M, s, labels,
        energy_map=np.array([0.0, 0.0, 0.0, 2 / w]),
    )


def fixed_point(sys: MomentSystem) -> np.ndarray:
    """Stationary moment vector, solving  matrix @ nu = -source.

    Dense LU with partial pivoting plus iterative refinement; the residual
    ||M nu + s||_inf must come out below 1e-10 ||s||_inf.  A singular
    matrix (the marginal detector-diffusion mode of X/XP at b = 1) raises
    SingularSystemError carrying the near-null direction; b = 1 energies
    are available through the reduced sub-block systems instead.
    """
    M, s = sys.matrix, sys.source
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        null = np.linalg.svd(M)[2][-1]
        raise SingularSystemError(
            f"{sys.kind.value} moment matrix is singular "
            f"(sigma_min/sigma_max = {sv[-1] / sv[0]:.2e}); "
            "at b = 1 use build_system(..., reduced=True) for the energy block",
            null_direction=null,
        )
    # Iterative refinement with the residual accumulated in extended
    # precision: keeps the forward error near machine epsilon even at the
    # ill-conditioned grid corners (gamma/omega ~ 1e-2, b near the edges).
    Ml, sl = M.astype(np.longdouble), s.astype(np.longdouble)
    nu = np.linalg.solve(M, -s)
    for _ in range(4):
        resid = np.asarray(Ml @ nu.astype(np.longdouble) + sl, dtype=float)
        if np.max(np.abs(resid)) <= 1e-13 * _resid_scale(M, s, nu):
            break
        nu = nu - np.linalg.solve(M, resid)
    resid = np.asarray(Ml @ nu.astype(np.longdouble) + sl, dtype=float)
    if np.max(np.abs(resid)) > 1e-10 * _resid_scale(M, s, nu):
        raise SingularSystemError(
            f"fixed-point residual {np.max(np.abs(resid)):.2e} exceeds "
            f"1e-10 of the system scale (condition number ~ {sv[0] / sv[-1]:.1e})"
        )
    return nu


def _resid_scale(M, s, nu):
    """Natural residual scale max(||s||, ||M|| ||nu||): 'backward error of a
    nearby problem', meaningful at any conditioning."""
    return float(max(np.max(np.abs(s)),
                     np.linalg.norm(M, np.inf) * np.max(np.abs(nu)), 1e-300))


def eigenvalues(matrix: np.ndarray) -> Spectrum:
    """Full spectrum of a small dense real matrix, residual-verified.

    Each eigenpair's backward error ||M v - ev v|| / ||v|| is checked
    against RESIDUAL_TOL * max(1, ||M||); failures are flagged rather than
    silently returned.  Deterministic ordering by (Re, Im).
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"need a square matrix, got shape {matrix.shape}")
    if matrix.shape[0] > 8:
        raise ValueError("moment systems have dim <= 8")
    vals, vecs = np.linalg.eig(matrix)  # LAPACK raises on non-convergence
    scale = max(1.0, float(np.max(np.abs(matrix))))
    order = np.lexsort((vals.imag, vals.real))
    eigs, resids, flags = [], [], []
    for i in order:
        v = vecs[:, i]
        r = float(np.linalg.norm(matrix @ v - vals[i] * v) / np.linalg.norm(v))
        eigs.append(complex(vals[i]))
        resids.append(r)
        flags.append(r >= RESIDUAL_TOL * scale)
    return Spectrum(tuple(eigs), tuple(resids), tuple(flags))


def relaxation_rate(sys: MomentSystem) -> RelaxationReport:
    """Slowest decay rate of the modes the energy observable can see.

    Marginal modes (|Re| within MARGINAL_TOL of the matrix scale, e.g. the
    unbounded detector diffusion at b = 1) are excluded and reported, as
    are modes whose eigenvectors have exactly no component in the energy
    map (at b = 1 the matrices are block triangular and the energy block
    decouples, which is how XP reaches rate 2*gamma while slower state
    modes exist).  Any truly growing mode raises UnstableSystemError.
    """
    M = sys.matrix
    vals, vecs = np.linalg.eig(M)
    eps = MARGINAL_TOL * float(np.max(np.abs(M)))
    if np.any(vals.real > eps):
        bad = vals[vals.real > eps]
        raise UnstableSystemError(
            f"{sys.kind.value} system has growing modes {bad}"
        )
    e = sys.energy_map
    marginal, invisible, rates = [], [], []
    for i in range(len(vals)):
        if abs(vals[i].real) <= eps:
            marginal.append(complex(vals[i]))
            continue
        proj = abs(e @ vecs[:, i]) / (np.linalg.norm(e) * np.linalg.norm(vecs[:, i]))
        if proj < VISIBILITY_TOL:
            invisible.append(complex(vals[i]))
            continue
        rates.append(-vals[i].real)
    if not rates:  # degenerate extraction; fall back to all decaying modes
        rates = [-v.real for v in vals if v.real < -eps]
    return RelaxationReport(float(min(rates)), tuple(marginal), tuple(invisible))


def integrate(sys: MomentSystem, nu0, t_final: float, dt: float):
    """Fixed-step classic RK4 for the affine flow; returns (times, series).

    The step must satisfy dt <= 0.1/||M||_inf (an upper bound on the
    spectral radius), otherwise StepSizeError suggests a step.
    """
    M, s = sys.matrix, sys.source
    norm = float(np.linalg.norm(M, np.inf))
    if norm > 0 and dt > 0.1 / norm:
        raise StepSizeError(
            f"dt = {dt:g} too large for ||M||_inf = {norm:g}; "
            f"use dt <= {0.1 / norm:g}"
        )
    nu0 = np.asarray(nu0, dtype=float)
    if nu0.shape != (sys.dim,):
        raise ValueError(f"nu0 must have shape ({sys.dim},), got {nu0.shape}")
    n = int(round(t_final / dt))
    out = np.empty((n + 1, sys.dim))
    out[0] = nu0
    nu = nu0.copy()
    for k in range(n):
        k1 = M @ nu + s
        k2 = M @ (nu + 0.5 * dt * k1) + s
        k3 = M @ (nu + 0.5 * dt * k2) + s
        k4 = M @ (nu + dt * k3) + s
        nu = nu + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = nu
    return np.arange(n + 1) * dt, out


def observables(kind: SystemKind | str, cfg: ProtocolConfig, nu) -> dict:
    """Physical observables of a moment vector: energy (hbar*omega/2 units)
    and, where the protocol traps, <x^2>."""
    sys = build_system(cfg, kind, reduced=len(np.atleast_1d(nu)) in (1, 3))
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (sys.dim,):
        raise ValueError(
            f"moment vector has dim {nu.shape}, {sys.kind.value} needs ({sys.dim},)"
        )
    out = {"energy": float(sys.energy_map @ nu)}
    if sys.varx_map is not None:
        out["var_x"] = float(sys.varx_map @ nu)
    return out
