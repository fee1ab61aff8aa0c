"""Classical warm-up model: stroboscopic feedback map and filtered-feedback ODE.

A classical oscillator H = p^2/2m + (m w^2/2)(x - b*Dx)^2 is cooled by
repeatedly re-centering the trap on a measured position.  Two variants:

* discrete: every ``dt_strobe`` the trap jumps to b*x (instantaneous
  measurement), free harmonic evolution in between;
* continuous: the measured position Dx lags the true one through a
  first-order filter with rate gamma.

Both share the same b-regimes: b < 1 cools and traps at the origin, b = 1
cools but leaves the particle wherever the noise-free dynamics parked the
trap, b > 1 blows up.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

__all__ = [
    "ClassicalParams",
    "ClassicalState",
    "Regime",
    "Classification",
    "discrete_step_matrix",
    "classify_discrete",
    "discrete_asymptote_b1",
    "continuous_matrix",
    "continuous_solution_b1",
    "continuous_relaxation_rate",
    "integrate_continuous",
    "energy",
]

# Tolerance on |b - 1| for the cooled-untrapped line, and on the spectral
# radius for the trapped/unstable split.
B_ONE_TOL = 1e-12
RHO_TOL = 1e-10


class Regime(enum.Enum):
    COOLED_TRAPPED = "CooledTrapped"
    COOLED_UNTRAPPED = "CooledUntrapped"
    UNSTABLE = "Unstable"


@dataclass(frozen=True)
class Classification:
    regime: Regime
    spectral_radius: float
    # True when rho sits within RHO_TOL of 1 off the b = 1 line; the paper
    # only characterizes b < 1, b = 1, b > 1, so such points are reported
    # Unstable with this flag raised.
    marginal: bool = False


@dataclass(frozen=True)
class ClassicalParams:
    m: float
    omega: float
    b: float
    gamma: float = 1.0
    dt_strobe: float = 1.0

    def __post_init__(self):
        for name in ("m", "omega", "b", "gamma", "dt_strobe"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)!r}")

    @property
    def theta(self) -> float:
        """Stroboscopic phase omega * dt_strobe."""
        return self.omega * self.dt_strobe


@dataclass(frozen=True)
class ClassicalState:
    x: float
    p: float
    d_x: float = 0.0


def _check_stroboscope(params: ClassicalParams):
    if abs(np.sin(params.theta)) < 1e-12:
        raise ValueError(
            f"omega*dt_strobe = {params.theta!r} is a multiple of pi "
            "(degenerate stroboscope)"
        )


def discrete_step_matrix(params: ClassicalParams) -> np.ndarray:
    """One-step linear map (x_k, p_k) -> (x_{k+1}, p_{k+1}) of the
    measure-and-recenter protocol."""
    _check_stroboscope(params)
    b, m, w, th = params.b, params.m, params.omega, params.theta
    c, s = np.cos(th), np.sin(th)
    return np.array(
        [
            [b + (1 - b) * c, s / (m * w)],
            [-m * w * (1 - b) * s, c],
        ]
    )


def classify_discrete(params: ClassicalParams) -> Classification:
    """Sort the discrete map into cooled+trapped / cooled-untrapped / unstable
    by the spectral radius of the step matrix."""
    rho = float(np.max(np.abs(np.linalg.eigvals(discrete_step_matrix(params)))))
    if abs(params.b - 1.0) <= B_ONE_TOL:
        return Classification(Regime.COOLED_UNTRAPPED, rho)
    if rho < 1.0 - RHO_TOL:
        return Classification(Regime.COOLED_TRAPPED, rho)
    if rho > 1.0 + RHO_TOL:
        return Classification(Regime.UNSTABLE, rho)
    return Classification(Regime.UNSTABLE, rho, marginal=True)


def discrete_asymptote_b1(x0: float, p0: float, params: ClassicalParams):
    """Limit of the b = 1 discrete iteration: the particle comes to rest at
    x0 + sin(w*dt)/(1 - cos(w*dt)) * p0/(m*w)."""
    if abs(params.b - 1.0) > B_ONE_TOL:
        raise ValueError(f"asymptote only defined for b = 1, got b = {params.b!r}")
    _check_stroboscope(params)
    th = params.theta
    x_inf = x0 + np.sin(th) / (1.0 - np.cos(th)) * p0 / (params.m * params.omega)
    return float(x_inf), 0.0


def continuous_matrix(params: ClassicalParams) -> np.ndarray:
    """Generator of the filtered-feedback flow, acting on (x, p, Dx)."""
    m, w, b, g = params.m, params.omega, params.b, params.gamma
    return np.array(
        [
            [0.0, 1.0 / m, 0.0],
            [-m * w**2, 0.0, m * w**2 * b],
            [g, 0.0, -g],
        ]
    )


def continuous_solution_b1(
    t: float, x0: float, p0: float, dx0: float, params: ClassicalParams
) -> ClassicalState:
    """Exact b = 1 solution of the continuous system.

    Underdamped (gamma < 2*omega): the closed form with envelope
    exp(-gamma t/2) and frequency Omega = sqrt(omega^2 - gamma^2/4).
    Overdamped: no closed form is derived, so the solution is evaluated by
    a dense matrix exponential instead.
    """
    if abs(params.b - 1.0) > B_ONE_TOL:
        raise ValueError(f"solution only defined for b = 1, got b = {params.b!r}")
    m, w, g = params.m, params.omega, params.gamma
    if g >= 2 * w:
        out = expm(continuous_matrix(params) * t) @ np.array([x0, p0, dx0])
        return ClassicalState(*map(float, out))
    Om = np.sqrt(w**2 - g**2 / 4)
    env = np.exp(-g * t / 2)
    c, s = env * np.cos(Om * t), env * np.sin(Om * t)
    u0 = x0 - dx0
    p = p0 * c + (g * p0 / 2 - m * w**2 * u0) / Om * s
    x = (
        x0
        + (g * p0 / (m * w**2) - u0) * (1 - c)
        + (p0 * (Om**2 - g**2 / 4) / (Om * m * w**2) + g * u0 / (2 * Om)) * s
    )
    dx = (
        dx0
        + g * p0 / (m * w**2) * (1 - c)
        + (-g * p0 / (2 * m * w**2) + u0) * (g / Om) * s
    )
    return ClassicalState(float(x), float(p), float(dx))


def continuous_relaxation_rate(params: ClassicalParams) -> float:
    """Decay rate of the b = 1 continuous system toward its resting point.

    gamma/2 exactly in the underdamped regime; otherwise the slowest
    nonzero mode of the generator (~ omega^2/gamma for gamma >> omega).
    """
    if abs(params.b - 1.0) > B_ONE_TOL:
        raise ValueError(f"relaxation rate defined for b = 1, got b = {params.b!r}")
    if params.gamma < 2 * params.omega:
        return params.gamma / 2
    eigs = np.linalg.eigvals(continuous_matrix(params))
    rates = [-ev.real for ev in eigs if abs(ev) > 1e-12 * params.gamma]
    return float(min(rates))


def integrate_continuous(
    state0: ClassicalState, params: ClassicalParams, t_final: float, dt: float
):
    """Classic RK4 integration of the linear flow; returns (times, states).

    ``states`` has one (x, p, Dx) row per time point, initial value included.
    """
    M = continuous_matrix(params)
    n = int(round(t_final / dt))
    out = np.empty((n + 1, 3))
    out[0] = (state0.x, state0.p, state0.d_x)
    z = out[0].copy()
    for k in range(n):
        k1 = M @ z
        k2 = M @ (z + 0.5 * dt * k1)
        k3 = M @ (z + 0.5 * dt * k2)
        k4 = M @ (z + dt * k3)
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = z
    return np.arange(n + 1) * dt, out


def energy(state: ClassicalState, params: ClassicalParams) -> float:
    """Classical oscillator energy p^2/2m + (m w^2/2)(x - b*Dx)^2."""
    m, w, b = params.m, params.omega, params.b
    return state.p**2 / (2 * m) + m * w**2 / 2 * (state.x - b * state.d_x) ** 2
