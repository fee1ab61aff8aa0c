"""Stochastic Gaussian-trajectory simulation of the monitored oscillator.

A Gaussian conditional wavefunction stays Gaussian under continuous weak
position/momentum monitoring, so a single quantum trajectory reduces to
seven coupled SDEs for (<x>, <p>, Vx, Vp, C, Dx, Dp): noisy means, a
deterministic variance/covariance flow, and Ornstein-Uhlenbeck-like
detector outcomes sharing the same Wiener increments as the means.

Integration is Euler-Maruyama with a fixed step (ensemble acceptance only
needs weak convergence).  The hot loop is a single-threaded, nogil numba
kernel over a chunk of trajectories; parallelism comes from a thread pool
over chunks.  Randomness is a counter-based Philox stream keyed by
(master_seed, trajectory_index), so any trajectory is reproducible in
isolation and results are bit-identical for every thread count and chunk
layout.  Bit-reproducibility is within-version: numpy's Philox +
ziggurat normals are frozen per numpy release.

The thermal bath (Gamma > 0) is deliberately NOT simulated here: its
unraveling would need modeling choices beyond the ensemble description;
bath physics lives in the moments and analytic layers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.random import Generator, Philox

from .core import DetectorState, GaussianState, ProtocolConfig, energy_expectation

__all__ = [
    "STEP_GUARD",
    "StateCollapseError",
    "TrajectoryConfig",
    "TrajectoryResult",
    "EnsembleStats",
    "trajectory_stream",
    "sde_step",
    "simulate_trajectory",
    "run_ensemble",
    "gaussian_closure_check",
]

# dt must not exceed STEP_GUARD / max(omega, gammas, lambdas).
STEP_GUARD = 0.01
# Steps advanced per RNG draw / kernel call.
_BLOCK = 8192


class StateCollapseError(RuntimeError):
    """A conditional variance left (0, inf) during integration; reports the
    trajectory index and master seed for replay (dt is too large)."""

    def __init__(self, message, trajectory=None, step=None, master_seed=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.step = step
        self.master_seed = master_seed


def _max_rate(cfg: ProtocolConfig) -> float:
    return max(cfg.omega, cfg.gamma_x, cfg.gamma_p, cfg.lambda_x, cfg.lambda_p)


@dataclass(frozen=True)
class TrajectoryConfig:
    """One stochastic run: protocol, initial conditions, grid, and seed.

    ``t_final/dt`` must be an integer number of steps and a multiple of
    ``record_stride``; samples are recorded every ``record_stride`` steps
    (the initial state included).
    """

    cfg: ProtocolConfig
    state0: GaussianState = GaussianState()
    det0: DetectorState = DetectorState()
    t_final: float = 10.0
    dt: float = 1e-3
    seed: int = 0
    record_stride: int = 1

    def __post_init__(self):
        guard = STEP_GUARD / _max_rate(self.cfg)
        if self.dt <= 0 or self.dt > guard * (1 + 1e-12):
            raise ValueError(
                f"dt = {self.dt:g} violates the step guard; need 0 < dt <= {guard:g}"
            )
        n = self.t_final / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, abs(n)) or round(n) < 1:
            raise ValueError(f"t_final/dt = {n!r} must be a positive integer")
        if self.record_stride < 1 or round(n) % self.record_stride:
            raise ValueError(
                f"record_stride = {self.record_stride} must divide the "
                f"{int(round(n))} steps"
            )
        if not self.cfg.channel_x_active and self.det0.d_x != 0.0:
            raise ValueError("inactive x channel: d_x must start (and stay) 0")
        if not self.cfg.channel_p_active and self.det0.d_p != 0.0:
            raise ValueError("inactive p channel: d_p must start (and stay) 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))

    @property
    def n_samples(self) -> int:
        """Recorded points, initial state included."""
        return self.n_steps // self.record_stride + 1


@dataclass(frozen=True)
class TrajectoryResult:
    """Sampled time series of one trajectory (arrays share one time grid)."""

    times: np.ndarray
    mean_x: np.ndarray
    mean_p: np.ndarray
    var_x: np.ndarray
    var_p: np.ndarray
    cov: np.ndarray
    d_x: np.ndarray
    d_p: np.ndarray
    energy: np.ndarray
    purity: np.ndarray


@dataclass(frozen=True)
class EnsembleStats:
    """Per-time ensemble mean and standard error of the trajectory energy,
    with full seed provenance.

    ``sem_energy`` is the Bessel-corrected sample std over trajectories
    divided by sqrt(n_traj).  ``asym_energy``/``asym_sem`` summarize the
    time-average of each trajectory's energy over the final 20% of the run.
    ``trajectories`` optionally keeps the first k individual energy series.
    """

    times: np.ndarray
    mean_energy: np.ndarray
    sem_energy: np.ndarray
    n_traj: int
    master_seed: int
    asym_energy: float
    asym_sem: float
    trajectories: np.ndarray | None = None


def trajectory_stream(master_seed: int, trajectory: int) -> Generator:
    """Counter-based RNG stream of one trajectory.

    Philox keyed by (master_seed, trajectory): streams are independent
    across trajectories and any one of them can be re-created in isolation.
    Draw order within a stream: one standard normal per active channel
    (x before p) per step, in blocks.
    """
    key = np.array([np.uint64(master_seed & (2**64 - 1)), np.uint64(trajectory)])
    return Generator(Philox(key=key))


@njit(cache=True, nogil=True)
def _advance(xm, pm, vx, vp, cc, dx, dp, status, noise, sqdt, dt,
             omega, lamx, lamp, slx, slp, gx, gp, bx, bp, cx, cp,
             act_x, act_p, detn_x, detn_p, step0, stride,
             rec_e, rec_pu, rec_state):
    """Advance every live trajectory in the chunk through one noise block.

    All arithmetic is per-trajectory scalar work (no cross-trajectory
    reductions), so results do not depend on the chunk layout.  Recording
    happens at global steps that are multiples of ``stride``; slot 0 is the
    caller's initial sample.  ``status[i]`` stays 0 while trajectory i is
    healthy, else holds 1 + the global step where its variances collapsed.
    """
    n = xm.shape[0]
    nblk = noise.shape[1]
    for i in range(n):
        if status[i] != 0:
            continue
        x = xm[i]
        p = pm[i]
        vxi = vx[i]
        vpi = vp[i]
        ci = cc[i]
        dxi = dx[i]
        dpi = dp[i]
        for k in range(nblk):
            col = 0
            dwx = 0.0
            dwp = 0.0
            if act_x:
                dwx = noise[i, k, col] * sqdt
                col += 1
            if act_p:
                dwp = noise[i, k, col] * sqdt
            nx = x + omega * (p - bx * dxi - bp * dpi) * dt \
                + 2.0 * slx * vxi * dwx + slp * ci * dwp
            npm = p - omega * (x - cx * dxi - cp * dpi) * dt \
                + slx * ci * dwx + 2.0 * slp * vpi * dwp
            nvx = vxi + (omega * ci + lamp - 4.0 * lamx * vxi * vxi
                         - lamp * ci * ci) * dt
            nvp = vpi + (-omega * ci + lamx - 4.0 * lamp * vpi * vpi
                         - lamx * ci * ci) * dt
            ncc = ci + (2.0 * omega * (vpi - vxi)
                        - 4.0 * (lamx * vxi + lamp * vpi) * ci) * dt
            ndx = dxi
            ndp = dpi
            if act_x:
                ndx = dxi + gx * (x - dxi) * dt + detn_x * dwx
            if act_p:
                ndp = dpi + gp * (p - dpi) * dt + detn_p * dwp
            x, p, vxi, vpi, ci, dxi, dpi = nx, npm, nvx, nvp, ncc, ndx, ndp
            gstep = step0 + k + 1
            if not (vxi > 0.0 and vpi > 0.0) or not math.isfinite(x + p + ci + dxi + dpi):
                status[i] = gstep
                break
            if gstep % stride == 0:
                j = gstep // stride
                ex = x - cx * dxi - cp * dpi
                ep = p - bx * dxi - bp * dpi
                rec_e[i, j] = vxi + vpi + ex * ex + ep * ep
                rec_pu[i, j] = vxi * vpi - 0.25 * ci * ci
                if rec_state.shape[0] > 0:
                    rec_state[i, j, 0] = x
                    rec_state[i, j, 1] = p
                    rec_state[i, j, 2] = vxi
                    rec_state[i, j, 3] = vpi
                    rec_state[i, j, 4] = ci
                    rec_state[i, j, 5] = dxi
                    rec_state[i, j, 6] = dpi
        xm[i] = x
        pm[i] = p
        vx[i] = vxi
        vp[i] = vpi
        cc[i] = ci
        dx[i] = dxi
        dp[i] = dpi


def _kernel_args(cfg: ProtocolConfig, dt: float):
    detn_x = cfg.gamma_x / math.sqrt(4 * cfg.lambda_x) if cfg.channel_x_active else 0.0
    detn_p = cfg.gamma_p / math.sqrt(4 * cfg.lambda_p) if cfg.channel_p_active else 0.0
    return (
        math.sqrt(dt), dt, cfg.omega, cfg.lambda_x, cfg.lambda_p,
        math.sqrt(cfg.lambda_x), math.sqrt(cfg.lambda_p),
        cfg.gamma_x, cfg.gamma_p, cfg.bx, cfg.bp, cfg.cx, cfg.cp,
        cfg.channel_x_active, cfg.channel_p_active, detn_x, detn_p,
    )


def _run_chunk(tc: TrajectoryConfig, i0: int, i1: int, record_state: bool):
    """Integrate trajectories [i0, i1); returns per-trajectory records."""
    n = i1 - i0
    cfg = tc.cfg
    n_ch = int(cfg.channel_x_active) + int(cfg.channel_p_active)
    ns = tc.n_samples
    xm = np.full(n, tc.state0.mean_x)
    pm = np.full(n, tc.state0.mean_p)
    vx = np.full(n, tc.state0.var_x)
    vp = np.full(n, tc.state0.var_p)
    cc = np.full(n, tc.state0.cov)
    dx = np.full(n, tc.det0.d_x)
    dp = np.full(n, tc.det0.d_p)
    status = np.zeros(n, dtype=np.int64)
    rec_e = np.empty((n, ns))
    rec_pu = np.empty((n, ns))
    rec_e[:, 0] = energy_expectation(tc.state0, tc.det0, cfg)
    rec_pu[:, 0] = tc.state0.purity
    rec_state = np.empty((n, ns, 7) if record_state else (0, 0, 7))
    if record_state:
        rec_state[:, 0] = (tc.state0.mean_x, tc.state0.mean_p, tc.state0.var_x,
                           tc.state0.var_p, tc.state0.cov, tc.det0.d_x, tc.det0.d_p)
    args = _kernel_args(cfg, tc.dt)
    streams = [trajectory_stream(tc.seed, i) for i in range(i0, i1)]
    step0 = 0
    while step0 < tc.n_steps:
        nblk = min(_BLOCK, tc.n_steps - step0)
        noise = np.empty((n, nblk, n_ch))
        for j, gen in enumerate(streams):
            noise[j] = gen.standard_normal((nblk, n_ch))
        _advance(xm, pm, vx, vp, cc, dx, dp, status, noise, *args,
                 step0, tc.record_stride, rec_e, rec_pu, rec_state)
        step0 += nblk
    return status, rec_e, rec_pu, rec_state


def _stepped_state(x, p, vx, vp, c) -> GaussianState:
    """GaussianState without re-validation: a single Euler step from a pure
    state undershoots the purity floor by O(dt^2) (the exact flow preserves
    it), which is integrator error, not an unphysical input."""
    s = object.__new__(GaussianState)
    for name, val in (("mean_x", x), ("mean_p", p), ("var_x", vx),
                      ("var_p", vp), ("cov", c)):
        object.__setattr__(s, name, float(val))
    return s


def sde_step(state: GaussianState, det: DetectorState, cfg: ProtocolConfig,
             dt: float, dWx: float = 0.0, dWp: float = 0.0):
    """One Euler-Maruyama step; reference implementation of the update rule.

    ``dWx``/``dWp`` are Wiener increments (variance dt).  An inactive
    channel must receive a zero increment; its detector value stays 0.
    Returns the new (GaussianState, DetectorState); a variance leaving
    (0, inf) raises StateCollapseError (the step is too large).  The output
    is positivity-checked but exempt from the strict Heisenberg slack,
    which Euler steps can graze by O(dt^2) at the purity boundary.
    """
    if dt <= 0 or dt > STEP_GUARD / _max_rate(cfg) * (1 + 1e-12):
        raise ValueError(f"dt = {dt:g} violates the step guard")
    if not cfg.channel_x_active and dWx != 0.0:
        raise ValueError("inactive x channel cannot receive an increment")
    if not cfg.channel_p_active and dWp != 0.0:
        raise ValueError("inactive p channel cannot receive an increment")
    w, lamx, lamp = cfg.omega, cfg.lambda_x, cfg.lambda_p
    slx, slp = math.sqrt(lamx), math.sqrt(lamp)
    x, p = state.mean_x, state.mean_p
    vx, vp, c = state.var_x, state.var_p, state.cov
    nx = x + w * (p - cfg.bx * det.d_x - cfg.bp * det.d_p) * dt \
        + 2 * slx * vx * dWx + slp * c * dWp
    np_ = p - w * (x - cfg.cx * det.d_x - cfg.cp * det.d_p) * dt \
        + slx * c * dWx + 2 * slp * vp * dWp
    nvx = vx + (w * c + lamp - 4 * lamx * vx**2 - lamp * c**2) * dt
    nvp = vp + (-w * c + lamx - 4 * lamp * vp**2 - lamx * c**2) * dt
    nc = c + (2 * w * (vp - vx) - 4 * (lamx * vx + lamp * vp) * c) * dt
    ndx = det.d_x
    ndp = det.d_p
    if cfg.channel_x_active:
        ndx += cfg.gamma_x * (x - det.d_x) * dt \
            + cfg.gamma_x / math.sqrt(4 * lamx) * dWx
    if cfg.channel_p_active:
        ndp += cfg.gamma_p * (p - det.d_p) * dt \
            + cfg.gamma_p / math.sqrt(4 * lamp) * dWp
    if not (nvx > 0 and nvp > 0):
        raise StateCollapseError(
            f"variance collapsed (Vx = {nvx:g}, Vp = {nvp:g}); reduce dt"
        )
    return _stepped_state(nx, np_, nvx, nvp, nc), DetectorState(ndx, ndp)


def simulate_trajectory(tc: TrajectoryConfig, trajectory: int = 0) -> TrajectoryResult:
    """Integrate one trajectory and sample its full state, energy (in
    hbar*omega/2 units) and Gaussian purity Vx*Vp - C^2/4.

    ``trajectory`` selects the noise stream, so trajectory i of an ensemble
    run with the same TrajectoryConfig is replayed exactly.
    """
    status, rec_e, rec_pu, rec_state = _run_chunk(
        tc, trajectory, trajectory + 1, record_state=True
    )
    if status[0] != 0:
        raise StateCollapseError(
            f"trajectory {trajectory} collapsed at step {status[0]} "
            f"(master seed {tc.seed}); reduce dt",
            trajectory=trajectory, step=int(status[0]), master_seed=tc.seed,
        )
    times = np.arange(tc.n_samples) * (tc.dt * tc.record_stride)
    st = rec_state[0]
    return TrajectoryResult(
        times=times, mean_x=st[:, 0], mean_p=st[:, 1], var_x=st[:, 2],
        var_p=st[:, 3], cov=st[:, 4], d_x=st[:, 5], d_p=st[:, 6],
        energy=rec_e[0], purity=rec_pu[0],
    )


def run_ensemble(tc: TrajectoryConfig, n_traj: int, threads: int = 1,
                 keep_trajectories: int = 0) -> EnsembleStats:
    """Independent trajectories 0..n_traj-1, reduced in index order.

    The thread pool only partitions work: every trajectory's stream is
    keyed by its index, per-trajectory records land in preallocated slots,
    and the reduction runs over the assembled array, so the output is
    bit-identical across thread counts.  The asymptotic energy estimate
    averages each trajectory over the final 20% of the run and reports the
    ensemble mean with its standard error.
    """
    if n_traj < 2:
        raise ValueError("need n_traj >= 2 for a standard error")
    if threads < 1:
        raise ValueError("threads must be >= 1")
    energies = np.empty((n_traj, tc.n_samples))
    statuses = np.zeros(n_traj, dtype=np.int64)
    chunk = 64
    bounds = [(i, min(i + chunk, n_traj)) for i in range(0, n_traj, chunk)]

    def work(span):
        i0, i1 = span
        status, rec_e, _, _ = _run_chunk(tc, i0, i1, record_state=False)
        energies[i0:i1] = rec_e
        statuses[i0:i1] = status

    if threads == 1:
        for span in bounds:
            work(span)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, bounds))
    if np.any(statuses != 0):
        bad = int(np.nonzero(statuses)[0][0])
        raise StateCollapseError(
            f"trajectory {bad} collapsed at step {statuses[bad]} "
            f"(master seed {tc.seed}); reduce dt",
            trajectory=bad, step=int(statuses[bad]), master_seed=tc.seed,
        )
    times = np.arange(tc.n_samples) * (tc.dt * tc.record_stride)
    mean = energies.mean(axis=0)
    sem = energies.std(axis=0, ddof=1) / math.sqrt(n_traj)
    tail = times >= 0.8 * tc.t_final - 1e-12
    tail_means = energies[:, tail].mean(axis=1)
    return EnsembleStats(
        times=times,
        mean_energy=mean,
        sem_energy=sem,
        n_traj=n_traj,
        master_seed=tc.seed,
        asym_energy=float(tail_means.mean()),
        asym_sem=float(tail_means.std(ddof=1) / math.sqrt(n_traj)),
        trajectories=energies[:keep_trajectories].copy() if keep_trajectories else None,
    )


def gaussian_closure_check(state: GaussianState) -> dict:
    """Third moments reconstructed from the Gaussian closure identities.

    These are what closes the cumulant hierarchy at second order; the
    moment-system builders are cross-checked against them in the tests.
    """
    x, p = state.mean_x, state.mean_p
    vx, vp, c = state.var_x, state.var_p, state.cov
    x2, p2 = vx + x**2, vp + p**2
    return {
        "x^3": x**3 + 3 * x * vx,
        "p^3": p**3 + 3 * p * vp,
        "x p^2 + p^2 x": 2 * x * p2 + 2 * p * c,
        "x^2 p + p x^2": 2 * x2 * p + 2 * x * c,
    }
