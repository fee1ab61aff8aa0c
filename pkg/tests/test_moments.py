import math

import numpy as np
import pytest
from scipy.linalg import expm

from fbcool.analytic import asymptotic_energy, asymptotic_var_x, bath_energy_exact
from fbcool.core import ProtocolKind, make_protocol, with_bath
from fbcool.moments import (
    MomentSystem,
    SingularSystemError,
    StepSizeError,
    SystemKind,
    UnstableSystemError,
    build_system,
    eigenvalues,
    fixed_point,
    integrate,
    observables,
    relaxation_rate,
)

# ---------------------------------------------------------------------------
# Ito-generator cross-check machinery.
#
# Every moment component is a polynomial g(y) of the trajectory state
# y = (<x>, <p>, Vx, Vp, C, Dx, Dp).  For a point distribution the moment
# ODE must satisfy  (M nu(y) + s)_i = (L g_i)(y)  with L the Ito generator
# of the trajectory SDEs.  g is quadratic, so central differences are exact
# and any transcription slip in a builder shows up immediately.


def sde_drift(y, cfg):
    x, p, vx, vp, c, dx, dp = y
    w, lx, lp = cfg.omega, cfg.lambda_x, cfg.lambda_p
    out = np.array([
        w * (p - cfg.bx * dx - cfg.bp * dp),
        -w * (x - cfg.cx * dx - cfg.cp * dp),
        w * c + lp - 4 * lx * vx**2 - lp * c**2,
        -w * c + lx - 4 * lp * vp**2 - lx * c**2,
        2 * w * (vp - vx) - 4 * (lx * vx + lp * vp) * c,
        cfg.gamma_x * (x - dx) if cfg.channel_x_active else 0.0,
        cfg.gamma_p * (p - dp) if cfg.channel_p_active else 0.0,
    ])
    return out


def sde_diffusion(y, cfg):
    """7x2 noise matrix, columns = (dWx, dWp)."""
    x, p, vx, vp, c, dx, dp = y
    lx, lp = cfg.lambda_x, cfg.lambda_p
    B = np.zeros((7, 2))
    B[0] = (2 * math.sqrt(lx) * vx, math.sqrt(lp) * c)
    B[1] = (math.sqrt(lx) * c, 2 * math.sqrt(lp) * vp)
    if cfg.channel_x_active:
        B[5, 0] = cfg.gamma_x / math.sqrt(4 * lx)
    if cfg.channel_p_active:
        B[6, 1] = cfg.gamma_p / math.sqrt(4 * lp)
    return B


def ito_generator(g, y, cfg, h=1e-3):
    """(L g)(y); exact for quadratic g up to roundoff."""
    y = np.asarray(y, dtype=float)
    a = sde_drift(y, cfg)
    S = sde_diffusion(y, cfg) @ sde_diffusion(y, cfg).T
    out = 0.0
    for i in range(7):
        ei = np.zeros(7)
        ei[i] = h
        out += a[i] * (g(y + ei) - g(y - ei)) / (2 * h)
        out += 0.5 * S[i, i] * (g(y + ei) - 2 * g(y) + g(y - ei)) / h**2
        for j in range(i + 1, 7):
            if S[i, j] == 0.0:
                continue
            ej = np.zeros(7)
            ej[j] = h
            d2 = (g(y + ei + ej) - g(y + ei - ej) - g(y - ei + ej)
                  + g(y - ei - ej)) / (4 * h**2)
            out += S[i, j] * d2
    return out


def moment_functions(kind: SystemKind, cfg):
    """Point-distribution values of each labeled moment component."""
    w = cfg.omega

    def ux(y, b):
        return y[0] - b * y[5]

    def vp_(y, b):
        return y[1] - b * y[6]

    if kind is SystemKind.X:
        b = cfg.cx
        return [
            lambda y: (y[2] + ux(y, b) ** 2) / 2,
            lambda y: (y[3] + y[1] ** 2) / 2,
            lambda y: y[4] + 2 * ux(y, b) * y[1],
            lambda y: ux(y, b) * y[5],
            lambda y: y[1] * y[5],
            lambda y: y[5] ** 2,
        ]
    if kind is SystemKind.XP:
        b = cfg.cx
        return [
            lambda y: (y[2] + ux(y, b) ** 2 + y[3] + vp_(y, b) ** 2) / 2,
            lambda y: ux(y, b) * y[5] + vp_(y, b) * y[6],
            lambda y: vp_(y, b) * y[5] - ux(y, b) * y[6],
            lambda y: y[5] ** 2 + y[6] ** 2,
        ]
    if kind is SystemKind.C:
        return [
            lambda y: w / 2 * (y[2] + y[0] ** 2),
            lambda y: w / 2 * (y[3] + y[1] ** 2),
            lambda y: w / 2 * (y[4] + 2 * y[0] * y[1]),
            lambda y: y[5] * y[0],
            lambda y: y[5] * y[1],
            lambda y: y[5] ** 2,
        ]
    if kind is SystemKind.X_THERMAL_B1:
        V = lambda y: w / 2 * (y[2] + ux(y, 1.0) ** 2)
        K = lambda y: w / 2 * (y[3] + y[1] ** 2)
        G = lambda y: y[4] + 2 * ux(y, 1.0) * y[1]
        return [V, K, G, lambda y: V(y) + K(y)]
    V = lambda y: w / 2 * (y[2] + ux(y, 1.0) ** 2)
    K = lambda y: w / 2 * (y[3] + vp_(y, 1.0) ** 2)
    G = lambda y: y[4] + 2 * ux(y, 1.0) * vp_(y, 1.0)
    return [V, K, G, lambda y: V(y) + K(y)]


def random_state(rng, p_active):
    y = np.array([
        rng.normal(0, 2), rng.normal(0, 2),
        rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0), rng.uniform(-0.4, 0.4),
        rng.normal(0, 2), rng.normal(0, 2) if p_active else 0.0,
    ])
    return y


CROSS_CHECK_CASES = [
    (SystemKind.X, dict(kind="X", omega=1.3, lam=0.21, gamma=0.7, gain=0.6)),
    (SystemKind.X, dict(kind="X", omega=0.8, lam=0.05, gamma=2.2, gain=1.0)),
    (SystemKind.XP, dict(kind="XP", omega=1.1, lam=0.15, gamma=0.4, gain=0.8)),
    (SystemKind.XP, dict(kind="XP", omega=2.0, lam=0.3, gamma=1.2, gain=1.0)),
    (SystemKind.C, dict(kind="C", omega=1.0, lam=0.08, gamma=3.0, gain=0.25)),
    (SystemKind.X_THERMAL_B1, dict(kind="X", omega=1.4, lam=0.12, gamma=0.9, gain=1.0)),
    (SystemKind.XP_THERMAL_B1, dict(kind="XP", omega=0.9, lam=0.2, gamma=1.1, gain=1.0)),
]


@pytest.mark.parametrize("sys_kind,proto", CROSS_CHECK_CASES,
                         ids=[k.value for k, _ in CROSS_CHECK_CASES])
def test_builders_match_sde_generator(sys_kind, proto):
    # thermal kinds are cross-checked at Gamma = 0, where the trajectory
    # SDEs are the ground truth; their Gamma terms are covered by the
    # closed-form bath tests below
    cfg = make_protocol(proto["kind"], proto["omega"], proto["lam"],
                        proto["gamma"], proto["gain"])
    sys = build_system(cfg, sys_kind)
    gs = moment_functions(sys_kind, cfg)
    rng = np.random.default_rng(42)
    for _ in range(25):
        y = random_state(rng, cfg.channel_p_active)
        nu = np.array([g(y) for g in gs])
        rhs = sys.matrix @ nu + sys.source
        gen = np.array([ito_generator(g, y, cfg) for g in gs])
        scale = max(1.0, np.max(np.abs(rhs)))
        assert np.max(np.abs(rhs - gen)) < 1e-6 * scale


# ---------------------------------------------------------------------------
# builders: structural facts


def test_x_b1_energy_block_is_closed():
    cfg = make_protocol("X", 1.0, 0.1, 0.5, 1.0)
    M = build_system(cfg, "X").matrix
    assert np.all(M[:3, 3:] == 0.0)


def test_xp_source_vector():
    # backaction heating lambda + detector diffusion terms
    lam, g, b = 0.1, 0.4, 0.5
    cfg = make_protocol("XP", 1.0, lam, g, b)
    s = build_system(cfg, "XP").source
    assert np.allclose(
        s, [lam + b**2 * g**2 / (4 * lam), -b * g**2 / (2 * lam), 0.0,
            g**2 / (2 * lam)])


def test_c_source_without_bath():
    cfg = make_protocol("C", 1.0, 0.01, 10.0, 0.02)
    s = build_system(cfg, "C").source
    assert np.allclose(s, [0.0, 0.005, 0.0, 0.0, 0.0, 2500.0])
    assert s[5] == 10.0**2 / (4 * 0.01)


def test_kind_mismatch_errors():
    cfg_x = make_protocol("X", 1.0, 0.1, 0.5, 0.5)
    with pytest.raises(ValueError, match="both channels"):
        build_system(cfg_x, "XP")
    with pytest.raises(ValueError, match="cross-feedback"):
        build_system(cfg_x, "C")
    with pytest.raises(ValueError, match="b = 1"):
        build_system(cfg_x, "X_thermal_b1")
    with pytest.raises(ValueError, match="closed-system"):
        build_system(with_bath(cfg_x, 0.1, 0.0), "X")


# ---------------------------------------------------------------------------
# fixed points


def test_x_fixed_point_components():
    # omega=1, gamma=1, lambda=0.1, b=0.5; closed forms from the stationary
    # solve: nu3 = lambda/omega, nu4 = gamma lambda/(2 b omega^2)
    cfg = make_protocol("X", 1.0, 0.1, 1.0, 0.5)
    nu = fixed_point(build_system(cfg, "X"))
    assert abs(nu[2] - 0.1) < 1e-14
    assert abs(nu[3] - 0.1) < 1e-14
    assert abs(nu[4] - (-0.1)) < 1e-14  # -lambda/(2 b omega)


def test_xp_fixed_point_component():
    cfg = make_protocol("XP", 1.0, 0.1, 0.4, 0.5)
    nu = fixed_point(build_system(cfg, "XP"))
    assert abs(nu[2] - (-0.2)) < 1e-14  # -lambda/(b omega)


def test_c_fixed_point_components():
    cfg = make_protocol("C", 1.0, 0.01, 10.0, 0.02)
    nu = fixed_point(build_system(cfg, "C"))
    assert abs(nu[2] - 0.005) < 1e-12  # lambda/2
    assert abs(nu[3] - 0.25) < 1e-12   # lambda/(2 mu omega)


@pytest.mark.parametrize("kind,gain", [("X", 1.0), ("XP", 1.0)])
def test_b1_is_singular(kind, gain):
    cfg = make_protocol(kind, 1.0, 0.1, 0.5, gain)
    with pytest.raises(SingularSystemError) as ei:
        fixed_point(build_system(cfg, kind))
    assert ei.value.null_direction is not None
    # while the reduced energy block converges
    nu = fixed_point(build_system(cfg, kind, reduced=True))
    assert np.all(np.isfinite(nu))


def test_fixed_point_residual_contract():
    cfg = make_protocol("C", 1.0, 0.001, 10.0, 0.002)  # ill-conditioned corner
    sys = build_system(cfg, "C")
    nu = fixed_point(sys)
    scale = max(np.max(np.abs(sys.source)),
                np.linalg.norm(sys.matrix, np.inf) * np.max(np.abs(nu)))
    assert np.max(np.abs(sys.matrix @ nu + sys.source)) < 1e-10 * scale


# ---------------------------------------------------------------------------
# eigenvalues


def test_rotation_matrix():
    spec = eigenvalues(np.array([[0.0, 1.0], [-1.0, 0.0]]))
    assert np.allclose(spec.eigenvalues, [-1j, 1j])
    assert not any(spec.flagged)


def test_xp_b1_spectrum():
    g, w = 0.3, 1.0
    cfg = make_protocol("XP", w, 0.1, g, 1.0)
    spec = eigenvalues(build_system(cfg, "XP").matrix)
    want = sorted([0.0, -2 * g, complex(-g, w), complex(-g, -w)],
                  key=lambda z: (z.real if isinstance(z, complex) else z,
                                 z.imag if isinstance(z, complex) else 0.0))
    assert np.allclose(spec.eigenvalues, want, atol=1e-9)


def x_b1_expansion(w, g, eps):
    """First order in eps = 1-b around the b = 1 spectrum."""
    r = complex(g**2 - 4 * w**2) ** 0.5
    out = [complex(-2 * g * eps), complex(-(1 - eps) * g)]
    for s in (+1, -1):
        out.append(-g + s * r - 4 * g * w**2 * eps / (g**2 - 4 * w**2 - s * g * r))
    r2 = complex(g**2 / 4 - w**2) ** 0.5
    for s in (+1, -1):
        out.append(-g / 2 + s * r2 + 2 * g * w**2 * eps / (g**2 - 4 * w**2 + s * g * r))
    return out


def x_b0_expansion(w, g, b):
    return [
        -2 * g + 2 * g * w**2 * b / (g**2 + w**2),
        -g * w**2 * b / (g**2 + w**2),
        2j * w - 1j * g * w * b / (g + 1j * w),
        -2j * w + 1j * g * w * b / (g - 1j * w),
        -g + 1j * w - 1j * g * w * b / (2 * (g - 1j * w)),
        -g - 1j * w + 1j * g * w * b / (2 * (g + 1j * w)),
    ]


def match_error(approx, exact):
    """Max nearest-neighbor distance, greedy (robust to ordering ties)."""
    pool = list(exact)
    worst = 0.0
    for a in approx:
        d, j = min((abs(a - z), j) for j, z in enumerate(pool))
        worst = max(worst, d)
        pool.pop(j)
    return worst


def test_x_spectrum_near_b1_matches_expansion():
    w, g = 1.0, 0.5
    cfg = make_protocol("X", w, 0.1, g, 0.999)
    spec = eigenvalues(build_system(cfg, "X").matrix)
    assert match_error(x_b1_expansion(w, g, 1e-3), spec.eigenvalues) < 1e-4


def test_eigenvalue_residuals_verified():
    cfg = make_protocol("C", 1.0, 0.05, 2.0, 0.3)
    spec = eigenvalues(build_system(cfg, "C").matrix)
    assert all(r < 1e-12 for r in spec.residuals)
    assert not any(spec.flagged)


def test_dimension_cap():
    with pytest.raises(ValueError, match="dim"):
        eigenvalues(np.eye(9))


# ---------------------------------------------------------------------------
# relaxation rates


def test_xp_b1_rate_is_2gamma():
    g = 0.3
    cfg = make_protocol("XP", 1.0, 0.1, g, 1.0)
    rep = relaxation_rate(build_system(cfg, "XP"))
    assert abs(rep.rate - 2 * g) < 1e-9 * 2 * g
    assert len(rep.marginal_modes) == 1          # detector diffusion zero mode
    assert len(rep.invisible_modes) == 2         # -gamma +/- i omega pair


def test_x_b1_rate_is_gamma():
    g = 0.4
    cfg = make_protocol("X", 1.0, 0.1, g, 1.0)
    # on the closed energy block and on the full (block-triangular) system
    assert abs(relaxation_rate(build_system(cfg, "X", reduced=True)).rate - g) < 1e-9
    assert abs(relaxation_rate(build_system(cfg, "X")).rate - g) < 1e-9


def test_x_weak_coupling_rate():
    cfg = make_protocol("X", 10.0, 0.1, 0.1, 0.3)
    rep = relaxation_rate(build_system(cfg, "X"))
    assert abs(rep.rate - 0.03) < 0.1 * 0.03


def test_unstable_raises():
    cfg = make_protocol("XP", 1.0, 0.1, 0.5, 1.3)
    with pytest.raises(UnstableSystemError):
        relaxation_rate(build_system(cfg, "XP"))


def test_xp_stability_region():
    # all modes decay for 0 < b <= 1; something grows for b > 1
    for b in (0.05, 0.3, 0.7, 1.0):
        cfg = make_protocol("XP", 1.0, 0.1, 0.7, b)
        eigs = np.linalg.eigvals(build_system(cfg, "XP").matrix)
        assert np.all(eigs.real <= 1e-12)
    for b in (1.05, 1.5, 2.0):
        cfg = make_protocol("XP", 1.0, 0.1, 0.7, b)
        eigs = np.linalg.eigvals(build_system(cfg, "XP").matrix)
        assert np.any(eigs.real > 1e-12)


def c_small_mu_expansion(w, g, mu):
    i = 1j
    return [
        -g**2 * w * mu / (g**2 + w**2),
        -g - i * w + g * w * mu / (2 * (g + i * w)),
        -g + i * w + g * w * mu / (2 * (g - i * w)),
        -2 * g + 2 * g**2 * w * mu / (g**2 + w**2),
        -2 * i * w - g * w * mu / (g - i * w),
        2 * i * w - g * w * mu / (g + i * w),
    ]


def test_c_spectrum_small_mu():
    w, g = 1.0, 3.0
    errs = {}
    for mu in (1e-3, 1e-4):
        cfg = make_protocol("C", w, 0.01, g, mu)
        spec = eigenvalues(build_system(cfg, "C").matrix)
        errs[mu] = match_error(c_small_mu_expansion(w, g, mu), spec.eigenvalues)
    assert errs[1e-3] < 1e-5                       # O(mu^2)
    assert 30 < errs[1e-3] / errs[1e-4] < 300      # quadratic scaling


# ---------------------------------------------------------------------------
# integration


def test_zero_system_stays_zero():
    sys = MomentSystem(SystemKind.X, np.zeros((2, 2)), np.zeros(2),
                       ("a", "b"), energy_map=np.array([1.0, 0.0]))
    _, out = integrate(sys, np.zeros(2), 1.0, 0.01)
    assert np.all(out == 0.0)


def test_integrate_reaches_fixed_point():
    cfg = make_protocol("XP", 1.0, 0.1, 0.4, 0.6)
    sys = build_system(cfg, "XP")
    nu_inf = fixed_point(sys)
    chi = relaxation_rate(sys).rate
    _, out = integrate(sys, np.zeros(4), 30.0 / chi, 0.01)
    assert np.linalg.norm(out[-1] - nu_inf) < 1e-6 * np.linalg.norm(nu_inf)


def test_integrate_matches_matrix_exponential():
    cfg = make_protocol("X", 1.0, 0.1, 0.8, 0.5)
    sys = build_system(cfg, "X")
    nu0 = np.array([0.25, 0.25, 0.0, 0.0, 0.0, 0.0])
    t = 5.0
    _, out = integrate(sys, nu0, t, 1e-3)
    nu_inf = fixed_point(sys)
    exact = expm(sys.matrix * t) @ (nu0 - nu_inf) + nu_inf
    assert np.max(np.abs(out[-1] - exact)) < 1e-8


def test_xp_b1_energy_decays_exponentially():
    g = 0.25
    cfg = make_protocol("XP", 1.0, 0.1, g, 1.0)
    sys = build_system(cfg, "XP", reduced=True)
    times, out = integrate(sys, np.array([3.0]), 20.0, 1e-3)
    e = 2 * out[:, 0]
    e_inf = 2 * fixed_point(sys)[0]
    mask = (e - e_inf) > 1e-10
    coeffs = np.polyfit(times[mask], np.log(e[mask] - e_inf), 1)
    resid = np.log(e[mask] - e_inf) - np.polyval(coeffs, times[mask])
    assert abs(-coeffs[0] - 2 * g) < 1e-6
    assert np.max(np.abs(resid)) < 1e-6


def test_step_guard():
    cfg = make_protocol("X", 1.0, 0.1, 0.8, 0.5)
    sys = build_system(cfg, "X")
    with pytest.raises(StepSizeError, match="dt"):
        integrate(sys, np.zeros(6), 1.0, 1.0)


# ---------------------------------------------------------------------------
# observables


def test_x_b1_energy_example():
    cfg = make_protocol("X", 1.0, 0.1, 0.2, 1.0)
    nu = fixed_point(build_system(cfg, "X", reduced=True))
    obs = observables("X", cfg, nu)
    assert abs(obs["energy"] - 1.01) < 1e-12
    assert "var_x" not in obs


def test_xp_ground_state_energy():
    cfg = make_protocol("XP", 1.0, 0.1, 0.2, 1.0)
    nu = fixed_point(build_system(cfg, "XP", reduced=True))
    assert abs(observables("XP", cfg, nu)["energy"] - 1.0) < 1e-14


def test_c_energy_example():
    cfg = make_protocol("C", 1.0, 0.01, 10.0, 0.02)
    nu = fixed_point(build_system(cfg, "C"))
    obs = observables("C", cfg, nu)
    assert abs(obs["energy"] - 1.0555) < 1e-12
    assert abs(obs["var_x"] - 0.5025) < 1e-12


def test_observables_dimension_mismatch():
    cfg = make_protocol("X", 1.0, 0.1, 0.2, 0.5)
    with pytest.raises(ValueError, match="dim"):
        observables("X", cfg, np.zeros(4))


# ---------------------------------------------------------------------------
# consistency with the closed forms (small grid; the acceptance suite runs
# the full 5x5x5 grid per protocol)


@pytest.mark.parametrize("kind", ["X", "XP", "C"])
def test_fixed_points_match_closed_forms(kind):
    gains = (0.1, 0.5, 0.9) if kind != "C" else (0.01, 0.1, 0.3)
    for g_ratio in (0.05, 0.5, 5.0):
        for lam in (0.01, 0.3):
            for gain in gains:
                cfg = make_protocol(kind, 1.0, lam, g_ratio, gain)
                sys = build_system(cfg, kind)
                if np.any(np.linalg.eigvals(sys.matrix).real > -1e-12):
                    continue
                obs = observables(kind, cfg, fixed_point(sys))
                e = asymptotic_energy(kind, 1.0, g_ratio, lam, gain)
                v = asymptotic_var_x(kind, 1.0, g_ratio, lam, gain)
                assert abs(obs["energy"] - e) < 1e-9 * abs(e)
                assert abs(obs["var_x"] - v) < 1e-9 * abs(v)


# ---------------------------------------------------------------------------
# thermal systems vs exact closed forms


@pytest.mark.parametrize("kind,proto", [
    ("X_thermal_b1", "X"), ("XP_thermal_b1", "XP")])
def test_thermal_fixed_points(kind, proto):
    for G, nbar in ((0.05, 0.0), (0.3, 1.5), (2.0, 4.0)):
        cfg = make_protocol(proto, 1.0, 0.1, 0.4, 1.0, Gamma=G, nbar=nbar)
        sys = build_system(cfg, kind)
        obs = observables(kind, cfg, fixed_point(sys))
        want = bath_energy_exact(proto, cfg)
        assert abs(obs["energy"] - want) < 1e-9 * want


def test_c_bath_fixed_point():
    for G, nbar in ((0.02, 0.5), (0.4, 2.0)):
        cfg = make_protocol("C", 1.0, 0.05, 4.0, 0.1, Gamma=G, nbar=nbar)
        sys = build_system(cfg, "C")
        obs = observables("C", cfg, fixed_point(sys))
        want = bath_energy_exact("C", cfg)
        assert abs(obs["energy"] - want) < 1e-9 * want


def test_c_pure_bath_limit():
    # mu -> tiny, lambda -> tiny: the oscillator thermalizes to U_th
    cfg = make_protocol("C", 1.0, 1e-9, 4.0, 1e-9, Gamma=0.5, nbar=2.0)
    obs = observables("C", cfg, fixed_point(build_system(cfg, "C")))
    assert abs(obs["energy"] - 5.0) < 1e-5  # U_th = 2(nbar + 1/2)
