"""Problem definitions and the built-in test equations.

Every drift/diffusion map takes ``(t, x)`` where ``x`` has shape
``(..., d)``; leading axes are treated as independent trajectories so whole
ensembles can be advanced at once.  ``t`` is either a scalar or, for
ensembles with per-trajectory clocks, an array of shape ``(..., 1)``.  Diffusion maps
return the diagonal of g (shape ``(..., d)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable

import numpy as np

from .errors import InputError

NOISE_KINDS = ("additive", "diagonal", "scalar", "affine")


@dataclass
class SDEProblem:
    """``M dX = f(t, X) dt + M g(t, X) dW`` on ``tspan`` from ``x0``.

    ``noise_kind`` selects the method family: ``additive`` (g independent
    of X), ``diagonal`` (one independent channel per component),
    ``scalar`` (a single channel shared by all components) or ``affine``
    (``g = sigma_M * X + sigma_A``, solvable with additive methods through
    the Lamperti change of variables).
    """

    f: Callable
    g: Callable
    x0: np.ndarray
    tspan: tuple
    noise_kind: str = "diagonal"
    name: str = "custom"
    jac: Callable | None = None
    mass_matrix: np.ndarray | None = None
    imex_split: tuple | None = None
    imex_jac: Callable | None = None
    sigma_M: np.ndarray | None = None
    sigma_A: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        t0, T = self.tspan
        self.tspan = (float(t0), float(T))
        if not self.tspan[1] > self.tspan[0]:
            raise InputError("tspan must be increasing")
        if self.noise_kind not in NOISE_KINDS:
            raise InputError(f"noise_kind must be one of {NOISE_KINDS}")
        d = self.x0.size
        if self.noise_kind == "affine":
            if self.sigma_M is None or self.sigma_A is None:
                raise InputError("affine noise needs sigma_M and sigma_A")
            self.sigma_M = np.broadcast_to(np.asarray(self.sigma_M, float), (d,)).copy()
            self.sigma_A = np.broadcast_to(np.asarray(self.sigma_A, float), (d,)).copy()
            if np.any(self.sigma_M < 0) or np.any(self.sigma_A < 0):
                raise InputError("affine noise coefficients must be non-negative")
        if self.mass_matrix is not None:
            M = np.asarray(self.mass_matrix, dtype=float)
            if M.shape != (d, d):
                raise InputError(f"mass matrix must be {d}x{d}")
            self.mass_matrix = M
        if self.imex_split is not None and len(self.imex_split) != 2:
            raise InputError("imex_split must be (f_implicit, f_explicit)")

    @property
    def d(self) -> int:
        return self.x0.size

    @property
    def m(self) -> int:
        """Number of independent Wiener channels."""
        return 1 if self.noise_kind == "scalar" else self.d

    @property
    def additive(self) -> bool:
        return self.noise_kind == "additive"

    @property
    def singular_mass(self) -> bool:
        if self.mass_matrix is None:
            return False
        return np.linalg.matrix_rank(self.mass_matrix) < self.d

    def with_params(self, **kw) -> "SDEProblem":
        return replace(self, **kw)


@dataclass
class AnalyticProblem:
    """A problem whose strong solution is a function of ``(t, W_t, x0)``."""

    problem: SDEProblem
    exact: Callable

    def __getattr__(self, item):
        return getattr(self.problem, item)


def affine_problem(f, sigma_M, sigma_A, x0, tspan, name="affine", jac=None, **kw) -> SDEProblem:
    """Build an affine-noise problem; g is filled in from the coefficients."""
    sM = np.atleast_1d(np.asarray(sigma_M, dtype=float))
    sA = np.atleast_1d(np.asarray(sigma_A, dtype=float))

    def g(t, x):
        return sM * x + sA

    return SDEProblem(f=f, g=g, x0=x0, tspan=tspan, noise_kind="affine", name=name,
                      jac=jac, sigma_M=sM, sigma_A=sA, **kw)


# ---------------------------------------------------------------------------
# linear test equations

def additive_test(alpha=0.1, beta=0.05, x0=0.5, T=1.0) -> AnalyticProblem:
    def f(t, x):
        return beta / np.sqrt(1.0 + t) - x / (2.0 * (1.0 + t))

    def g(t, x):
        return np.full_like(x, alpha * beta / np.sqrt(1.0 + t))

    def jac(t, x):
        return (-1.0 / (2.0 * (1.0 + t)) * np.ones_like(x))[..., None]

    def exact(t, W, x0=x0):
        s = np.sqrt(1.0 + t)
        return x0 / s + beta / s * (t + alpha * W)

    p = SDEProblem(f, g, [x0], (0.0, T), noise_kind="additive", name="additive_test",
                   jac=jac, params=dict(alpha=alpha, beta=beta))
    return AnalyticProblem(p, exact)


def split_additive_test(alpha=0.1, beta=0.05, x0=0.5, T=1.0) -> AnalyticProblem:
    base = additive_test(alpha, beta, x0, T)

    def f1(t, x):
        return np.broadcast_to(beta / np.sqrt(1.0 + t), np.shape(x)).copy()

    def f2(t, x):
        return -x / (2.0 * (1.0 + t))

    def jac1(t, x):
        return np.zeros(x.shape + (1,))

    p = replace(base.problem, name="split_additive_test", imex_split=(f1, f2), imex_jac=jac1)
    return AnalyticProblem(p, base.exact)


def diagonal_test(alpha=0.1, beta=0.05, x0=0.5, T=1.0) -> AnalyticProblem:
    """``dX = alpha X dt + beta X dW`` with its geometric-Brownian solution."""

    def f(t, x):
        return alpha * x

    def g(t, x):
        return beta * x

    def jac(t, x):
        return np.full(x.shape + (1,), alpha)

    def exact(t, W, x0=x0):
        return x0 * np.exp((alpha - 0.5 * beta * beta) * t + beta * W)

    p = SDEProblem(f, g, [x0], (0.0, T), noise_kind="diagonal", name="diagonal_test",
                   jac=jac, params=dict(alpha=alpha, beta=beta))
    return AnalyticProblem(p, exact)


def gbm_affine(mu=0.5, sigma=0.5, x0=1.0, T=1.0) -> AnalyticProblem:
    """Geometric Brownian motion posed as affine noise (sigma_A = 0)."""

    def f(t, x):
        return mu * x

    def exact(t, W, x0=x0):
        return x0 * np.exp((mu - 0.5 * sigma * sigma) * t + sigma * W)

    p = affine_problem(f, sigma, 0.0, [x0], (0.0, T), name="gbm_affine",
                       jac=lambda t, x: np.full(x.shape + (1,), mu))
    p.params = dict(mu=mu, sigma=sigma)
    return AnalyticProblem(p, exact)


def pathwise_stiff(g=10.0, x0=2.0, T=5.0, multiplicative=False) -> SDEProblem:
    """Bistable cubic drift whose noise-driven transitions are stiff."""

    def f(t, x):
        return -1000.0 * x * (1.0 - x) * (2.0 - x)

    def jac(t, x):
        return (-1000.0 * (2.0 - 6.0 * x + 3.0 * x * x))[..., None]

    if multiplicative:
        def gfun(t, x):
            return g * x
        kind = "diagonal"
    else:
        def gfun(t, x):
            return np.full_like(x, g)
        kind = "additive"
    return SDEProblem(f, gfun, [x0], (0.0, T), noise_kind=kind, name="pathwise_stiff",
                      jac=jac, params=dict(g=g))


# ---------------------------------------------------------------------------
# two-species models

def _lotka_drift(a, b, c, d):
    def f(t, u):
        x, y = u[..., 0], u[..., 1]
        return np.stack([a * x - b * x * y, -c * y + d * x * y], axis=-1)

    def jac(t, u):
        x, y = u[..., 0], u[..., 1]
        J = np.empty(u.shape + (2,))
        J[..., 0, 0] = a - b * y
        J[..., 0, 1] = -b * x
        J[..., 1, 0] = d * y
        J[..., 1, 1] = -c + d * x
        return J

    return f, jac


def lotka_additive(a=1.5, b=1.0, c=3.0, d=1.0, sigma_A=0.01, x0=(1.0, 1.0), T=10.0) -> SDEProblem:
    f, jac = _lotka_drift(a, b, c, d)

    def g(t, u):
        return np.full_like(u, sigma_A)

    return SDEProblem(f, g, list(x0), (0.0, T), noise_kind="additive", name="lotka_additive",
                      jac=jac, params=dict(a=a, b=b, c=c, d=d, sigma_A=sigma_A))


def lotka_multiplicative(a=1.5, b=1.0, c=3.0, d=1.0, sigma=0.01, x0=(1.0, 1.0), T=10.0,
                         literal=False) -> SDEProblem:
    """Lotka-Volterra with noise proportional to the state.

    ``literal=True`` returns the constant-noise form exactly as the source
    equations print it, which coincides with :func:`lotka_additive`.
    """
    if literal:
        p = lotka_additive(a, b, c, d, sigma, x0, T)
        p.name = "lotka_multiplicative_literal"
        return p
    f, jac = _lotka_drift(a, b, c, d)

    def g(t, u):
        return sigma * u

    return SDEProblem(f, g, list(x0), (0.0, T), noise_kind="diagonal",
                      name="lotka_multiplicative", jac=jac,
                      params=dict(a=a, b=b, c=c, d=d, sigma=sigma))


def lotka_affine(a=1.5, b=1.0, c=3.0, d=1.0, sigma_M=0.1, sigma_A=0.01,
                 x0=(1.0, 1.0), T=10.0) -> SDEProblem:
    """Affine noise on the prey, additive noise on the predator."""
    f, jac = _lotka_drift(a, b, c, d)
    return affine_problem(f, [sigma_M, 0.0], [sigma_A, sigma_A], list(x0), (0.0, T),
                          name="lotka_affine", jac=jac)


def van_der_pol_additive(mu=1e5, rho=3.0, x0=(2.0, 0.0), T=6.3) -> SDEProblem:
    """Driven Van der Pol oscillator, state ``(x, y)`` with ``x' = y``."""

    def f(t, u):
        x, y = u[..., 0], u[..., 1]
        return np.stack([y, mu * ((1.0 - x * x) * y - x)], axis=-1)

    def g(t, u):
        return np.full_like(u, rho)

    def jac(t, u):
        x, y = u[..., 0], u[..., 1]
        J = np.zeros(u.shape + (2,))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -mu * (2.0 * x * y + 1.0)
        J[..., 1, 1] = mu * (1.0 - x * x)
        return J

    return SDEProblem(f, g, list(x0), (0.0, T), noise_kind="additive", name="van_der_pol_additive",
                      jac=jac, params=dict(mu=mu, rho=rho))


# ---------------------------------------------------------------------------
# EMT reaction network

EMT_SPECIES = (
    "snail1", "SNAIL", "miR34", "SR", "zeb", "ZEB", "miR200",
    "ZR1", "ZR2", "ZR3", "ZR4", "ZR5", "tgf", "TGF", "TR", "Ecad", "Vim", "OVOL2", "OVOL2p",
)

EMT_PARAMS = dict(
    J1_200=3.0, J2_200=0.2, J1_34=0.15, J2_34=0.35, J_O=0.9, J0_snail=0.6, J1_snail=0.5,
    J2_snail=1.8, J1_E=0.1, J2_E=0.3, J1_V=0.4, J2_V=0.4, J3_V=2.0, J1_zeb=3.5, J2_zeb=0.9,
    K1=1.0, K2=1.0, K3=1.0, K4=1.0, K5=1.0, K_TR=20.0, K_SR=100.0, Tk=1000.0,
    k0_snail=0.0005, k0_zeb=0.003, k0_O=0.35, k0_200=0.0002, k0_34=0.001,
    n1_200=3.0, n2_200=2.0, n1_34=2.0, n2_34=2.0, n_O=2.0, n0_snail=2.0, n1_snail=2.0,
    n1_E=2.0, n2_E=2.0, n1_V=2.0, n2_V=2.0, n1_zeb=2.0, n2_zeb=6.0,
    lambda1=0.5, lambda2=0.5, lambda3=0.5, lambda4=0.5, lambda5=0.5,
    lambda_SR=0.5, lambda_TR=0.5,
    kd_snail=0.09, kd_tgf=0.1, kd_zeb=0.1, kd_TGF=0.9, kd_ZEB=1.66, k0_TGF=1.1,
    k0_E=5.0, k0_V=5.0, k_E1=15.0, k_E2=5.0, k_V1=2.0, k_V2=5.0,
    k_O=1.2, k_200=0.02, k_34=0.01, k_tgf=0.05, k_zeb=0.06, k_TGF=1.5,
    k_SNAIL=16.0, k_ZEB=16.0,
    kd_ZR1=0.5, kd_ZR2=0.5, kd_ZR3=0.5, kd_ZR4=0.5, kd_ZR5=0.5,
    kd_O=1.0, kd_200=0.035, kd_34=0.035, kd_SR=0.9, kd_E=0.05, kd_V=0.05,
    k_Op=10.0, kd_Op=10.0,
    # not listed in the parameter table; reconstructed defaults
    k_snail=0.05, kd_SNAIL=1.6, kd_TR=0.9,
    TGF0_level=0.5, TGF0_switch=100.0,
)

C5 = np.array([5.0, 10.0, 10.0, 5.0, 1.0])
C5_WEIGHTED = np.arange(1, 6) * C5


class EMTDrift:
    """Drift of the 19-species EMT network; ``clamped`` counts Hill guards."""

    def __init__(self, params):
        self.p = dict(params)
        self.clamped = 0

    def tgf0(self, t):
        """External TGF input; ``t`` may be a scalar or a ``(..., 1)`` array."""
        p = self.p
        v = np.where(np.asarray(t) > p["TGF0_switch"], p["TGF0_level"], 0.0)
        return v[..., 0] if v.ndim else float(v)

    def _pos(self, v):
        if np.any(v < 0):
            self.clamped += 1
            return np.maximum(v, 0.0)
        return v

    def __call__(self, t, u):
        p = self.p
        pos = self._pos
        (snail1, SNAIL, miR34, SR, zeb, ZEB, miR200, ZR1, ZR2, ZR3, ZR4, ZR5,
         tgf, TGF, TR, Ecad, Vim, OVOL2, OVOL2p) = np.moveaxis(u, -1, 0)
        ZR = np.stack([ZR1, ZR2, ZR3, ZR4, ZR5], axis=-1)
        sum_c = ZR @ C5
        sum_ic = ZR @ C5_WEIGHTED
        kd_ZR = np.array([p[f"kd_ZR{i}"] for i in range(1, 6)])
        lam = np.array([p[f"lambda{i}"] for i in range(1, 6)])
        free200 = miR200 - sum_ic - TR
        free_zeb = zeb - sum_c

        sn, ze, ov = pos(SNAIL), pos(ZEB), pos(OVOL2)
        tgf_drive = (pos(TGF + self.tgf0(t)) / p["J0_snail"]) ** p["n0_snail"]
        A = tgf_drive + (ov / p["J1_snail"]) ** p["n1_snail"]

        du = np.empty_like(u)
        du[..., 0] = (p["k0_snail"] + p["k_snail"] * tgf_drive / ((1 + A) * (1 + sn / p["J2_snail"]))
                      - p["kd_snail"] * (snail1 - SR) - p["kd_SR"] * SR)
        du[..., 1] = p["k_SNAIL"] * (snail1 - SR) - p["kd_SNAIL"] * SNAIL
        du[..., 2] = (p["k0_34"] + p["k_34"] / (1 + (sn / p["J1_34"]) ** p["n1_34"]
                                               + (ze / p["J2_34"]) ** p["n2_34"])
                      - p["kd_34"] * (miR34 - SR) - (1 - p["lambda_SR"]) * p["kd_SR"] * SR)
        du[..., 3] = p["Tk"] * (p["K_SR"] * (snail1 - SR) * (miR34 - SR) - SR)
        hz = (sn / p["J1_zeb"]) ** p["n1_zeb"]
        du[..., 4] = (p["k0_zeb"] + p["k_zeb"] * hz / (1 + hz + (ov / p["J2_zeb"]) ** p["n2_zeb"])
                      - p["kd_zeb"] * free_zeb - (ZR * (kd_ZR * C5)).sum(-1))
        du[..., 5] = p["k_ZEB"] * free_zeb - p["kd_ZEB"] * ZEB
        du[..., 6] = (p["k0_200"] + p["k_200"] / (1 + (sn / p["J1_200"]) ** p["n1_200"]
                                                 + (ze / p["J2_200"]) ** p["n2_200"])
                      - p["kd_200"] * free200
                      - (ZR * ((1 - lam) * kd_ZR * C5_WEIGHTED)).sum(-1)
                      - (1 - p["lambda_TR"]) * p["kd_TR"] * TR)
        du[..., 7] = p["Tk"] * (p["K1"] * free200 * free_zeb - ZR1)
        for i, k in enumerate(("K2", "K3", "K4", "K5")):
            du[..., 8 + i] = p["Tk"] * (p[k] * free200 * ZR1 - ZR[..., i + 1])
        du[..., 12] = p["k_tgf"] - p["kd_tgf"] * (tgf - TR) - p["kd_TR"] * TR
        du[..., 13] = p["k0_TGF"] + p["k_TGF"] * (tgf - TR) - p["kd_TGF"] * TGF
        du[..., 14] = p["Tk"] * (p["K_TR"] * free200 * (tgf - TR) - TR)
        du[..., 15] = (p["k0_E"] + p["k_E1"] / (1 + (sn / p["J1_E"]) ** p["n1_E"])
                       + p["k_E2"] / (1 + (ze / p["J2_E"]) ** p["n2_E"]) - p["kd_E"] * Ecad)
        hv1 = (sn / p["J1_V"]) ** p["n1_V"]
        hv2 = (ze / p["J2_V"]) ** p["n2_V"]
        B = p["k_V1"] * hv1 / (1 + hv1) + p["k_V2"] * hv2 / (1 + hv2)
        du[..., 16] = p["k0_V"] + B / (1 + ov / p["J3_V"]) - p["kd_V"] * Vim
        du[..., 17] = p["k0_O"] + p["k_O"] / (1 + (ze / p["J_O"]) ** p["n_O"]) - p["kd_O"] * OVOL2
        du[..., 18] = p["k_Op"] * OVOL2 - p["kd_Op"] * OVOL2p
        return du


@lru_cache(maxsize=8)
def _emt_equilibrated_state(items):
    from scipy.integrate import solve_ivp

    drift = EMTDrift(dict(items))
    sol = solve_ivp(lambda t, u: drift(0.0, u), (0.0, 50.0), np.zeros(len(EMT_SPECIES)),
                    method="LSODA", rtol=1e-8, atol=1e-12)
    return tuple(np.maximum(sol.y[:, -1], 0.0))


def emt_model(noise_amplitude=0.05, T=1.0, x0=None, **overrides) -> SDEProblem:
    """EMT network with diagonal multiplicative noise ``g_i = sigma x_i``.

    Without ``x0`` the state starts from the deterministic pre-equilibration
    of the zero state over ``t in [0, 50]`` (TGF0 switched off).
    """
    params = dict(EMT_PARAMS)
    unknown = set(overrides) - set(params)
    if unknown:
        raise InputError(f"unknown EMT parameters: {sorted(unknown)}")
    params.update(overrides)
    drift = EMTDrift(params)
    if x0 is None:
        x0 = np.array(_emt_equilibrated_state(tuple(sorted(params.items()))))

    def g(t, u):
        return noise_amplitude * u

    return SDEProblem(drift, g, x0, (0.0, T), noise_kind="diagonal", name="emt_model",
                      params=dict(params, noise_amplitude=noise_amplitude))


# ---------------------------------------------------------------------------
# retinoic acid reaction-diffusion system

RA_PARAMS = dict(
    sigma_RAout=0.1, sigma_RAin=0.1, sigma_RARAR=0.1,
    b=0.17, alpha=10000.0, beta0=1.0, c=0.1, nu=0.85, omega=100.0, gamma=3.0,
    delta=0.0013, eta=0.0001, r=0.0001, lam=0.85, u=0.01, d=0.1, e=1.0, a=1.0,
    zeta=0.02, D=250.46, kA=0.002, dx=5.0, x_edge=40.0,
)


def neumann_laplacian(nx, ny, dx, leak=0.0):
    """Sparse 5-point Laplacian with zero-flux walls and a leaky right edge.

    ``leak`` adds ``-leak/dx`` on the diagonal of the right-most column.
    """
    from scipy.sparse import diags, identity, kron

    def path(n):
        main = -2.0 * np.ones(n)
        main[0] = main[-1] = -1.0
        if n == 1:
            main[:] = 0.0
        return diags([np.ones(n - 1), main, np.ones(n - 1)], [-1, 0, 1])

    L = kron(identity(ny), path(nx)) + kron(path(ny), identity(nx))
    L = L / (dx * dx)
    if leak:
        edge = np.zeros((ny, nx))
        edge[:, -1] = leak / dx
        L = L - diags(edge.ravel())
    return L.tocsr()


def retinoic_spde(nx=20, ny=5, T=500.0, **overrides) -> SDEProblem:
    """Method-of-lines retinoic acid model on an ``nx`` by ``ny`` grid.

    Grid spacing stays at ``dx``.  Grids smaller than the full 100x20 cover
    a window of the domain centred on the production edge ``x = 40``.
    """
    if nx < 3 or ny < 3:
        raise InputError("grid must be at least 3x3")
    p = dict(RA_PARAMS)
    unknown = set(overrides) - set(p)
    if unknown:
        raise InputError(f"unknown parameters: {sorted(unknown)}")
    p.update(overrides)
    h = p["dx"]
    if nx >= 100:
        x_start = -100.0
    else:
        x_start = p["x_edge"] - h * (nx // 2)
    xs = x_start + h * np.arange(nx)
    L = neumann_laplacian(nx, ny, h, leak=p["kA"])
    beta = p["beta0"] * np.heaviside(xs - p["x_edge"], 0.0)
    beta_field = np.broadcast_to(beta, (ny, nx)).ravel()
    n = nx * ny

    def f(t, x):
        lead = x.shape[:-1]
        s = x.reshape(lead + (6, n))
        ro, ri, rb, rr, bp, rar = (s[..., k, :] for k in range(6))
        lap = (L @ ro.reshape(-1, n).T).T.reshape(ro.shape)
        out = np.empty_like(s)
        out[..., 0, :] = beta_field + p["D"] * lap - p["b"] * ro + p["c"] * ri
        out[..., 1, :] = (p["b"] * ro + p["delta"] * bp * rr
                          - (p["gamma"] * bp + p["eta"] + p["alpha"] * rr / (p["omega"] + rr) - p["c"]) * ri)
        out[..., 2, :] = p["gamma"] * bp * ri + p["lam"] * bp * rr - (p["delta"] + p["nu"] * rar) * rb
        out[..., 3, :] = p["nu"] * rb * rar - p["lam"] * bp * rr
        out[..., 4, :] = (p["a"] - p["lam"] * bp * rr - p["gamma"] * bp * ri
                          + (p["delta"] + p["nu"] * rar) * rb - p["u"] * bp + p["d"] * rr / (p["e"] + rr))
        out[..., 5, :] = p["zeta"] - p["nu"] * rb * rar + p["lam"] * bp * rr - p["r"] * rar
        return out.reshape(x.shape)

    def g(t, x):
        lead = x.shape[:-1]
        s = x.reshape(lead + (6, n))
        out = np.zeros_like(s)
        out[..., 0, :] = p["sigma_RAout"]
        out[..., 3, :] = p["sigma_RARAR"] * s[..., 3, :]
        return out.reshape(x.shape)

    prob = SDEProblem(f, g, np.zeros(6 * n), (0.0, T), noise_kind="diagonal", name="retinoic_spde",
                      params=dict(p, nx=nx, ny=ny))
    prob.laplacian = L
    prob.x_coords = xs
    prob.beta_field = beta_field
    return prob


# ---------------------------------------------------------------------------
# registry

REGISTRY = {
    "additive_test": additive_test,
    "diagonal_test": diagonal_test,
    "split_additive_test": split_additive_test,
    "gbm_affine": gbm_affine,
    "pathwise_stiff": pathwise_stiff,
    "lotka_additive": lotka_additive,
    "lotka_multiplicative": lotka_multiplicative,
    "lotka_affine": lotka_affine,
    "van_der_pol_additive": van_der_pol_additive,
    "emt_model": emt_model,
    "retinoic_spde": retinoic_spde,
}


def parse_params(text: str | None) -> dict:
    """Parse ``"k=v,k2=v2"`` into a dict, converting numbers and booleans."""
    out = {}
    if not text:
        return out
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise InputError(f"parameter override {item!r} is not key=value")
        k, v = item.split("=", 1)
        v = v.strip()
        if v.lower() in ("true", "false"):
            out[k.strip()] = v.lower() == "true"
            continue
        try:
            out[k.strip()] = int(v)
        except ValueError:
            try:
                out[k.strip()] = float(v)
            except ValueError:
                raise InputError(f"parameter {k!r} needs a numeric value") from None
    return out


def get_problem(name: str, **overrides):
    try:
        ctor = REGISTRY[name]
    except KeyError:
        raise InputError(f"unknown problem {name!r}; known: {', '.join(REGISTRY)}") from None
    try:
        return ctor(**overrides)
    except TypeError as exc:
        raise InputError(str(exc)) from None


def unwrap(p) -> SDEProblem:
    return p.problem if isinstance(p, AnalyticProblem) else p
