"""Single-step kernels for every method family.

All kernels accept states of shape ``(..., d)`` and noise bundles whose
arrays broadcast against them (``(..., m)`` with ``m`` either ``d`` or 1),
so an ensemble of trajectories can be advanced in one call.

Implicit stages are solved for the stage increment ``z_i`` in

    M z_i - h f(t + c_i h, a_i + gamma z_i) = 0,

where ``a_i`` collects the already known part of the stage, so that
``H_i = a_i + gamma z_i`` and ``z_i`` stands in for ``h f(H_i)`` in the
update (for singular ``M`` this is what makes the algebraic rows exact).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .errors import InputError, StepFailure
from .noise import NoiseBundle
from .problems import SDEProblem

_EPS_SQRT = np.sqrt(np.finfo(float).eps)


@dataclass
class StepResult:
    x_next: np.ndarray
    errD: np.ndarray
    errN: np.ndarray
    H0: list
    H1: list
    newton_iters: int = 0
    F: list = field(default_factory=list)


@dataclass
class NewtonOptions:
    """Newton settings for implicit stages.

    Convergence is declared when the correction, measured in the weighted
    RMS norm ``abstol + |x| reltol``, drops below ``kappa``.
    """

    abstol: float = 1e-6
    reltol: float = 1e-3
    kappa: float = 0.01
    max_iters: int = 7
    predictor: str = "min_residual"

    def __post_init__(self):
        if self.predictor not in ("min_residual", "trivial"):
            raise InputError("predictor must be 'min_residual' or 'trivial'")
        if self.max_iters < 1:
            raise InputError("max_iters must be >= 1")


def _check(v, strict):
    if strict and not np.all(np.isfinite(v)):
        raise StepFailure("nonfinite", "drift or diffusion returned a non-finite value")
    return v


def _f(p, t, x, strict):
    return _check(np.asarray(p.f(t, x), dtype=float), strict)


def _g(p, t, x, strict):
    return _check(np.broadcast_to(np.asarray(p.g(t, x), dtype=float), np.shape(x)), strict)


# ---------------------------------------------------------------------------
# explicit kernels

def step_sra_explicit(p: SDEProblem, tab, t: float, x, h: float, nb: NoiseBundle,
                      strict: bool = True) -> StepResult:
    """One explicit SRA step for additive noise."""
    if not tab.explicit_A0:
        raise InputError(f"{tab.name} has an implicit drift tableau")
    x = np.asarray(x, dtype=float)
    s = tab.s
    i1, i10 = nb.i1, nb.i10 / h
    G = [_g(p, t + tab.c1[j] * h, x, strict) for j in range(s)]
    F, H0 = [], []
    for i in range(s):
        Hi = x.copy()
        for j in range(i):
            if tab.A0[i, j]:
                Hi = Hi + (h * tab.A0[i, j]) * F[j]
            if tab.B0[i, j]:
                Hi = Hi + tab.B0[i, j] * G[j] * i10
        H0.append(Hi)
        F.append(_f(p, t + tab.c0[i] * h, Hi, strict))
    drift = sum(tab.alpha[i] * F[i] for i in range(s) if tab.alpha[i])
    noise = sum((tab.beta1[i] * i1 + tab.beta2[i] * i10) * G[i] for i in range(s))
    x_next = x + h * drift + noise
    errD = np.abs(h * sum(tab.errD_weights[i] * F[i] for i in range(s)))
    errN = np.abs(sum(tab.beta2[i] * G[i] for i in range(s)) * i10)
    errN = np.broadcast_to(errN, x.shape)
    return StepResult(_check(x_next, strict), errD, errN, H0, [x] * s, 0, F)


def step_sri_explicit(p: SDEProblem, tab, t: float, x, h: float, nb: NoiseBundle,
                      strict: bool = True) -> StepResult:
    """One explicit SRI step for diagonal or scalar noise."""
    if not tab.explicit_A0:
        raise InputError(f"{tab.name} has an implicit drift tableau")
    x = np.asarray(x, dtype=float)
    s = tab.s
    sq = np.sqrt(h)
    i1 = nb.i1
    i10 = nb.i10 / h
    i11 = nb.i11 / sq
    i111 = nb.i111 / h
    F, G, H0, H1 = [], [], [], []
    for i in range(s):
        h0 = x.copy()
        h1 = x.copy()
        for j in range(i):
            if tab.A0[i, j]:
                h0 = h0 + (h * tab.A0[i, j]) * F[j]
            if tab.B0[i, j]:
                h0 = h0 + tab.B0[i, j] * G[j] * i10
            if tab.A1[i, j]:
                h1 = h1 + (h * tab.A1[i, j]) * F[j]
            if tab.B1[i, j]:
                h1 = h1 + (sq * tab.B1[i, j]) * G[j]
        H0.append(h0)
        H1.append(h1)
        F.append(_f(p, t + tab.c0[i] * h, h0, strict))
        G.append(_g(p, t + tab.c1[i] * h, h1, strict))
    drift = sum(tab.alpha[i] * F[i] for i in range(s) if tab.alpha[i])
    noise = sum((tab.beta1[i] * i1 + tab.beta2[i] * i11 + tab.beta3[i] * i10
                 + tab.beta4[i] * i111) * G[i] for i in range(s))
    x_next = x + h * drift + noise
    errD = np.abs(h * sum(tab.errD_weights[i] * F[i] for i in range(s)))
    errN = np.abs(sum((tab.beta3[i] * i10 + tab.beta4[i] * i111) * G[i] for i in range(s)))
    return StepResult(_check(x_next, strict), errD, errN, H0, H1, 0, F)


# ---------------------------------------------------------------------------
# Jacobians and linear algebra

def fd_jacobian(fun, t, x):
    """Forward-difference Jacobian, shape ``x.shape + (d,)``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    f0 = np.asarray(fun(t, x), dtype=float)
    J = np.empty(x.shape + (d,))
    for j in range(d):
        dx = _EPS_SQRT * np.maximum(np.abs(x[..., j]), 1.0)
        xp = x.copy()
        xp[..., j] += dx
        J[..., :, j] = (np.asarray(fun(t, xp), dtype=float) - f0) / dx[..., None]
    return J


def _jacobian(jac, fun, t, x):
    if jac is not None:
        J = np.asarray(jac(t, x), dtype=float)
        return np.broadcast_to(J, np.shape(x) + (np.shape(x)[-1],))
    return fd_jacobian(fun, t, x)


class _Factored:
    """Factorization of a (possibly batched) iteration matrix."""

    def __init__(self, W):
        if not np.all(np.isfinite(W)):
            raise StepFailure("linear_solve", "non-finite iteration matrix")
        self.batched = W.ndim > 2
        try:
            if self.batched:
                self.inv = np.linalg.inv(W)
            else:
                with np.errstate(all="ignore"):
                    self.lu = scipy.linalg.lu_factor(W, check_finite=False)
                if np.any(np.diag(self.lu[0]) == 0):
                    raise np.linalg.LinAlgError("singular")
        except np.linalg.LinAlgError as exc:
            raise StepFailure("linear_solve", f"singular iteration matrix: {exc}") from None

    def solve(self, b):
        if self.batched:
            return np.einsum("...ij,...j->...i", self.inv, b)
        return scipy.linalg.lu_solve(self.lu, b, check_finite=False)


def _hmat(h):
    """Step size shaped to scale a (possibly batched) ``d x d`` matrix."""
    h = np.asarray(h, dtype=float)
    return h[..., None] if h.ndim else h


def _wrms(v, scale):
    """Weighted RMS over the state axis: a float, or one value per batch row."""
    r = np.sqrt(np.mean((v / scale) ** 2, axis=-1))
    return float(r) if r.ndim == 0 else r


def _mass(p, d):
    return np.eye(d) if p.mass_matrix is None else p.mass_matrix


def _newton_stage(fun, M, t, a, gamma, h, z0, fac, opts, strict):
    """Solve ``M z - h fun(t, a + gamma z) = 0`` starting from ``z0``.

    Batched rows converge independently: a row stops updating once its own
    correction is below ``kappa``, so each trajectory sees the same
    iteration it would see alone.
    """
    z = z0.copy()
    prev = np.inf
    active = np.ones(z.shape[:-1], dtype=bool)
    for it in range(1, opts.max_iters + 1):
        H = a + gamma * z
        fz = _f_call(fun, t, H, strict)
        r = z @ M.T - h * fz
        dz = -fac.solve(r)
        if not np.all(np.isfinite(dz) | ~active[..., None]):
            raise StepFailure("newton", "non-finite Newton correction")
        dz = np.where(active[..., None], dz, 0.0)
        z = z + dz
        scale = opts.abstol + np.abs(a + gamma * z) * opts.reltol
        nrm = _wrms(dz, scale)
        done = np.asarray(nrm <= opts.kappa)
        if np.all(done | ~active):
            return z, it
        if it > 1 and np.any(active & ~done & (nrm >= prev)):
            raise StepFailure("newton", "Newton iteration diverging")
        prev = nrm
        active = np.asarray(active & ~done)
    raise StepFailure("newton", f"Newton did not converge in {opts.max_iters} iterations")


def _f_call(fun, t, x, strict):
    return _check(np.asarray(fun(t, x), dtype=float), strict)


def _first_stage(fun, M, singular, t, a, h, strict):
    fz = h * _f_call(fun, t, a, strict)
    if M is None:
        return fz
    if singular:
        sol = np.linalg.lstsq(M, np.moveaxis(fz.reshape(-1, fz.shape[-1]), -1, 0), rcond=None)[0]
        return np.moveaxis(sol, 0, -1).reshape(fz.shape)
    return np.linalg.solve(M, fz.reshape(-1, fz.shape[-1]).T).T.reshape(fz.shape)


# ---------------------------------------------------------------------------
# implicit kernels

def _noise_parts(p, tab, t, x, h, nb, strict):
    G = [_g(p, t + tab.c1[j] * h, x, strict) for j in range(tab.s)]
    i10 = nb.i10 / h
    stage_noise = []
    for i in range(tab.s):
        v = np.zeros_like(x)
        for j in range(tab.s):
            if tab.B0[i, j]:
                v = v + tab.B0[i, j] * G[j] * i10
        stage_noise.append(v)
    update = sum((tab.beta1[i] * nb.i1 + tab.beta2[i] * i10) * G[i] for i in range(tab.s))
    errN = np.broadcast_to(np.abs(sum(tab.beta2[i] * G[i] for i in range(tab.s)) * i10), x.shape)
    return G, stage_noise, update, errN


def _noise_mask(p, x):
    """Zero the noise on rows that are algebraic constraints."""
    if p.mass_matrix is None or not p.singular_mass:
        return None
    return np.any(p.mass_matrix != 0, axis=1).astype(float)


def step_sra_implicit(p: SDEProblem, tab, t: float, x, h: float, nb: NoiseBundle,
                      newton: NewtonOptions | None = None, strict: bool = True,
                      J=None) -> StepResult:
    """One drift-implicit SRA step (stage-wise for DIRK tableaus, coupled otherwise)."""
    opts = newton or NewtonOptions()
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    s = tab.s
    M = _mass(p, d)
    singular = p.singular_mass
    mask = _noise_mask(p, x)
    G, stage_noise, noise_update, errN = _noise_parts(p, tab, t, x, h, nb, strict)
    if mask is not None:
        stage_noise = [v * mask for v in stage_noise]
        noise_update = noise_update * mask
        errN = errN * mask
    if J is None:
        J = _jacobian(p.jac, p.f, t, x)
    iters = 0
    if tab.is_dirk:
        Z, H0 = [], []
        fac = None
        fac_gamma = None
        for i in range(s):
            a = x + stage_noise[i]
            for j in range(i):
                if tab.A0[i, j]:
                    a = a + tab.A0[i, j] * Z[j]
            gamma = tab.A0[i, i]
            ci = t + tab.c0[i] * h
            if gamma == 0.0:
                z = _first_stage(p.f, p.mass_matrix, singular, ci, a, h, strict)
            else:
                if fac is None or gamma != fac_gamma:
                    fac = _Factored(M - gamma * _hmat(h) * J)
                    fac_gamma = gamma
                if opts.predictor == "trivial" and Z:
                    z0 = Z[-1]
                else:
                    z0 = np.zeros_like(x)
                z, k = _newton_stage(p.f, M, ci, a, gamma, h, z0, fac, opts, strict)
                iters += k
            Z.append(z)
            H0.append(a + gamma * z)
    else:
        Z, H0, iters = _coupled_solve(p, tab, t, x, h, stage_noise, M, J, opts, strict)
    x_next = x + sum(tab.alpha[i] * Z[i] for i in range(s) if tab.alpha[i]) + noise_update
    if singular:
        x_next = _project_constraints(p, t + h, x_next, opts, strict)
    errD = np.abs(sum(tab.errD_weights[i] * Z[i] for i in range(s)))
    F = [z / h for z in Z]
    return StepResult(_check(x_next, strict), errD, errN, H0, [x] * s, iters, F)


def _coupled_solve(p, tab, t, x, h, stage_noise, M, J, opts, strict):
    """Newton on the full ``s*d`` system for non-DIRK implicit tableaus."""
    s, d = tab.s, x.shape[-1]
    A = tab.A0
    W = np.kron(np.eye(s), M) - _hmat(h) * np.einsum("ij,...kl->...ikjl", A, J).reshape(x.shape[:-1] + (s * d, s * d))
    fac = _Factored(W)
    Z = np.zeros((s,) + x.shape)
    prev = np.inf
    active = np.ones(x.shape[:-1], dtype=bool)
    for it in range(1, opts.max_iters + 1):
        H = np.stack([x + stage_noise[i] + np.tensordot(A[i], Z, axes=1) for i in range(s)])
        R = np.stack([Z[i] @ M.T - h * _f(p, t + tab.c0[i] * h, H[i], strict) for i in range(s)])
        r = np.moveaxis(R, 0, -2).reshape(x.shape[:-1] + (s * d,))
        dZ = -fac.solve(r)
        dZ = np.moveaxis(dZ.reshape(x.shape[:-1] + (s, d)), -2, 0)
        if not np.all(np.isfinite(dZ) | ~active[..., None]):
            raise StepFailure("newton", "non-finite Newton correction")
        dZ = np.where(active[..., None], dZ, 0.0)
        Z = Z + dZ
        scale = opts.abstol + np.abs(H) * opts.reltol
        # one norm per trajectory over all stages
        nrm = _wrms(np.moveaxis(dZ / scale, 0, -2).reshape(x.shape[:-1] + (s * d,)), 1.0)
        done = np.asarray(nrm <= opts.kappa)
        if np.all(done | ~active):
            H = [x + stage_noise[i] + np.tensordot(A[i], Z, axes=1) for i in range(s)]
            return list(Z), H, it
        if it > 1 and np.any(active & ~done & (nrm >= prev)):
            raise StepFailure("newton", "Newton iteration diverging")
        prev = nrm
        active = np.asarray(active & ~done)
    raise StepFailure("newton", f"Newton did not converge in {opts.max_iters} iterations")


def _project_constraints(p, t, x, opts, strict, tol=None):
    """Newton-correct the algebraic components so the constraint rows vanish."""
    M = p.mass_matrix
    alg = ~np.any(M != 0, axis=1)
    if not np.any(alg):
        return x
    tol = opts.abstol * 1e-2 if tol is None else tol
    x = x.copy()
    for _ in range(20):
        c = _f(p, t, x, strict)[..., alg]
        if np.max(np.abs(c)) <= tol:
            return x
        J = _jacobian(p.jac, p.f, t, x)
        Jaa = J[..., alg, :][..., :, alg]
        try:
            dx = np.linalg.solve(Jaa, c[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise StepFailure("linear_solve", "singular constraint Jacobian") from None
        x[..., alg] -= dx
    c = _f(p, t, x, strict)[..., alg]
    if np.max(np.abs(c)) > tol:
        raise StepFailure("newton", "constraint projection did not converge")
    return x


def step_skencarp_imex(p: SDEProblem, tab, t: float, x, h: float, nb: NoiseBundle,
                       newton: NewtonOptions | None = None, strict: bool = True,
                       J=None) -> StepResult:
    """IMEX step: ``f1`` through the implicit tableau, ``f2`` through its explicit partner."""
    if p.imex_split is None:
        raise InputError("problem has no imex_split")
    if tab.A0_explicit is None:
        raise InputError(f"{tab.name} has no explicit companion tableau")
    if p.singular_mass:
        raise InputError("IMEX stepping needs an invertible mass matrix")
    opts = newton or NewtonOptions()
    f1, f2 = p.imex_split
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    s = tab.s
    M = _mass(p, d)
    Ae = tab.A0_explicit
    _, stage_noise, noise_update, errN = _noise_parts(p, tab, t, x, h, nb, strict)
    if J is None:
        J = _jacobian(p.imex_jac, f1, t, x)

    def explicit_part(ti, H):
        z = h * _f_call(f2, ti, H, strict)
        if p.mass_matrix is not None:
            z = np.linalg.solve(M, z.reshape(-1, d).T).T.reshape(z.shape)
        return z

    Z1, Z2, H0 = [], [], []
    fac = None
    iters = 0
    for i in range(s):
        a = x + stage_noise[i]
        for j in range(i):
            if tab.A0[i, j]:
                a = a + tab.A0[i, j] * Z1[j]
            if Ae[i, j]:
                a = a + Ae[i, j] * Z2[j]
        gamma = tab.A0[i, i]
        ci = t + tab.c0[i] * h
        if gamma == 0.0:
            z = _first_stage(f1, p.mass_matrix, False, ci, a, h, strict)
        else:
            if fac is None:
                fac = _Factored(M - gamma * _hmat(h) * J)
            z0 = Z1[-1] if (opts.predictor == "trivial" and Z1) else np.zeros_like(x)
            z, k = _newton_stage(f1, M, ci, a, gamma, h, z0, fac, opts, strict)
            iters += k
        H = a + gamma * z
        Z1.append(z)
        H0.append(H)
        Z2.append(explicit_part(ci, H))
    Z = [Z1[i] + Z2[i] for i in range(s)]
    x_next = x + sum(tab.alpha[i] * Z[i] for i in range(s) if tab.alpha[i]) + noise_update
    errD = np.abs(sum(tab.errD_weights[i] * Z[i] for i in range(s)))
    F = [z / h for z in Z]
    return StepResult(_check(x_next, strict), errD, errN, H0, [x] * s, iters, F)


# ---------------------------------------------------------------------------
# Lamperti change of variables for affine noise

class LampertiMap:
    """Componentwise ``psi`` taking affine noise to unit (or constant) noise.

    For ``sigma_M > 0`` the transformed diffusion is 1; components with
    ``sigma_M = 0`` are left untouched and keep diffusion ``sigma_A``.
    """

    def __init__(self, sigma_M, sigma_A):
        self.sM = np.asarray(sigma_M, dtype=float)
        self.sA = np.asarray(sigma_A, dtype=float)
        self.mult = self.sM > 0
        self.shifted = self.mult & (self.sA > 0)
        self.safe_sM = np.where(self.mult, self.sM, 1.0)

    def psi(self, x):
        x = np.asarray(x, dtype=float)
        arg = np.where(self.mult, self.sM * x + self.sA, 1.0)
        if np.any(arg <= 0):
            raise StepFailure("domain", "Lamperti transform of a state outside its domain")
        return np.where(self.mult, np.log(arg) / self.safe_sM, x)

    def psi_inv(self, z):
        z = np.asarray(z, dtype=float)
        with np.errstate(over="ignore"):
            e = np.exp(np.where(self.mult, self.sM * z, 0.0))
        return np.where(self.mult, (e - self.sA) / self.safe_sM, z)

    def noise_scale(self, x):
        """``dX/dZ`` at ``x``: ``sigma_M x + sigma_A`` or 1."""
        return np.where(self.mult, self.sM * x + self.sA, 1.0)

    def g_tilde(self):
        return np.where(self.mult, 1.0, self.sA)


def lamperti_problem(p: SDEProblem) -> tuple[SDEProblem, LampertiMap]:
    """Additive-noise problem for ``Z = psi(X)``."""
    if p.noise_kind != "affine":
        raise InputError("Lamperti transform needs an affine-noise problem")
    lm = LampertiMap(p.sigma_M, p.sigma_A)
    gt = lm.g_tilde()
    half = 0.5 * np.where(lm.mult, lm.sM, 0.0)

    def f(t, z):
        x = lm.psi_inv(z)
        return p.f(t, x) / lm.noise_scale(x) - half

    def g(t, z):
        return np.broadcast_to(gt, np.shape(z)).copy()

    imex = None
    if p.imex_split is not None:
        f1, f2 = p.imex_split

        def f1t(t, z):
            x = lm.psi_inv(z)
            return f1(t, x) / lm.noise_scale(x) - half

        def f2t(t, z):
            x = lm.psi_inv(z)
            return f2(t, x) / lm.noise_scale(x)

        imex = (f1t, f2t)
    z0 = lm.psi(p.x0)
    pz = replace(p, f=f, g=g, x0=z0, noise_kind="additive", jac=None, imex_jac=None,
                 imex_split=imex, sigma_M=None, sigma_A=None, name=p.name + "[lamperti]")
    return pz, lm


def lamperti_step(p: SDEProblem, inner, tab, t: float, x, h: float, nb: NoiseBundle,
                  transformed=None, **kw) -> StepResult:
    """Advance an affine-noise problem with an SRA kernel in ``Z = psi(X)`` space.

    ``transformed`` may carry a cached ``(problem, map)`` pair from
    :func:`lamperti_problem`.  Error estimates are mapped back to X units.
    """
    pz, lm = transformed if transformed is not None else lamperti_problem(p)
    z = lm.psi(x)
    r = inner(pz, tab, t, z, h, nb, **kw)
    x_next = lm.psi_inv(r.x_next)
    if not np.all(np.isfinite(x_next)):
        raise StepFailure("nonfinite", "state overflow after inverse transform")
    scale = np.abs(lm.noise_scale(x_next))
    return StepResult(x_next, r.errD * scale, r.errN * scale,
                      [lm.psi_inv(H) for H in r.H0], [lm.psi_inv(H) for H in r.H1],
                      r.newton_iters, r.F)


# ---------------------------------------------------------------------------
# dispatch

def kernel_for(p: SDEProblem, tab, imex: bool = False):
    """Pick the step kernel matching the tableau and problem structure."""
    if tab.family == "SRI":
        if p.noise_kind not in ("diagonal", "scalar", "additive", "affine"):
            raise InputError(f"{tab.name} cannot handle {p.noise_kind} noise")
        if p.mass_matrix is not None:
            raise InputError("mass matrices need an implicit method")
        return step_sri_explicit
    if p.noise_kind in ("diagonal", "scalar"):
        raise InputError(f"{tab.name} is for additive noise; use an SRI method")
    if imex:
        return step_skencarp_imex
    if tab.explicit_A0:
        if p.mass_matrix is not None:
            raise InputError("mass matrices need an implicit method")
        return step_sra_explicit
    return step_sra_implicit


def affine_as_diagonal(p: SDEProblem) -> SDEProblem:
    """View an affine problem as plain diagonal noise (for SRI methods)."""
    if p.noise_kind != "affine":
        return p
    return replace(p, noise_kind="diagonal", sigma_M=None, sigma_A=None)
