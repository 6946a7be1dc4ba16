"""Linear stability analysis of SRK tableaus.

``drift_G`` is the amplification factor of the drift tableau on
``dX = lambda X dt`` with ``z = lambda h``.  ``meansquare_S`` is the
second moment of the one-step amplification on ``dX = mu X dt + sigma X dW``
with ``z = mu h`` and ``w = sigma sqrt(h)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InputError, StateError
from .noise import NoiseStream


def drift_G(tab, z):
    """``G(z) = 1 + z alpha^T (I - z A0)^{-1} e``, vectorized over ``z``."""
    z = np.asarray(z, dtype=complex)
    A = tab.A0
    s = A.shape[0]
    zz = z.reshape(-1)
    Mz = np.eye(s)[None] - zz[:, None, None] * A[None]
    try:
        y = np.linalg.solve(Mz, np.ones((zz.size, s, 1), dtype=complex))[..., 0]
    except np.linalg.LinAlgError:
        raise StateError("resolvent is singular at one of the requested points") from None
    G = 1.0 + zz * (y @ tab.alpha)
    return G.reshape(z.shape) if z.ndim else G[0]


def drift_G_polynomial(tab) -> np.ndarray:
    """Coefficients (ascending powers) of G for an explicit tableau.

    Uses ``(I - zA)^{-1} = sum_k z^k A^k`` which terminates because A is
    strictly lower triangular.
    """
    if not tab.explicit_A0:
        raise InputError("polynomial form exists only for explicit tableaus")
    s = tab.s
    coef = np.zeros(s + 1)
    coef[0] = 1.0
    v = np.ones(s)
    for k in range(1, s + 1):
        coef[k] = tab.alpha @ v
        v = tab.A0 @ v
    return coef


def l_limit(tab) -> float:
    """``lim_{z -> -inf} G(z) = 1 - alpha^T A0^{-1} e`` (needs invertible A0)."""
    A = tab.A0
    if abs(np.linalg.det(A)) < 1e-300:
        raise InputError("A0 is singular")
    return float(1.0 - tab.alpha @ np.linalg.solve(A, np.ones(tab.s)))


def _left_halfplane_grid(n=10_000, rmin=1e-3, rmax=1e8):
    n_r = 100
    n_th = n // n_r
    r = np.logspace(np.log10(rmin), np.log10(rmax), n_r)
    th = np.linspace(np.pi / 2, 3 * np.pi / 2, n_th)
    return (r[:, None] * np.exp(1j * th[None, :])).ravel()


def check_A_L_stability(tab, n=10_000) -> dict:
    """Sampling certificate for A-stability plus the L-stability limit test.

    A-stability is declared when ``|G| <= 1 + 1e-12`` at every point of a
    log-radial grid covering the closed left half-plane (radii 1e-3..1e8,
    both imaginary-axis rays included).  This is evidence, not a proof.
    """
    z = _left_halfplane_grid(n)
    with np.errstate(all="ignore"):
        G = np.abs(drift_G(tab, z))
    violations = int(np.sum(~(G <= 1.0 + 1e-12)))
    far = float(abs(drift_G(tab, -1e8)))
    l_stable = far < 1e-6 and violations == 0
    limit = None
    if l_stable and abs(np.linalg.det(tab.A0)) > 1e-300:
        limit = abs(l_limit(tab))
        l_stable = limit < 1e-12
    return dict(a_stable=violations == 0, l_stable=bool(l_stable), violations=violations,
                G_at_minus_1e8=far, limit=limit, n_points=int(z.size))


def check_B_stability(tab, tol=-1e-12) -> bool:
    """Burrage-Butcher algebraic test: ``diag(alpha)`` and ``BA + A^T B - alpha alpha^T`` PSD."""
    alpha = tab.alpha
    if np.any(alpha < tol):
        return False
    A = tab.A0
    B = np.diag(alpha)
    M = B @ A + A.T @ B - np.outer(alpha, alpha)
    return bool(np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) >= tol)


def real_axis_extent(tab, dx=0.01, zmax=1000.0) -> float:
    """Largest ``r`` on the ``dx`` raster with ``|G(-x)| <= 1`` for all ``x <= r``."""
    x = np.arange(0.0, zmax + dx / 2, dx)
    with np.errstate(all="ignore"):
        ok = np.abs(drift_G(tab, -x)) <= 1.0 + 1e-12
    bad = np.flatnonzero(~ok)
    if bad.size == 0:
        return float("inf")
    return float(x[bad[0] - 1]) if bad[0] > 0 else 0.0


@lru_cache(maxsize=64)
def _extent_cached(name, dx):
    from .tableaus import builtin
    return real_axis_extent(builtin(name), dx)


def z_min(tab, dx=0.01) -> float:
    """Real-axis drift stability extent (cached for built-in tableaus)."""
    try:
        return _extent_cached(tab.name, dx)
    except InputError:
        return real_axis_extent(tab, dx)


# ---------------------------------------------------------------------------
# mean-square stability

def _amplification(tab, z, w, xi_w, xi_z, u0=1.0):
    """One-step factor ``U1 / U0`` on the linear test SDE with ``h = 1``.

    ``xi_w`` and ``xi_z`` are arrays of standard normals.  The stage system
    is solved jointly for (H0, H1).
    """
    s = tab.s
    xi_w = np.asarray(xi_w, dtype=float).ravel()
    xi_z = np.asarray(xi_z, dtype=float).ravel()
    i1 = xi_w
    i11 = 0.5 * (xi_w ** 2 - 1.0)
    i10 = 0.5 * (xi_w + xi_z / np.sqrt(3.0))
    i111 = (xi_w ** 3 - 3.0 * xi_w) / 6.0
    n = xi_w.size
    K = np.zeros((n, 2 * s, 2 * s))
    K[:, :s, :s] = np.eye(s) - z * tab.A0
    K[:, :s, s:] = -w * i10[:, None, None] * tab.B0
    K[:, s:, :s] = -z * tab.A1
    K[:, s:, s:] = np.eye(s) - w * tab.B1
    rhs = np.full((n, 2 * s), u0)
    sol = np.linalg.solve(K, rhs[..., None])[..., 0]
    H0, H1 = sol[:, :s], sol[:, s:]
    coef = (np.outer(i1, tab.beta1) + np.outer(i11, tab.beta2)
            + np.outer(i10, tab.beta3) + np.outer(i111, tab.beta4))
    U1 = u0 + z * (H0 @ tab.alpha) + w * np.sum(coef * H1, axis=1)
    return U1 / u0


@lru_cache(maxsize=8)
def _gh(n):
    x, wts = np.polynomial.hermite_e.hermegauss(n)
    return x, wts / np.sqrt(2.0 * np.pi)


def meansquare_S(tab, z: float, w: float, quadrature="gauss_hermite", n=20, seed=0,
                 return_stderr=False, u0=1.0):
    """``E[(U1/U0)^2]`` for the SRI tableau at real ``(z, w)``.

    ``quadrature`` is ``"gauss_hermite"`` (tensor rule with ``n`` nodes per
    axis over (dW, dZ)) or ``"monte_carlo"`` (``n`` samples).
    """
    if tab.family != "SRI":
        raise InputError("mean-square analysis needs an SRI tableau")
    if not tab.explicit_A0:
        raise InputError("mean-square analysis is limited to explicit tableaus")
    if quadrature == "gauss_hermite":
        x, wts = _gh(n)
        XW, XZ = np.meshgrid(x, x, indexing="ij")
        W2 = np.outer(wts, wts).ravel()
        amp = _amplification(tab, z, w, XW, XZ, u0)
        val = float(np.sum(W2 * amp ** 2))
        return (val, 0.0) if return_stderr else val
    if quadrature == "monte_carlo":
        st = NoiseStream(seed)
        total = []
        chunk = 200_000
        left = n
        while left > 0:
            k = min(chunk, left)
            xi = st.normals(2 * k).reshape(2, k)
            total.append(_amplification(tab, z, w, xi[0], xi[1], u0) ** 2)
            left -= k
        a = np.concatenate(total)
        val = float(a.mean())
        se = float(a.std(ddof=1) / np.sqrt(a.size))
        return (val, se) if return_stderr else val
    raise InputError(f"unknown quadrature {quadrature!r}")


# ---------------------------------------------------------------------------
# rasters

@dataclass
class RegionGrid:
    """Membership raster: ``values[j, i]`` is the criterion at ``(z[i], w[j])``."""

    z: np.ndarray
    w: np.ndarray
    dx: float
    values: np.ndarray
    criterion: str

    @property
    def stable(self) -> np.ndarray:
        return self.values < 1.0

    @property
    def area(self) -> float:
        return float(self.stable.sum() * self.dx * self.dx)

    def to_pgm(self, path) -> None:
        """Plain (P2) graymap: stable cells white, unstable black, top row = max w."""
        img = np.where(self.stable, 255, 0)[::-1]
        with open(path, "w") as fh:
            fh.write(f"P2\n{img.shape[1]} {img.shape[0]}\n255\n")
            for row in img:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")

    def to_csv(self, path) -> None:
        Z, W = np.meshgrid(self.z, self.w)
        np.savetxt(path, np.column_stack([Z.ravel(), W.ravel(), self.values.ravel()]),
                   delimiter=",", header="z,w,value", comments="")

    def report(self) -> dict:
        return dict(criterion=self.criterion, area=self.area, dx=self.dx,
                    z_range=[float(self.z[0]), float(self.z[-1])],
                    w_range=[float(self.w[0]), float(self.w[-1])],
                    shape=list(self.values.shape))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.report(), fh, indent=2)


def region_area(tab, N: float, M: float, dx: float, criterion="drift", z_hi=1.0, n_gh=20):
    """Stable area inside ``[-N, z_hi] x [-M, M]`` on a cell-centred raster.

    For ``drift`` the second axis is the imaginary part of ``z``; for
    ``meansquare`` it is the noise variable ``w``.
    """
    if not dx > 0:
        raise InputError("dx must be positive")
    z = np.arange(-N + dx / 2, z_hi, dx)
    w = np.arange(-M + dx / 2, M, dx)
    if criterion == "drift":
        Zc = z[None, :] + 1j * w[:, None]
        with np.errstate(all="ignore"):
            vals = np.abs(drift_G(tab, Zc))
        vals = np.where(np.isfinite(vals), vals, np.inf)
    elif criterion == "meansquare":
        vals = np.empty((w.size, z.size))
        for j, wj in enumerate(w):
            for i, zi in enumerate(z):
                try:
                    vals[j, i] = meansquare_S(tab, zi, wj, n=n_gh)
                except np.linalg.LinAlgError:
                    vals[j, i] = np.inf
    else:
        raise InputError("criterion must be 'drift' or 'meansquare'")
    grid = RegionGrid(z, w, dx, vals, criterion)
    return grid.area, grid
