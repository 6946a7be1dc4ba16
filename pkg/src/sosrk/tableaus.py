"""Coefficient sets for the SRA (additive noise) and SRI (diagonal noise)
stochastic Runge-Kutta families, plus their order-condition checks.

Stage indices are zero-based throughout; ``A0[1, 0]`` is the coefficient
usually written A_{2,1}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction as F
from functools import lru_cache

import numpy as np
from mpmath import mp, mpf, sqrt as mpsqrt

from .errors import InputError

ORIGINAL = "original"
EXTERNAL = "external-reference"
CLASSICAL = "classical"


def _arr(rows):
    return np.array([[float(v) for v in r] for r in rows])


def _vec(v):
    return np.array([float(x) for x in v])


def _strictly_lower(a):
    return bool(np.all(np.triu(a) == 0.0))


def alternating_weights(alpha) -> np.ndarray:
    """Zero-sum alternating-sign weights over the stages with nonzero alpha.

    For an odd number of participating stages the two end weights are
    halved, which keeps the sum at zero (e.g. ``(1/2, -1, 1/2)``).
    """
    idx = [i for i, a in enumerate(alpha) if a != 0.0]
    w = np.zeros(len(alpha))
    if len(idx) < 2:
        return w
    for k, i in enumerate(idx):
        w[i] = 1.0 if k % 2 == 0 else -1.0
    if len(idx) % 2 == 1:
        w[idx[0]] *= 0.5
        w[idx[-1]] *= 0.5
    return w


@dataclass(frozen=True)
class SRATableau:
    """Additive-noise method ``(A0, B0, alpha, beta1, beta2, c0, c1)``.

    ``errD_weights`` gives the drift error estimate ``h * sum_i w_i f_i``.
    ``A0_explicit`` is the companion explicit matrix used for the
    non-stiff half of an IMEX split (only SKenCarp carries one).
    """

    name: str
    A0: np.ndarray
    B0: np.ndarray
    alpha: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    errD_weights: np.ndarray
    l_stable_claimed: bool = False
    detection_stages: tuple | None = None
    order_exponent: float = 1.0 / 3.0
    provenance: str = ORIGINAL
    A0_explicit: np.ndarray | None = None
    family: str = field(default="SRA", init=False)

    @property
    def s(self) -> int:
        return len(self.alpha)

    @property
    def explicit_A0(self) -> bool:
        return _strictly_lower(self.A0)

    @property
    def explicit_B0(self) -> bool:
        return _strictly_lower(self.B0)

    @property
    def detection_capable(self) -> bool:
        return self.detection_stages is not None

    @property
    def is_dirk(self) -> bool:
        return bool(np.all(np.triu(self.A0, 1) == 0.0))

    @property
    def flags(self) -> dict:
        return {
            "explicit_A0": self.explicit_A0,
            "explicit_B0": self.explicit_B0,
            "l_stable_claimed": self.l_stable_claimed,
            "detection_capable": self.detection_capable,
        }


@dataclass(frozen=True)
class SRITableau:
    """Diagonal-noise method with the four noise weight vectors."""

    name: str
    A0: np.ndarray
    A1: np.ndarray
    B0: np.ndarray
    B1: np.ndarray
    alpha: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    beta3: np.ndarray
    beta4: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    errD_weights: np.ndarray
    l_stable_claimed: bool = False
    detection_stages: tuple | None = None
    order_exponent: float = 0.5
    provenance: str = ORIGINAL
    family: str = field(default="SRI", init=False)

    @property
    def s(self) -> int:
        return len(self.alpha)

    @property
    def explicit_A0(self) -> bool:
        return _strictly_lower(self.A0)

    @property
    def explicit_B0(self) -> bool:
        return _strictly_lower(self.B0)

    @property
    def detection_capable(self) -> bool:
        return self.detection_stages is not None

    @property
    def flags(self) -> dict:
        return {
            "explicit_A0": self.explicit_A0,
            "explicit_B0": self.explicit_B0 and _strictly_lower(self.A1) and _strictly_lower(self.B1),
            "l_stable_claimed": self.l_stable_claimed,
            "detection_capable": self.detection_capable,
        }


# ---------------------------------------------------------------------------
# SKenCarp noise coefficients from their closed forms

@lru_cache(maxsize=None)
def skencarp_noise_coefficients(dps: int = 60):
    """Return ``(B21, B43)`` evaluated with ``dps`` decimal digits."""
    with mp.workdps(dps):
        k1 = mpf(87294609440832483406992237)
        k2 = mpf(-53983406399371387722712393713535786276)
        k3 = 26826820 * mpsqrt(mpf(6853072660943221216270384658311461343029149665543510113394397))
        k4 = k1 * (k2 - k3) / 4868738516734691891458097
        b21 = (k4 - 354038415192410790619483213666362001932) / mpf(210758174113231167877981435258781706648)
        b43 = (k2 - k3) / mpf(8606625878152317177894269252900546591)
        return float(b21), float(b43)


_GAMMA = F(1767732205903, 4055673282236)


def _sra1():
    alpha = _vec([F(1, 3), F(2, 3)])
    return SRATableau(
        name="SRA1",
        A0=_arr([[0, 0], [F(3, 4), 0]]),
        B0=_arr([[0, 0], [F(3, 2), 0]]),
        alpha=alpha,
        beta1=_vec([1, 0]),
        beta2=_vec([-1, 1]),
        c0=_vec([0, F(3, 4)]),
        c1=_vec([1, 0]),
        errD_weights=alternating_weights(alpha),
    )


def _sra3():
    alpha = _vec([F(1, 6), F(1, 6), F(2, 3)])
    return SRATableau(
        name="SRA3",
        A0=_arr([[0, 0, 0], [1, 0, 0], [F(1, 4), F(1, 4), 0]]),
        B0=_arr([[0, 0, 0], [0, 0, 0], [1, F(1, 2), 0]]),
        alpha=alpha,
        beta1=_vec([1, 0, 0]),
        beta2=_vec([-1, 1, 0]),
        c0=_vec([0, 1, F(1, 2)]),
        c1=_vec([1, 0, 0]),
        errD_weights=alternating_weights(alpha),
        provenance=EXTERNAL,
    )


def _sosra():
    alpha = _vec([0.2889874966892885, 0.6859880440839937, 0.025024459226717772])
    return SRATableau(
        name="SOSRA",
        A0=_arr([[0, 0, 0],
                 [0.6923962376159507, 0, 0],
                 [-3.1609142252828395, 4.1609142252828395, 0]]),
        B0=_arr([[0, 0, 0],
                 [1.3371632704399763, 0, 0],
                 [1.442371048468624, 1.8632741501139225, 0]]),
        alpha=alpha,
        beta1=_vec([-16.792534242221663, 17.514995785380226, 0.27753845684143835]),
        beta2=_vec([0.4237535769069274, 0.6010381474428539, -1.0247917243497813]),
        c0=_vec([0, 0.6923962376159507, 1]),
        c1=_vec([0, 0.041248171110700504, 1]),
        errD_weights=alternating_weights(alpha),
    )


def _sosra2():
    alpha = _vec([0.4999999999999998, -0.9683897375354181, 1.4683897375354185])
    return SRATableau(
        name="SOSRA2",
        A0=_arr([[0, 0, 0],
                 [1, 0, 0],
                 [0.9511849235504364, 0.04881507644956362, 0]]),
        B0=_arr([[0, 0, 0],
                 [0.7686101171003622, 0, 0],
                 [0.43886792994934987, 0.7490415909204886, 0]]),
        alpha=alpha,
        beta1=_vec([0, 0.92438032145683, 0.07561967854316998]),
        beta2=_vec([1, -0.8169981105823436, -0.18300188941765633]),
        c0=_vec([0, 1, 1]),
        c1=_vec([0, 1, 1]),
        errD_weights=alternating_weights(alpha),
        detection_stages=(1, 2),
    )


def _lsra():
    alpha = _vec([F(32, 41), F(9, 41)])
    return SRATableau(
        name="LSRA",
        A0=_arr([[1, F(-41, 64)], [F(32, 41), F(9, 41)]]),
        B0=_arr([[F(5, 8), 0], [0, F(7, 3)]]),
        alpha=alpha,
        beta1=_vec([0, 1]),
        beta2=_vec([1, -1]),
        c0=_vec([F(23, 64), 1]),
        c1=_vec([0, 1]),
        errD_weights=alternating_weights(alpha),
        l_stable_claimed=True,
    )


def _skencarp():
    g = _GAMMA
    b = [F(1471266399579, 7840856788654), F(-4482444167858, 7529755066697),
         F(11266239266428, 11593286722821), g]
    bhat = [F(2756255671327, 12835298489170), F(-10771552573575, 22201958757719),
            F(9247589265047, 10645013368117), F(2193209047091, 5459859503100)]
    A = [[0, 0, 0, 0],
         [g, g, 0, 0],
         [F(2746238789719, 10658868560708), F(-640167445237, 6845629431997), g, 0],
         b]
    # explicit half of the Kennedy-Carpenter ARK3(2)4L[2]SA pair
    Ae = [[0, 0, 0, 0],
          [2 * g, 0, 0, 0],
          [F(5535828885825, 10492691773637), F(788022342437, 10882634858940), 0, 0],
          [F(6485989280629, 16251701735622), F(-4246266847089, 9704473918619),
           F(10755448449292, 10357097424841), 0]]
    b21, b43 = skencarp_noise_coefficients()
    B0 = np.zeros((4, 4))
    B0[1, 0] = b21
    B0[3, 2] = b43
    return SRATableau(
        name="SKenCarp",
        A0=_arr(A),
        B0=B0,
        alpha=_vec(b),
        beta1=_vec([0, 0, 0, 1]),
        beta2=_vec([1, 0, 0, -1]),
        c0=_vec([0, 2 * g, F(3, 5), 1]),
        c1=_vec([0, 0, 0, 1]),
        errD_weights=_vec([bi - bh for bi, bh in zip(b, bhat)]),
        l_stable_claimed=True,
        A0_explicit=_arr(Ae),
    )


def _sosri():
    alpha = _vec([1.140099274172029, -0.6401334255743456, 0.4736296532772559, 0.026404498125060714])
    return SRITableau(
        name="SOSRI",
        A0=_arr([[0, 0, 0, 0],
                 [-0.04199224421316468, 0, 0, 0],
                 [2.842612915017106, -2.0527723684000727, 0, 0],
                 [4.338237071435815, -2.8895936137439793, 2.3017575594644466, 0]]),
        A1=_arr([[0, 0, 0, 0],
                 [0.26204282091330466, 0, 0, 0],
                 [0.20903646383505375, -0.1502377115150361, 0, 0],
                 [0.05836595312746999, 0.6149440396332373, 0.08535117634046772, 0]]),
        B0=_arr([[0, 0, 0, 0],
                 [-0.21641093549612528, 0, 0, 0],
                 [1.5336352863679572, 0.26066223492647056, 0, 0],
                 [-1.0536037558179159, 1.7015284721089472, -0.20725685784180017, 0]]),
        B1=_arr([[0, 0, 0, 0],
                 [-0.5119011827621657, 0, 0, 0],
                 [2.67767339866713, -4.9395031322250995, 0, 0],
                 [0.15580956238299215, 3.2361551006624674, -1.4223118283355949, 0]]),
        alpha=alpha,
        beta1=_vec([-1.8453464565104432, 2.688764531100726, -0.2523866501071323, 0.40896857551684956]),
        beta2=_vec([0.4969658141589478, -0.5771202869753592, -0.12919702470322217, 0.2093514975196336]),
        beta3=_vec([2.8453464565104425, -2.688764531100725, 0.2523866501071322, -0.40896857551684945]),
        beta4=_vec([0.11522663875443433, -0.57877086147738, 0.2857851028163886, 0.17775911990655704]),
        c0=_vec([0, -0.04199224421316468, 0.7898405466170333, 3.7504010171562823]),
        c1=_vec([0, 0.26204282091330466, 0.05879875232001766, 0.758661169101175]),
        errD_weights=alternating_weights(alpha),
    )


def _sosri2():
    alpha = _vec([-0.15036858140642623, 0.7545275856696072, 0.686995463807979, -0.2911544680711602])
    return SRITableau(
        name="SOSRI2",
        A0=_arr([[0, 0, 0, 0],
                 [0.13804532298278663, 0, 0, 0],
                 [0.5818361298250374, 0.4181638701749618, 0, 0],
                 [0.4670018408674211, 0.8046204792187386, -0.27162232008616016, 0]]),
        A1=_arr([[0, 0, 0, 0],
                 [0.45605532163856893, 0, 0, 0],
                 [0.7555807846451692, 0.24441921535482677, 0, 0],
                 [0.6981181143266059, 0.3453277086024727, -0.04344582292908241, 0]]),
        B0=_arr([[0, 0, 0, 0],
                 [0.08852381537667678, 0, 0, 0],
                 [1.0317752458971061, 0.4563552922077882, 0, 0],
                 [1.73078280444124, -0.46089678470929774, -0.9637509618944188, 0]]),
        B1=_arr([[0, 0, 0, 0],
                 [0.6753186815412179, 0, 0, 0],
                 [-0.07452812525785148, -0.49783736486149366, 0, 0],
                 [-0.5591906709928903, 0.022696571806569924, -0.8984927888368557, 0]]),
        alpha=alpha,
        beta1=_vec([-0.45315689727309133, 0.8330937231303951, 0.3792843195533544, 0.24077885458934192]),
        beta2=_vec([-0.4994383733810986, 0.9181786186154077, -0.25613778661003145, -0.16260245862427797]),
        beta3=_vec([1.4531568972730915, -0.8330937231303933, -0.3792843195533583, -0.24077885458934023]),
        beta4=_vec([-0.4976090683622265, 0.9148155835648892, -1.4102107084476505, 0.9930041932449877]),
        c0=_vec([0, 0.13804532298278663, 1, 1]),
        c1=_vec([0, 0.45605532163856893, 1, 1]),
        errD_weights=alternating_weights(alpha),
        detection_stages=(2, 3),
    )


def _sriw1():
    alpha = _vec([F(1, 3), F(2, 3), 0, 0])
    return SRITableau(
        name="SRIW1",
        A0=_arr([[0, 0, 0, 0], [F(3, 4), 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]),
        A1=_arr([[0, 0, 0, 0], [F(1, 4), 0, 0, 0], [1, 0, 0, 0], [0, 0, F(1, 4), 0]]),
        B0=_arr([[0, 0, 0, 0], [F(3, 2), 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]),
        B1=_arr([[0, 0, 0, 0], [F(1, 2), 0, 0, 0], [-1, 0, 0, 0], [-5, 3, F(1, 2), 0]]),
        alpha=alpha,
        beta1=_vec([-1, F(4, 3), F(2, 3), 0]),
        beta2=_vec([-1, F(4, 3), F(-1, 3), 0]),
        beta3=_vec([2, F(-4, 3), F(-2, 3), 0]),
        beta4=_vec([-2, F(5, 3), F(-2, 3), 1]),
        c0=_vec([0, F(3, 4), 0, 0]),
        c1=_vec([0, F(1, 4), 1, F(1, 4)]),
        errD_weights=alternating_weights(alpha),
        provenance=EXTERNAL,
    )


def _euler_maruyama():
    z = np.zeros((1, 1))
    return SRITableau(
        name="EM", A0=z, A1=z, B0=z, B1=z,
        alpha=_vec([1]), beta1=_vec([1]), beta2=_vec([0]), beta3=_vec([0]), beta4=_vec([0]),
        c0=_vec([0]), c1=_vec([0]), errD_weights=_vec([0]),
        provenance=CLASSICAL,
    )


_BUILDERS = {
    "SRA1": _sra1,
    "SOSRA": _sosra,
    "SOSRA2": _sosra2,
    "LSRA": _lsra,
    "SKENCARP": _skencarp,
    "SOSRI": _sosri,
    "SOSRI2": _sosri2,
    "SRA3": _sra3,
    "SRIW1": _sriw1,
    "EM": _euler_maruyama,
}

CORE_METHODS = ("SRA1", "SOSRA", "SOSRA2", "LSRA", "SKenCarp", "SOSRI", "SOSRI2")
ALL_METHODS = CORE_METHODS + ("SRA3", "SRIW1", "EM")


@lru_cache(maxsize=None)
def builtin(name: str):
    """Look up a shipped tableau by (case-insensitive) name."""
    try:
        return _BUILDERS[name.upper()]()
    except KeyError:
        raise InputError(f"unknown method {name!r}; known: {', '.join(ALL_METHODS)}") from None


# ---------------------------------------------------------------------------
# order conditions

SRA_CONDITIONS = (
    "alpha.e = 1",
    "beta1.e = 1",
    "beta2.e = 0",
    "alpha.B0e = 1",
    "alpha.A0e = 1/2",
    "alpha.(B0e)^2 = 3/2",
    "beta1.c1 = 1",
    "beta2.c1 = -1",
)


def check_order_conditions_sra(t: SRATableau) -> dict:
    """Absolute residuals of the strong order 1.5 SRA conditions."""
    e = np.ones(t.s)
    b0e = t.B0 @ e
    vals = (
        t.alpha @ e - 1.0,
        t.beta1 @ e - 1.0,
        t.beta2 @ e,
        t.alpha @ b0e - 1.0,
        t.alpha @ (t.A0 @ e) - 0.5,
        t.alpha @ (b0e * b0e) - 1.5,
        t.beta1 @ t.c1 - 1.0,
        t.beta2 @ t.c1 + 1.0,
    )
    return {k: abs(float(v)) for k, v in zip(SRA_CONDITIONS, vals)}


SRI_CONDITIONS = (
    "alpha.e = 1", "beta1.e = 1", "beta2.e = 0", "beta3.e = 0", "beta4.e = 0",
    "beta1.B1e = 0", "beta2.B1e = 1", "beta3.B1e = 0", "beta4.B1e = 0",
    "alpha.A0e = 1/2", "alpha.B0e = 1", "alpha.(B0e)^2 = 3/2",
    "beta1.A1e = 1", "beta2.A1e = 0", "beta3.A1e = -1", "beta4.A1e = 0",
    "beta1.(B1e)^2 = 1", "beta2.(B1e)^2 = 0", "beta3.(B1e)^2 = -1", "beta4.(B1e)^2 = 2",
    "beta1.B1(B1e) = 0", "beta2.B1(B1e) = 0", "beta3.B1(B1e) = 0", "beta4.B1(B1e) = 1",
    "beta1.A1(B0e)/2 + beta3.A1(B0e)/3 = 0",
)


def check_order_conditions_sri(t: SRITableau) -> dict:
    """Absolute residuals of the 25 strong order 1.5 SRI conditions."""
    e = np.ones(t.s)
    b0e = t.B0 @ e
    b1e = t.B1 @ e
    a0e = t.A0 @ e
    a1e = t.A1 @ e
    b1b1e = t.B1 @ b1e
    a1b0e = t.A1 @ b0e
    b1, b2, b3, b4 = t.beta1, t.beta2, t.beta3, t.beta4
    vals = (
        t.alpha @ e - 1, b1 @ e - 1, b2 @ e, b3 @ e, b4 @ e,
        b1 @ b1e, b2 @ b1e - 1, b3 @ b1e, b4 @ b1e,
        t.alpha @ a0e - 0.5, t.alpha @ b0e - 1, t.alpha @ (b0e * b0e) - 1.5,
        b1 @ a1e - 1, b2 @ a1e, b3 @ a1e + 1, b4 @ a1e,
        b1 @ (b1e * b1e) - 1, b2 @ (b1e * b1e), b3 @ (b1e * b1e) + 1, b4 @ (b1e * b1e) - 2,
        b1 @ b1b1e, b2 @ b1b1e, b3 @ b1b1e, b4 @ b1b1e - 1,
        0.5 * (b1 @ a1b0e) + (b3 @ a1b0e) / 3.0,
    )
    return {k: abs(float(v)) for k, v in zip(SRI_CONDITIONS, vals)}


def check_order_conditions(t) -> dict:
    if isinstance(t, SRITableau):
        return check_order_conditions_sri(t)
    return check_order_conditions_sra(t)


# ---------------------------------------------------------------------------
# JSON round trip

_SRA_ARRAYS = ("A0", "B0", "alpha", "beta1", "beta2", "c0", "c1", "errD_weights")
_SRI_ARRAYS = ("A0", "A1", "B0", "B1", "alpha", "beta1", "beta2", "beta3", "beta4",
               "c0", "c1", "errD_weights")


def to_dict(t) -> dict:
    keys = _SRI_ARRAYS if isinstance(t, SRITableau) else _SRA_ARRAYS
    d = {"name": t.name, "family": t.family, "provenance": t.provenance,
         "flags": t.flags, "order_exponent": t.order_exponent,
         "detection_stages": list(t.detection_stages) if t.detection_stages else None}
    for k in keys:
        d[k] = getattr(t, k).tolist()
    if isinstance(t, SRATableau) and t.A0_explicit is not None:
        d["A0_explicit"] = t.A0_explicit.tolist()
    return d


def from_dict(d: dict):
    family = d.get("family", "SRA")
    keys = _SRI_ARRAYS if family == "SRI" else _SRA_ARRAYS
    try:
        kw = {k: np.array(d[k], dtype=float) for k in keys}
    except KeyError as exc:
        raise InputError(f"tableau JSON lacks field {exc.args[0]!r}") from None
    stages = d.get("detection_stages")
    kw.update(
        name=d["name"],
        provenance=d.get("provenance", EXTERNAL),
        l_stable_claimed=bool(d.get("flags", {}).get("l_stable_claimed", False)),
        detection_stages=tuple(stages) if stages else None,
    )
    if "order_exponent" in d:
        kw["order_exponent"] = float(d["order_exponent"])
    if family == "SRI":
        return SRITableau(**kw)
    if d.get("A0_explicit") is not None:
        kw["A0_explicit"] = np.array(d["A0_explicit"], dtype=float)
    return SRATableau(**kw)


def dumps(t) -> str:
    return json.dumps(to_dict(t), indent=2)


def loads(text: str):
    return from_dict(json.loads(text))
