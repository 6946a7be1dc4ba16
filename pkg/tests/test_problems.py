import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sosrk import problems as P
from sosrk.errors import InputError


def _fd(f, t, x, eps=1e-6):
    x = np.asarray(x, float)
    J = np.empty((x.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = eps * max(1.0, abs(x[j]))
        J[:, j] = (f(t, x + e) - f(t, x - e)) / (2 * e[j])
    return J


@pytest.mark.parametrize("ctor,x", [
    (P.additive_test, [0.7]),
    (P.diagonal_test, [0.7]),
    (P.pathwise_stiff, [1.3]),
    (P.lotka_additive, [1.2, 0.8]),
    (lambda: P.van_der_pol_additive(mu=10.0), [0.4, -1.1]),
])
def test_analytic_jacobians_match_finite_differences(ctor, x):
    p = P.unwrap(ctor())
    J = p.jac(0.3, np.array(x))
    assert np.allclose(J, _fd(p.f, 0.3, x), rtol=1e-6, atol=1e-6)


def test_additive_exact_solves_ode_without_noise():
    p = P.additive_test(alpha=0.3)
    # with W = 0 the solution follows x' = beta/sqrt(1+t) - x/(2(1+t))
    t = 0.8
    h = 1e-6
    d = (p.exact(t + h, np.zeros(1)) - p.exact(t - h, np.zeros(1))) / (2 * h)
    assert d == pytest.approx(p.f(t, p.exact(t, np.zeros(1))), rel=1e-6)


def test_split_parts_sum_to_full_drift():
    p = P.split_additive_test()
    full = P.additive_test()
    f1, f2 = p.imex_split
    x = np.array([0.9])
    assert np.allclose(f1(0.4, x) + f2(0.4, x), full.f(0.4, x))


def test_diagonal_exact_at_start_and_consistency():
    p = P.diagonal_test(alpha=0.1, beta=0.05)
    assert p.exact(0.0, np.zeros(1)) == pytest.approx(0.5)
    # E[x(1)] = x0 e^alpha
    W = np.random.default_rng(0).standard_normal(400_000)
    assert p.exact(1.0, W).mean() == pytest.approx(0.5 * np.exp(0.1), rel=1e-3)


def test_gbm_exact():
    p = P.gbm_affine(mu=0.5, sigma=0.5)
    assert p.noise_kind == "affine"
    assert p.exact(1.0, np.array([0.0]))[0] == pytest.approx(np.exp(0.5 - 0.125))


def test_pathwise_stiff_stable_states():
    p = P.pathwise_stiff()
    for x in (0.0, 2.0):
        assert p.f(0, np.array([x]))[0] == 0.0
        assert p.jac(0, np.array([x]))[0, 0] == pytest.approx(-2000.0)
    assert p.jac(0, np.array([1.0]))[0, 0] == pytest.approx(1000.0)
    assert P.pathwise_stiff(multiplicative=True).noise_kind == "diagonal"


def test_lotka_variants():
    assert P.lotka_multiplicative(literal=True).noise_kind == "additive"
    p = P.lotka_multiplicative(sigma=0.2)
    assert np.allclose(p.g(0, np.array([2.0, 3.0])), [0.4, 0.6])
    a = P.lotka_affine()
    assert np.allclose(a.sigma_M, [0.1, 0.0]) and np.allclose(a.sigma_A, [0.01, 0.01])


def test_batched_drifts_keep_shape():
    x = np.ones((7, 2))
    for p in (P.lotka_additive(), P.van_der_pol_additive()):
        assert p.f(0, x).shape == (7, 2)
        assert p.jac(0, x).shape == (7, 2, 2)


def test_problem_validation():
    f = lambda t, x: x
    with pytest.raises(InputError):
        P.SDEProblem(f, f, [1.0], (1.0, 0.0))
    with pytest.raises(InputError):
        P.SDEProblem(f, f, [1.0], (0.0, 1.0), noise_kind="weird")
    with pytest.raises(InputError):
        P.SDEProblem(f, f, [1.0], (0.0, 1.0), noise_kind="affine")
    with pytest.raises(InputError):
        P.SDEProblem(f, f, [1.0, 2.0], (0.0, 1.0), mass_matrix=np.eye(3))
    with pytest.raises(InputError):
        P.affine_problem(f, -1.0, 0.0, [1.0], (0.0, 1.0))
    p = P.SDEProblem(f, f, [1.0, 2.0], (0, 1), mass_matrix=np.diag([1.0, 0.0]))
    assert p.singular_mass and p.m == 2
    assert P.SDEProblem(f, f, [1.0, 2.0], (0, 1), noise_kind="scalar").m == 1


def test_emt_model():
    p = P.emt_model()
    assert p.d == len(P.EMT_SPECIES) == 19
    assert np.all(p.x0 >= 0) and np.all(np.isfinite(p.x0))
    # after pre-equilibration every species changes by well under 5% per unit time,
    # whereas the zero state is far from rest
    assert np.max(np.abs(p.f(0.0, p.x0)) / p.x0) < 0.05
    assert np.max(np.abs(p.f(0.0, np.zeros(19)))) > 1.0
    assert np.allclose(p.g(0, p.x0), 0.05 * p.x0)
    assert p.f(0.0, np.tile(p.x0, (3, 1))).shape == (3, 19)
    with pytest.raises(InputError):
        P.emt_model(not_a_param=1.0)


def test_neumann_laplacian_properties():
    L = P.neumann_laplacian(6, 4, 0.5).toarray()
    assert np.allclose(L, L.T)
    assert np.allclose(L.sum(1), 0.0)           # zero flux: constants are in the kernel
    assert np.max(np.abs(L).sum(1)) == pytest.approx(8 / 0.25)
    Lk = P.neumann_laplacian(6, 4, 0.5, leak=0.2).toarray()
    right = np.arange(24).reshape(4, 6)[:, -1]
    assert np.allclose((L - Lk).diagonal()[right], 0.4)
    assert np.allclose(np.delete((L - Lk).diagonal(), right), 0.0)


def test_retinoic_spde():
    p = P.retinoic_spde(nx=10, ny=4, T=1.0)
    n = 40
    assert p.d == 6 * n
    assert p.x_coords[0] == pytest.approx(40.0 - 5.0 * 5)
    x = np.full(p.d, 0.5)
    g = p.g(0, x).reshape(6, n)
    assert np.allclose(g[0], 0.1) and np.allclose(g[3], 0.05)
    assert np.allclose(g[[1, 2, 4, 5]], 0.0)
    # production only right of the edge
    assert np.all(p.beta_field.reshape(4, 10)[:, p.x_coords > 40.0] == 1.0)
    assert np.all(p.beta_field.reshape(4, 10)[:, p.x_coords <= 40.0] == 0.0)
    assert P.retinoic_spde(nx=100, ny=3, T=1.0).x_coords[0] == -100.0
    with pytest.raises(InputError):
        P.retinoic_spde(nx=2)
    with pytest.raises(InputError):
        P.retinoic_spde(zzz=1)


@given(st.dictionaries(st.sampled_from(["a", "b", "c"]),
                       st.one_of(st.integers(-100, 100),
                                 st.floats(allow_nan=False, allow_infinity=False), st.booleans()),
                       max_size=3))
@settings(max_examples=100)
def test_parse_params_round_trip(d):
    text = ",".join(f"{k}={str(v).lower() if isinstance(v, bool) else repr(v)}" for k, v in d.items())
    back = P.parse_params(text)
    assert back.keys() == d.keys()
    for k in d:
        assert back[k] == d[k]


def test_parse_params_errors():
    with pytest.raises(InputError):
        P.parse_params("a")
    with pytest.raises(InputError):
        P.parse_params("a=x")


def test_registry_lookup():
    assert P.get_problem("additive_test", alpha=0.2).params["alpha"] == 0.2
    with pytest.raises(InputError):
        P.get_problem("nope")
    with pytest.raises(InputError):
        P.get_problem("additive_test", bogus=1)
