import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import eval_chebyt, eval_legendre

from tokendyn.errors import MissingDerivative, NotDissipative, QuadratureUnstable
from tokendyn.kernel import (
    ACTIVATIONS,
    Activation,
    KernelSpec,
    dissipation_profile,
    dissipation_rate,
    gegenbauer_expand,
    gegenbauer_norms,
    gegenbauer_polynomial,
    harmonic_dimension,
    kappa,
    kappa_ambient,
    kappa_ambient_diag,
    kappa_prime_one,
    kernel_gram,
    lyapunov_constants,
    relu_closed_forms,
    zonal_interpolant,
)
from tokendyn.sphere import layer_normalize

SMOOTH = ("tanh", "sigmoid", "silu")


def _mc_kernel(act, x, y, su, sw, n, rng):
    """Monte Carlo ``E[act(u.x/sqrt d + b) act(u.y/sqrt d + b)] + sw^2`` and its standard error."""
    d = x.size
    u = rng.standard_normal((n, d))
    b = su * rng.standard_normal(n)
    prod = act(u @ x / np.sqrt(d) + b) * act(u @ y / np.sqrt(d) + b)
    return prod.mean() + sw**2, prod.std() / np.sqrt(n)


@pytest.mark.parametrize("act", ["relu", "tanh", "sigmoid", "silu"])
def test_kernel_matches_monte_carlo(act, rng):
    spec = KernelSpec(act, 0.3, 0.2, 5)
    x = rng.standard_normal(5) * 0.8
    y = rng.standard_normal(5) * 1.3
    est, se = _mc_kernel(spec.activation, x, y, 0.3, 0.2, 400_000, rng)
    assert abs(kappa_ambient(spec, x, y) - est) < 4 * se


def test_relu_closed_form_agrees_with_quadrature_path(rng):
    # the same function without the registry identity takes the quadrature path
    plain = Activation("relu_quad", ACTIVATIONS["relu"].fn, ACTIVATIONS["relu"].deriv, 1.0)
    for d, s in [(5, 0.0), (5, 0.1), (64, 0.1)]:
        t = np.linspace(-1, 1, 41)
        closed = kappa(KernelSpec("relu", s, s, d), t)
        quad = kappa(KernelSpec(plain, s, s, d), t)
        # the kink limits Gauss-Hermite to algebraic accuracy
        assert np.max(np.abs(quad - closed)) < 1e-2 * closed[-1]


@pytest.mark.parametrize("act", ["relu", "tanh", "sigmoid", "silu", "linear"])
def test_gram_agrees_with_pairwise_kernel(act, rng):
    spec = KernelSpec(act, 0.1, 0.2, 4)
    pts = rng.standard_normal((7, 4))
    pts[3] = pts[2] + 1e-9 * rng.standard_normal(4)
    pts /= np.maximum(np.linalg.norm(pts, axis=1, keepdims=True) / 2.5, 1.0)
    g = kernel_gram(spec, pts)
    ref = np.array([[kappa_ambient(spec, a, b) for b in pts] for a in pts])
    # order-64 quadrature is not exactly symmetric in the two arguments
    atol = 1e-14 if act in ("relu", "linear") else 1e-9
    np.testing.assert_allclose(g, ref, rtol=1e-12, atol=atol)
    np.testing.assert_array_equal(g, g.T)
    np.testing.assert_allclose(np.diag(g), kappa_ambient_diag(spec, pts), rtol=1e-12)
    g0 = kernel_gram(spec, pts, include_bias=False)
    np.testing.assert_allclose(g - g0, 0.04, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["relu", "tanh", "sigmoid", "silu"]), st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_gram_is_positive_semidefinite(act, d, seed):
    r = np.random.default_rng(seed)
    spec = KernelSpec(act, 0.1, 0.1, d)
    pts = layer_normalize(r.standard_normal((12, d))) * r.uniform(0.5, 3.0, (12, 1))
    lam = np.linalg.eigvalsh(kernel_gram(spec, pts))
    assert lam.min() > -1e-12 * lam.max()


def test_kappa_on_sphere_matches_ambient(rng):
    spec = KernelSpec("tanh", 0.1, 0.1, 6)
    x, y = layer_normalize(rng.standard_normal((2, 6)))
    assert kappa(spec, x @ y) == pytest.approx(kappa_ambient(spec, x, y), rel=1e-12)
    with pytest.raises(ValueError):
        kappa(spec, 1.5)


def test_linear_kernel_is_exact():
    spec = KernelSpec("linear", 0.3, 0.2, 5)
    t = np.linspace(-1, 1, 9)
    np.testing.assert_allclose(kappa(spec, t), t / 5 + 0.09 + 0.04, rtol=1e-15)
    assert kappa_prime_one(spec) == pytest.approx(0.2, rel=1e-14)


@pytest.mark.parametrize("act", SMOOTH)
def test_kappa_prime_one_is_derivative_at_one(act):
    spec = KernelSpec(act, 0.1, 0.1, 5)
    h = 1e-5
    fd = (kappa(spec, 1.0) - kappa(spec, 1.0 - h)) / h
    assert kappa_prime_one(spec) == pytest.approx(fd, rel=1e-3)


def test_relu_constants_match_closed_forms_on_grid():
    for d in (3, 5, 16, 64, 128):
        for su in (0.0, 0.05, 0.1, 0.3):
            for sw in (0.0, 0.1, 0.2):
                spec = KernelSpec("relu", su, sw, d)
                vals = lyapunov_constants(spec)
                l1, lb = relu_closed_forms(spec)
                assert abs(vals.lambda_one - l1) <= 1e-10
                assert abs(vals.lambda_bar - lb) <= 1e-10
                assert vals.kappa_prime_one == pytest.approx(0.5 / d, rel=1e-12)


def test_degenerate_activations():
    spec = KernelSpec("zero", 0.1, 0.2, 4)
    assert kappa(spec, 0.3) == pytest.approx(0.04)
    with pytest.raises(MissingDerivative):
        kappa_prime_one(KernelSpec(Activation("nod", np.tanh), 0.0, 0.0, 4))


def test_growth_guard_rejects_misdeclared_lipschitz():
    cube = Activation("cube", lambda y: y**3, lambda y: 3 * y**2, 1.0)
    with pytest.raises(QuadratureUnstable):
        kappa(KernelSpec(cube, 0.0, 0.0, 2), 0.5)


# --------------------------------------------------------------------- Gegenbauer


def test_gegenbauer_special_cases():
    u = np.linspace(-1, 1, 17)
    for n in range(8):
        np.testing.assert_allclose(gegenbauer_polynomial(n, 3, u), eval_legendre(n, u), atol=1e-13)
        np.testing.assert_allclose(gegenbauer_polynomial(n, 2, u), eval_chebyt(n, u), atol=1e-13)
        for d in (4, 7, 64):
            assert gegenbauer_polynomial(n, d, 1.0) == pytest.approx(1.0, abs=1e-13)


def test_harmonic_dimension():
    assert [harmonic_dimension(n, 3) for n in range(5)] == [1, 3, 5, 7, 9]
    assert [harmonic_dimension(n, 2) for n in range(4)] == [1, 2, 2, 2]
    # dimension of homogeneous harmonic polynomials of degree 2 in R^4
    assert harmonic_dimension(2, 4) == 9


@pytest.mark.parametrize("d", [2, 3, 4, 8, 65])
def test_gegenbauer_orthogonality_and_norms(d):
    from scipy.special import roots_jacobi

    x, w = roots_jacobi(60, (d - 3) / 2, (d - 3) / 2)
    table = np.array([gegenbauer_polynomial(n, d, x) for n in range(20)])
    gram = (table * w) @ table.T
    norms = gegenbauer_norms(19, d)
    np.testing.assert_allclose(np.diag(gram), norms, rtol=1e-10)
    off = gram - np.diag(np.diag(gram))
    assert np.max(np.abs(off)) < 1e-12 * norms.max()


def test_expansion_of_linear_kernel():
    exp = gegenbauer_expand(KernelSpec("linear", 0.3, 0.2, 6), 10)
    np.testing.assert_allclose(exp.coefficients[:2], [0.13, 1 / 6], rtol=1e-12)
    assert np.max(np.abs(exp.coefficients[2:])) < 1e-14
    assert exp.reconstruction_error < 1e-13


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_expansion_evaluates_back(act):
    spec = KernelSpec(act, 0.1, 0.1, 4)
    exp = gegenbauer_expand(spec, 80)
    u = np.linspace(-0.99, 0.99, 11)
    tol = 1e-3 if act == "relu" else 1e-10
    np.testing.assert_allclose(exp.evaluate(u), kappa(spec, u), atol=tol * kappa(spec, 1.0))


# --------------------------------------------------------------------- dissipation


def test_dissipation_boundary_limit():
    spec = KernelSpec("relu", 0.1, 0.1, 64)
    rate = dissipation_rate(spec, 1.0)
    lam_bar = lyapunov_constants(spec).lambda_bar
    assert rate.boundary_value == pytest.approx(-lam_bar, rel=1e-14)
    f_near = dissipation_profile(spec, 1.0, 1 - 1e-7)
    assert f_near == pytest.approx(-lam_bar, rel=1e-4)
    u = np.linspace(-1, 1 - 1e-6, 2001)
    assert rate.lambda_bar_prime == pytest.approx(-min(dissipation_profile(spec, 1.0, u).min(), -lam_bar), rel=1e-6)


def test_dissipation_requires_negative_lambda_bar():
    with pytest.raises(NotDissipative):
        dissipation_rate(KernelSpec("relu", 0.0, 0.0, 5), 1.0)
    with pytest.raises(ValueError):
        dissipation_rate(KernelSpec("relu", 0.1, 0.1, 64), 0.0)


@pytest.mark.parametrize("act", ["relu", "tanh", "silu"])
def test_zonal_interpolant_accuracy(act):
    spec = KernelSpec(act, 0.1, 0.1, 5)
    f = zonal_interpolant(spec)
    t = np.linspace(-1, 1, 301)
    np.testing.assert_allclose(f(t), kappa(spec, t), atol=1e-12 * kappa(spec, 1.0))
