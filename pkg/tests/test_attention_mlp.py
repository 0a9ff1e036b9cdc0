import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokendyn.attention import AttentionParams, attention, attention_field
from tokendyn.kernel import KernelSpec, kappa_ambient
from tokendyn.mlp import MlpParams, hidden_activations, mlp_forward, sample_mlp
from tokendyn.sphere import sample_uniform_sphere


def _naive_attention(params, x, q):
    out = np.zeros_like(q)
    for i, qi in enumerate(q):
        logits = np.array([(params.q_matrix @ qi) @ (params.k_matrix @ y) for y in x])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = params.scale * sum(wj * (params.v_matrix @ y) for wj, y in zip(w, x))
    return out


def test_attention_matches_naive_loop(rng):
    d = 5
    p = AttentionParams(rng.standard_normal((d, d)), rng.standard_normal((d, d)), rng.standard_normal((d, d)), 0.7)
    x = sample_uniform_sphere(rng, 9, d).points
    q = rng.standard_normal((4, d))
    np.testing.assert_allclose(attention_field(p, x, q), _naive_attention(p, x, q), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(attention(p, x, 3), attention_field(p, x)[3], rtol=1e-15)
    with pytest.raises(IndexError):
        attention(p, x, 9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(2, 8), st.floats(0.0, 50.0), st.integers(0, 2**32 - 1))
def test_isotropic_attention_is_convex_combination(n, d, beta, seed):
    r = np.random.default_rng(seed)
    x = sample_uniform_sphere(r, n, d).points
    out = attention_field(AttentionParams.isotropic(d, beta), x)
    assert np.all(np.isfinite(out))
    # a convex combination of unit vectors has norm at most one
    assert np.all(np.linalg.norm(out, axis=1) <= 1 + 1e-12)
    if n == 1:
        np.testing.assert_allclose(out, x, atol=1e-15)


def test_attention_stable_for_huge_logits(rng):
    x = sample_uniform_sphere(rng, 16, 3).points
    out = attention_field(AttentionParams.isotropic(3, 1e6), x)
    # each token attends only to itself
    np.testing.assert_allclose(out, x, atol=1e-12)


def test_attention_permutation_equivariant(rng):
    x = sample_uniform_sphere(rng, 12, 4).points
    p = AttentionParams.isotropic(4, 2.0, scale=-1.0)
    perm = rng.permutation(12)
    np.testing.assert_allclose(attention_field(p, x[perm]), attention_field(p, x)[perm], rtol=1e-13, atol=1e-15)


def test_attention_params_validation():
    with pytest.raises(ValueError):
        AttentionParams(np.eye(3), np.eye(3), np.eye(2))
    with pytest.raises(ValueError):
        AttentionParams.isotropic(3, -1.0)
    p = AttentionParams.isotropic(3, 2.0, scale=0.0)
    np.testing.assert_allclose(p.qk, 2.0 * np.eye(3), rtol=1e-15)
    assert attention_field(p, np.eye(3)).sum() == 0.0


# --------------------------------------------------------------------- MLP


def test_mlp_forward_formula(rng):
    spec = KernelSpec("tanh", 0.1, 0.2, 3)
    mlp = sample_mlp(rng, spec, 16)
    x = rng.standard_normal((4, 3))
    ref = np.array([mlp.w_matrix @ np.tanh(mlp.u_matrix @ xi / np.sqrt(3) + mlp.bias_u) / 4 + mlp.bias_w for xi in x])
    np.testing.assert_allclose(mlp_forward(mlp, x), ref, rtol=1e-13)
    assert hidden_activations(mlp, x).shape == (4, 16)
    assert mlp.width == 16 and mlp.dim == 3


def test_mlp_draw_is_deterministic():
    spec = KernelSpec("relu", 0.1, 0.1, 4)
    a = sample_mlp(np.random.default_rng(5), spec, 8)
    b = sample_mlp(np.random.default_rng(5), spec, 8)
    for name in ("u_matrix", "w_matrix", "bias_u", "bias_w"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    with pytest.raises(ValueError):
        sample_mlp(np.random.default_rng(0), spec, 0)
    with pytest.raises(ValueError):
        MlpParams(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), np.zeros(2), spec)


@pytest.mark.parametrize("act", ["relu", "sigmoid"])
def test_mlp_output_covariance_is_kernel(act, rng):
    # Cov(G_k(x), G_k(y)) = K(x, y) holds at every finite width
    spec = KernelSpec(act, 0.2, 0.3, 3)
    x = rng.standard_normal((3, 3)) * 0.7
    draws = 6000
    out = np.array([mlp_forward(sample_mlp(rng, spec, 4), x) for _ in range(draws)])  # (draws, 3, d)
    samples = out.transpose(0, 2, 1).reshape(-1, 3)  # coordinates are iid replicas
    emp = samples.T @ samples / samples.shape[0]
    for i in range(3):
        for j in range(3):
            prod = samples[:, i] * samples[:, j]
            se = prod.std() / np.sqrt(prod.size)
            assert abs(emp[i, j] - kappa_ambient(spec, x[i], x[j])) < 4 * se
