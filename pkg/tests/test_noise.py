import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tokendyn.errors import DegenerateCovariance, GramNotPSD, PointMismatch
from tokendyn.kernel import KernelSpec, kernel_gram
from tokendyn.mlp import mlp_forward, sample_mlp
from tokendyn.noise import (
    bures_w2_squared,
    canonicalize,
    coupled_layer_fields,
    factor_gram,
    gaussian_ot_map,
    refine_field_pair,
    sample_field,
)
from tokendyn.sphere import sample_uniform_sphere


def _spd(r, p, rank=None):
    rank = p if rank is None else rank
    a = r.standard_normal((p, rank))
    return a @ a.T / rank + (1e-3 * np.eye(p) if rank == p else 0.0)


# --------------------------------------------------------------------- canonical points


def test_canonicalize_sorts_and_merges(rng):
    x = rng.standard_normal((6, 3))
    pts = np.concatenate([x, x[:2], x[4:5] + 1e-14])
    canon = canonicalize(pts)
    assert canon.unique.shape == (6, 3)
    np.testing.assert_allclose(canon.unique[canon.inverse], pts, atol=1e-12)
    order = np.lexsort(canon.unique.T[::-1])
    np.testing.assert_array_equal(order, np.arange(6))
    # the canonical set does not depend on the input order
    perm = rng.permutation(pts.shape[0])
    np.testing.assert_array_equal(canonicalize(pts[perm]).unique, canon.unique)


# --------------------------------------------------------------------- Gram factorization


def test_factor_gram_cases(rng):
    g = _spd(rng, 5)
    root, jitter = factor_gram(g)
    assert jitter == 0.0
    np.testing.assert_allclose(root @ root.T, g, atol=1e-13)
    low = _spd(rng, 6, rank=2)
    root, jitter = factor_gram(low)
    np.testing.assert_allclose(root @ root.T, low, atol=1e-8 * np.trace(low))
    root, jitter = factor_gram(np.zeros((3, 3)))
    assert not root.any()
    with pytest.raises(GramNotPSD):
        factor_gram(np.diag([1.0, -1.0]))


# --------------------------------------------------------------------- field sampler


@pytest.mark.parametrize("act", ["relu", "tanh"])
def test_field_covariance_monte_carlo(act, rng):
    spec = KernelSpec(act, 0.1, 0.2, 4)
    pts = np.concatenate([sample_uniform_sphere(rng, 3, 4).points, [[0.0, 0.0, 1.7, 0.0]]])
    gram = kernel_gram(spec, pts)
    draws = np.array([sample_field(rng, spec, pts).values for _ in range(3000)])  # (n, P, d)
    samples = draws.transpose(0, 2, 1).reshape(-1, pts.shape[0])
    emp = samples.T @ samples / samples.shape[0]
    # 3 sigma per entry; Var(g_i g_j) = K_ii K_jj + K_ij^2
    se = np.sqrt((np.outer(np.diag(gram), np.diag(gram)) + gram**2) / samples.shape[0])
    assert np.all(np.abs(emp - gram) <= 3 * se)
    assert np.all(np.abs(samples.mean(axis=0)) <= 3 * np.sqrt(np.diag(gram) / samples.shape[0]))


def test_field_at_duplicates_and_permutations(rng):
    spec = KernelSpec("relu", 0.1, 0.1, 3)
    x = sample_uniform_sphere(rng, 8, 3).points
    pts = np.concatenate([x, x[[1, 5]]])
    s = sample_field(np.random.default_rng(1), spec, pts)
    np.testing.assert_array_equal(s.values[8:], s.values[[1, 5]])
    perm = rng.permutation(pts.shape[0])
    sp = sample_field(np.random.default_rng(1), spec, pts[perm])
    np.testing.assert_array_equal(sp.values, s.values[perm])
    with pytest.raises(ValueError):
        sample_field(rng, spec, 4 * x)


# --------------------------------------------------------------------- Gaussian OT


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_ot_map_pushes_forward(p, seed):
    r = np.random.default_rng(seed)
    s1, s2 = _spd(r, p), _spd(r, p)
    c = gaussian_ot_map(s1, s2)
    a = c.transport_map
    np.testing.assert_allclose(a @ s1 @ a.T, s2, atol=1e-8 * max(1.0, np.abs(s2).max()))
    np.testing.assert_allclose(a, a.T, atol=1e-10 * np.abs(a).max())
    assert np.linalg.eigvalsh(0.5 * (a + a.T)).min() > -1e-8 * np.abs(a).max()
    # the transport cost of the map equals the Bures distance
    cost = np.trace(s1) + np.trace(s2) - 2 * np.trace(a @ s1)
    assert cost == pytest.approx(c.w2_squared, abs=1e-8 * (np.trace(s1) + np.trace(s2)))
    assert np.abs(c.residual_root).max() < 1e-12 * max(1.0, np.abs(s2).max())


def test_ot_map_diagonal_and_identity(rng):
    s1 = np.diag([1.0, 4.0, 0.25])
    s2 = np.diag([4.0, 1.0, 1.0])
    c = gaussian_ot_map(s1, s2)
    np.testing.assert_allclose(c.transport_map, np.diag([2.0, 0.5, 2.0]), atol=1e-14)
    assert c.w2_squared == pytest.approx(1 + 1 + 0.25, rel=1e-12)
    s = _spd(rng, 4)
    assert bures_w2_squared(s, s) == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(gaussian_ot_map(s, s).transport_map, np.eye(4), atol=1e-9)


def test_ot_map_rank_deficient_source(rng):
    s1 = _spd(rng, 6, rank=2)
    s2 = _spd(rng, 6)
    c = gaussian_ot_map(s1, s2)
    marginal = c.transport_map @ s1 @ c.transport_map.T + c.residual_root @ c.residual_root.T
    np.testing.assert_allclose(marginal, s2, atol=1e-8)
    with pytest.raises(DegenerateCovariance):
        gaussian_ot_map(s1, np.zeros((6, 6)))


def test_coupled_layer_fields_marginals(rng):
    spec = KernelSpec("relu", 0.1, 0.2, 3)
    pts = sample_uniform_sphere(rng, 3, 3).points
    gram = kernel_gram(spec, pts)
    finite_s, limit_s = [], []
    for _ in range(2500):
        mlp = sample_mlp(rng, spec, 32)
        f, g = coupled_layer_fields(rng, mlp, spec, pts)
        np.testing.assert_allclose(f, mlp_forward(mlp, pts), rtol=1e-13)
        finite_s.append(f)
        limit_s.append(g)
    for arr in (np.array(finite_s), np.array(limit_s)):
        samples = arr.transpose(0, 2, 1).reshape(-1, 3)
        emp = samples.T @ samples / samples.shape[0]
        se = np.sqrt((np.outer(np.diag(gram), np.diag(gram)) + gram**2) / samples.shape[0])
        assert np.all(np.abs(emp - gram) <= 4 * se)
    # the coupling keeps the two close: the gap is far below the independent value
    gap = np.mean((np.array(finite_s) - np.array(limit_s)) ** 2)
    assert gap < 0.2 * np.mean(np.diag(gram))


def test_coupled_fields_need_matching_spec(rng):
    mlp = sample_mlp(rng, KernelSpec("relu", 0.1, 0.1, 3), 8)
    with pytest.raises(ValueError):
        coupled_layer_fields(rng, mlp, KernelSpec("tanh", 0.1, 0.1, 3), np.eye(3))


def test_refine_field_pair(rng):
    spec = KernelSpec("relu", 0.1, 0.1, 3)
    pa = sample_uniform_sphere(rng, 5, 3).points
    pb = sample_uniform_sphere(rng, 4, 3).points
    coarse, fa, fb = refine_field_pair(np.random.default_rng(3), spec, pa[[0, 2]], (pa, pb))
    r = np.random.default_rng(3)
    union = np.concatenate([pa, pb])
    da = sample_field(r, spec, union).values
    db = sample_field(r, spec, union).values
    np.testing.assert_array_equal(fa.values, da[:5])
    np.testing.assert_array_equal(fb.values, db[5:])
    np.testing.assert_allclose(coarse.values, (da[[0, 2]] + db[[0, 2]]) / np.sqrt(2), rtol=1e-15)
    with pytest.raises(PointMismatch):
        refine_field_pair(rng, spec, -pa[:1], (pa, pb))
