import warnings

import numpy as np
import pytest

from tokendyn.attention import AttentionParams
from tokendyn.dynamics import (
    DEFAULT_REGULARIZATION,
    ModelConfig,
    euler_step,
    recorded_layers,
    run_common_noise,
    run_coupled_pair,
    run_euler,
    run_pure_noise,
    run_refinement_ladder,
    run_transformer,
    transformer_step,
)
from tokendyn.errors import OutOfDomain
from tokendyn.kernel import KernelSpec, kappa
from tokendyn.mlp import sample_mlp
from tokendyn.noise import sample_field
from tokendyn.seeding import TrialStreams
from tokendyn.sphere import sample_uniform_sphere

SPEC = KernelSpec("relu", 0.1, 0.1, 4)
ATTN = AttentionParams.isotropic(4, 1.0)


def _cfg(scheme, depth=16, horizon=0.5, width=32, **kw):
    return ModelConfig(depth, horizon, kw.pop("attention", ATTN), kw.pop("kernel", SPEC),
                       width=width if scheme == "transformer_discrete" else None, scheme=scheme, **kw)


def test_recorded_layers():
    np.testing.assert_array_equal(recorded_layers(10, 4), [0, 4, 8, 10])
    np.testing.assert_array_equal(recorded_layers(8, 4), [0, 4, 8])
    with pytest.raises(ValueError):
        recorded_layers(8, 0)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(8, 1.0, ATTN, SPEC, scheme="transformer_discrete")
    with pytest.raises(ValueError):
        ModelConfig(8, 1.0, AttentionParams.isotropic(3, 1.0), SPEC, scheme="euler_ambient")
    cfg = _cfg("euler_ambient", depth=4, horizon=1.0)
    assert cfg.dt == 0.25 and cfg.alpha2 == 0.5
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert not cfg.check_step_size()
    assert caught and issubclass(caught[0].category, RuntimeWarning)
    assert cfg.replace(depth=1000).check_step_size()


# --------------------------------------------------------------------- regularization


def test_regularization_profiles():
    reg = DEFAULT_REGULARIZATION
    r = np.linspace(0, 4, 4001)
    rho = reg.cutoff_profile(r)
    assert np.all(rho[r <= 1.5] == 1.0) and np.all(rho[r >= 2.0] == 0.0)
    assert np.all(np.diff(rho) <= 0)
    t = reg.truncation_profile(r)
    np.testing.assert_array_equal(t[r <= 2.0], r[r <= 2.0])
    assert np.all(t[r >= 3.0] == 3.0)
    assert np.all(np.diff(t) >= 0) and t.max() <= 3.0
    # C1 at the seams
    h = 1e-6
    assert abs((reg.truncation_profile(2 + h) - reg.truncation_profile(2)) / h - 1) < 1e-4
    assert abs(reg.truncation_profile(3) - reg.truncation_profile(3 - h)) / h < 1e-4
    x = np.array([[0.0, 5.0, 0.0, 0.0], [0.1, 0.2, 0.0, 0.0]])
    np.testing.assert_allclose(reg.truncate(x), [[0, 3, 0, 0], [0.1, 0.2, 0, 0]])


# --------------------------------------------------------------------- discrete transformer


def test_transformer_stays_on_sphere_and_is_deterministic(rng):
    init = sample_uniform_sphere(rng, 10, 4)
    cfg = _cfg("transformer_discrete")
    a = run_transformer(cfg, init, TrialStreams(3, 1), record_stride=4)
    b = run_transformer(cfg, init, TrialStreams(3, 1), record_stride=4)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_allclose(np.linalg.norm(a.states, axis=2), 1.0, atol=1e-14)
    assert a.states.shape == (5, 10, 4)
    np.testing.assert_array_equal(a.recorded_layers, [0, 4, 8, 12, 16])
    c = run_transformer(cfg, init, TrialStreams(3, 2), record_stride=4)
    assert not np.array_equal(a.final, c.final)


def test_transformer_without_mlp_follows_attention(rng):
    x = sample_uniform_sphere(rng, 6, 4).points
    mlp = sample_mlp(rng, KernelSpec("zero", 0.0, 0.0, 4), 4)
    out = transformer_step(x, AttentionParams.isotropic(4, 0.0, scale=0.0), mlp, 0.1).points
    np.testing.assert_allclose(out, x, atol=1e-15)


@pytest.mark.parametrize("scheme", ["transformer_discrete", "euler_ambient", "euler_projected"])
def test_exchangeability_is_bit_exact(scheme, rng):
    init = sample_uniform_sphere(rng, 9, 4).points
    perm = rng.permutation(9)
    cfg = _cfg(scheme)
    run = run_transformer if scheme == "transformer_discrete" else run_euler
    a = run(cfg, init, TrialStreams(0, 0), 4)
    b = run(cfg, init[perm], TrialStreams(0, 0), 4)
    np.testing.assert_array_equal(b.states, a.states[:, perm])


def test_common_noise_exchangeable_across_systems(rng):
    ref = sample_uniform_sphere(rng, 12, 3).points
    cfg = _cfg("euler_projected", kernel=KernelSpec("relu", 0.1, 0.1, 3),
               attention=AttentionParams.isotropic(3, 1.0))
    recs = run_common_noise(cfg, [ref[:4], ref], TrialStreams(0, 5), 8)
    perm = rng.permutation(12)
    recs2 = run_common_noise(cfg, [ref[:4][::-1], ref[perm]], TrialStreams(0, 5), 8)
    np.testing.assert_array_equal(recs2[0].states, recs[0].states[:, ::-1])
    np.testing.assert_array_equal(recs2[1].states, recs[1].states[:, perm])
    # shared noise: a token present in both systems sees the same field, so the
    # subsystem trajectories differ only through the attention measure
    no_attn = _cfg("pure_noise", kernel=KernelSpec("relu", 0.1, 0.1, 3),
                   attention=AttentionParams.isotropic(3, 1.0))
    r = run_common_noise(no_attn, [ref[:4], ref], TrialStreams(0, 5), 8)
    np.testing.assert_array_equal(r[0].states, r[1].states[:, :4])


# --------------------------------------------------------------------- Euler-Maruyama


def test_ito_correction_keeps_mean_square_norm(rng):
    # one ambient step: E|X+|^2 = 1 + O(dt^2) with the correction, 1 + O(dt) without
    spec = KernelSpec("relu", 0.1, 0.1, 4)
    x = np.repeat(sample_uniform_sphere(rng, 1, 4).points, 4000, axis=0)
    dt = 1e-2
    attn = AttentionParams.isotropic(4, 0.0, scale=0.0)
    k1 = kappa(spec, 1.0)
    for ito, expected in ((True, 0.0), (False, dt * k1 * 3)):
        g = np.sqrt(k1) * rng.standard_normal(x.shape)
        out = euler_step(x, attn, spec, DEFAULT_REGULARIZATION, g, dt, "ambient", ito).points
        sq = np.sum(out**2, axis=1) - 1
        assert abs(sq.mean() - expected) < 4 * sq.std() / np.sqrt(sq.size) + 2 * dt**2


def test_euler_step_checks_field_points(rng):
    x = sample_uniform_sphere(rng, 5, 4).points
    field = sample_field(rng, SPEC, x)
    out = euler_step(x, ATTN, SPEC, DEFAULT_REGULARIZATION, field, 0.01, "projected")
    np.testing.assert_allclose(np.linalg.norm(out.points, axis=1), 1.0, atol=1e-14)
    with pytest.raises(ValueError):
        euler_step(x[::-1], ATTN, SPEC, DEFAULT_REGULARIZATION, field, 0.01)


def test_ambient_euler_out_of_domain_reports_location(rng):
    init = sample_uniform_sphere(rng, 4, 4)
    cfg = _cfg("euler_ambient", depth=1, horizon=200.0)
    with pytest.raises(OutOfDomain) as info:
        run_euler(cfg, init, TrialStreams(0, 7))
    assert info.value.trial == 7 and info.value.layer == 0
    assert "trial 7, layer 0" in str(info.value)


def test_pure_noise_has_no_attention(rng):
    init = sample_uniform_sphere(rng, 6, 4)
    a = run_pure_noise(SPEC, init, 16, 0.5, TrialStreams(0, 0))
    cfg = _cfg("euler_projected", attention=AttentionParams.isotropic(4, 1.0, scale=0.0))
    b = run_euler(cfg, init, TrialStreams(0, 0))
    np.testing.assert_array_equal(a.final, b.final)


def test_euler_attention_ode_limit(rng):
    # without noise and Ito drift the scheme integrates the attention ODE; halving
    # dt halves the gap to a fine reference (first order)
    spec = KernelSpec("zero", 0.0, 0.0, 4)
    init = sample_uniform_sphere(rng, 6, 4)
    finals = {}
    for depth in (32, 64, 2048):
        cfg = _cfg("euler_projected", depth=depth, horizon=1.0, kernel=spec)
        finals[depth] = run_euler(cfg, init, TrialStreams(0, 0)).final
    e1 = np.abs(finals[32] - finals[2048]).max()
    e2 = np.abs(finals[64] - finals[2048]).max()
    assert 1.6 < e1 / e2 < 2.4


# --------------------------------------------------------------------- coupled pair and ladder


def test_coupled_pair_error_shrinks_with_width(rng):
    init = sample_uniform_sphere(rng, 6, 4)
    euler = _cfg("euler_ambient", depth=64, horizon=0.5)
    errs = []
    for m in (16, 1024):
        a, b, err = run_coupled_pair(_cfg("transformer_discrete", depth=64, horizon=0.5, width=m), euler,
                                     init, TrialStreams(0, 0))
        assert err[0] == 0.0 and err.shape == (65,)
        np.testing.assert_allclose(np.linalg.norm(a.states, axis=2), 1.0, atol=1e-13)
        errs.append(err.max())
    assert errs[1] < errs[0]
    with pytest.raises(ValueError):
        run_coupled_pair(euler, euler, init, TrialStreams(0, 0))


def test_refinement_ladder_shapes_and_reproducibility(rng):
    init = sample_uniform_sphere(rng, 5, 4)
    cfg = _cfg("euler_ambient", depth=8, horizon=0.5)
    a = run_refinement_ladder(cfg, 3, init, TrialStreams(0, 0))
    b = run_refinement_ladder(cfg, 3, init, TrialStreams(0, 0))
    np.testing.assert_array_equal(a.gaps, b.gaps)
    np.testing.assert_array_equal(a.depths, [8, 16, 32, 64])
    assert np.all(a.gaps > 0) and len(a.finals) == 4
    with pytest.raises(ValueError):
        run_refinement_ladder(cfg, 0, init, TrialStreams(0, 0))


def test_ladder_levels_share_one_brownian_path(rng):
    # with a constant field (zero activation, output bias only) every level sees
    # the same increment per unit time, so without attention the levels agree
    # to first order in dt
    spec = KernelSpec("zero", 0.0, 0.3, 4)
    init = sample_uniform_sphere(rng, 3, 4)
    cfg = _cfg("euler_projected", depth=64, horizon=0.25, kernel=spec,
               attention=AttentionParams.isotropic(4, 0.0, scale=0.0))
    lad = run_refinement_ladder(cfg, 2, init, TrialStreams(0, 0))
    assert lad.gaps.max() < 1e-3
