"""Integrators for the discrete transformer and its stochastic limit.

Four systems are covered:

* ``transformer_discrete``: the residual update with two radial projections
  per layer and a fresh finite-width MLP per layer;
* ``euler_ambient``: the Euler-Maruyama scheme with regularized coefficients
  in ambient space, driven by the limiting field, without renormalization;
* ``euler_projected``: the same scheme followed by a radial projection;
* ``pure_noise``: projected Euler with attention switched off.

Within a step tokens are processed in lexicographic order and the result is
mapped back, so relabelling the tokens relabels the trajectory bit for bit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, attention_field
from .errors import NumericalFailure, OutOfDomain
from .kernel import KernelSpec, kappa, kappa_ambient_diag
from .mlp import MlpParams, mlp_forward, sample_mlp
from .noise import FieldSample, coupled_layer_fields, sample_field
from .seeding import Role, TrialStreams
from .sphere import AMBIENT_NORM_RANGE, SphericalCloud, as_points, layer_normalize, tangent_project

SCHEMES = ("transformer_discrete", "euler_ambient", "euler_projected", "pure_noise")


# --------------------------------------------------------------------- configuration


@dataclass(frozen=True, eq=False)
class ModelConfig:
    """Depth, horizon, attention, kernel, width and integration scheme."""

    depth: int
    horizon: float
    attention: AttentionParams
    kernel: KernelSpec
    width: int | None = None
    scheme: str = "transformer_discrete"
    ito_correction: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scheme == "transformer_discrete" and (self.width is None or self.width < 1):
            raise ValueError("the discrete transformer needs a width >= 1")
        if self.attention.dim != self.kernel.dim:
            raise ValueError("attention and kernel dimensions differ")

    @property
    def dt(self) -> float:
        return self.horizon / self.depth

    @property
    def alpha1(self) -> float:
        """Attention scaling ``T / L``."""
        return self.horizon / self.depth

    @property
    def alpha2(self) -> float:
        """MLP scaling ``sqrt(T / L)``."""
        return float(np.sqrt(self.horizon / self.depth))

    @property
    def dim(self) -> int:
        return self.kernel.dim

    def step_size_ratio(self) -> float:
        """``dt (|V| |scale| + kappa(1)(d-1)/2)``; values above 0.1 are flagged."""
        k1 = kappa(self.kernel, 1.0)
        a = self.attention
        return self.dt * (a.value_norm * abs(a.scale) + k1 * (self.dim - 1) / 2)

    def check_step_size(self) -> bool:
        """Warn when the step size guard is exceeded; return whether it holds."""
        ratio = self.step_size_ratio()
        if ratio > 0.1:
            warnings.warn(
                f"step size guard exceeded: dt * (|V| |scale| + kappa(1)(d-1)/2) = {ratio:.3g} > 0.1",
                RuntimeWarning,
                stacklevel=2,
            )
            return False
        return True

    def replace(self, **changes) -> "ModelConfig":
        fields = dict(
            depth=self.depth,
            horizon=self.horizon,
            attention=self.attention,
            kernel=self.kernel,
            width=self.width,
            scheme=self.scheme,
            ito_correction=self.ito_correction,
        )
        fields.update(changes)
        return ModelConfig(**fields)


@dataclass(frozen=True)
class RegularizationSpec:
    """Cutoff ``rho`` and radial truncation ``T`` used off the sphere.

    ``rho = 1`` on ``|x| <= 3/2`` and ``0`` on ``|x| >= 2``; ``T(x) = x`` on
    ``|x| <= 2`` and ``3 x / |x|`` on ``|x| >= 3``. Both interpolate with
    quintic polynomials, which are C2 and monotone in the radius.
    """

    cutoff_inner: float = 1.5
    cutoff_outer: float = 2.0
    truncation_inner: float = 2.0
    truncation_radius: float = 3.0

    def cutoff_profile(self, r):
        r = np.asarray(r, dtype=float)
        s = np.clip((r - self.cutoff_inner) / (self.cutoff_outer - self.cutoff_inner), 0.0, 1.0)
        return 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s**2)

    def cutoff(self, x) -> np.ndarray:
        """``rho(x)`` for every row of ``x``."""
        return self.cutoff_profile(np.linalg.norm(np.asarray(x, dtype=float), axis=-1))

    def truncation_profile(self, r):
        """Radius of ``T(x)`` as a function of ``|x|``."""
        r = np.asarray(r, dtype=float)
        lo, hi = self.truncation_inner, self.truncation_radius
        width = hi - lo
        s = np.clip((r - lo) / width, 0.0, 1.0)
        # value and slope match r at s = 0 and the constant hi at s = 1, with
        # vanishing second derivative at both ends; the derivative is
        # (s - 1)^2 (15 s^2 + 2 s + 1) >= 0
        q = s + 4 * s**3 - 7 * s**4 + 3 * s**5
        inner = lo + width * q
        return np.where(r <= lo, r, np.where(r >= hi, hi, inner))

    def truncate(self, x) -> np.ndarray:
        """``T(x)`` applied row-wise."""
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1, keepdims=True)
        h = self.truncation_profile(r)
        safe = np.where(r > 0, r, 1.0)
        return np.where(r > self.truncation_inner, x * (h / safe), x)


DEFAULT_REGULARIZATION = RegularizationSpec()


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """States at the recorded layers of one trial."""

    states: np.ndarray
    recorded_layers: np.ndarray
    scheme_tag: str
    seed_trace: tuple = field(default=())

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def recorded_layers(depth: int, stride: int = 1) -> np.ndarray:
    """Layers ``0, stride, 2 stride, ...`` with ``depth`` always included."""
    if stride < 1:
        raise ValueError("record stride must be >= 1")
    layers = list(range(0, depth + 1, stride))
    if layers[-1] != depth:
        layers.append(depth)
    return np.array(layers)


# --------------------------------------------------------------------- canonical order


def _sort_order(x: np.ndarray):
    """Lexicographic row order and its inverse."""
    perm = np.lexsort(x.T[::-1])
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return perm, inv


def _wrap_failure(exc: NumericalFailure, trial, layer):
    exc.trial = trial if exc.trial is None else exc.trial
    exc.layer = layer if exc.layer is None else exc.layer
    return exc


# --------------------------------------------------------------------- discrete transformer


def transformer_step(cloud, params: AttentionParams, mlp: MlpParams, dt: float) -> SphericalCloud:
    """One layer: ``Y = LN(X + dt Attn_X(X))``, ``X+ = LN(Y + sqrt(dt) G(Y))``."""
    x = as_points(cloud)
    perm, inv = _sort_order(x)
    xs = x[perm]
    y = layer_normalize(xs + dt * attention_field(params, xs))
    # Y is generally not sorted; the MLP acts row-wise so its order is irrelevant
    out = layer_normalize(y + np.sqrt(dt) * mlp_forward(mlp, y))
    return SphericalCloud(out[inv])


def run_transformer(
    config: ModelConfig,
    init,
    streams: TrialStreams,
    record_stride: int = 1,
) -> TrajectoryRecord:
    """Integrate the discrete transformer; layer ``l`` draws its MLP from ``(l, MLP)``."""
    if config.scheme != "transformer_discrete":
        raise ValueError("run_transformer needs scheme 'transformer_discrete'")
    x = as_points(init)
    SphericalCloud(x)
    layers = recorded_layers(config.depth, record_stride)
    record_set = set(layers.tolist())
    states = [x]
    for layer in range(config.depth):
        mlp = sample_mlp(streams.get(layer, Role.MLP), config.kernel, config.width)
        try:
            x = transformer_step(x, config.attention, mlp, config.dt).points
        except NumericalFailure as exc:
            raise _wrap_failure(exc, streams.trial, layer)
        if layer + 1 in record_set:
            states.append(x)
    return TrajectoryRecord(np.array(states), layers, config.scheme, (streams.master_seed, streams.trial))


# --------------------------------------------------------------------- Euler-Maruyama


def _euler_update(
    x: np.ndarray,
    params: AttentionParams,
    spec: KernelSpec,
    reg: RegularizationSpec,
    noise: np.ndarray,
    dt: float,
    mode: str,
    ito_correction: bool,
) -> np.ndarray:
    """Euler update given the Brownian noise increment ``noise`` (already scaled by sqrt(dt))."""
    perm, inv = _sort_order(x)
    xs = x[perm]
    ns = noise[perm]
    rho = reg.cutoff(xs)[:, None]
    if params.scale != 0.0:
        tx = reg.truncate(xs)
        drift = rho * tangent_project(xs, attention_field(params, tx))
    else:
        drift = np.zeros_like(xs)
    if ito_correction:
        k_diag = kappa_ambient_diag(spec, xs)[:, None]
        drift = drift - rho**2 * k_diag * (spec.dim - 1) / 2.0 * xs
    out = xs + dt * drift + rho * tangent_project(xs, ns)
    if mode == "projected":
        out = layer_normalize(out)
    elif mode == "ambient":
        r = np.linalg.norm(out, axis=1)
        lo, hi = AMBIENT_NORM_RANGE
        if r.min() < lo or r.max() > hi:
            raise OutOfDomain(
                f"ambient Euler position left the band [{lo}, {hi}] (norm range "
                f"[{r.min():.4g}, {r.max():.4g}]); the step size is too large"
            )
    else:
        raise ValueError(f"mode must be 'ambient' or 'projected', got {mode!r}")
    return out[inv]


def euler_step(
    cloud,
    params: AttentionParams,
    spec: KernelSpec,
    reg: RegularizationSpec,
    field: FieldSample | np.ndarray,
    dt: float,
    mode: str = "ambient",
    ito_correction: bool = True,
) -> SphericalCloud:
    """``X+ = X + dt b(X) + sqrt(dt) rho(X) P_X G(X)`` with the regularized drift.

    ``field`` holds the field values at exactly the current positions.
    ``mode='projected'`` renormalizes every row afterwards.
    """
    x = as_points(cloud)
    if isinstance(field, FieldSample):
        if field.points.shape != x.shape or np.any(field.points != x):
            raise ValueError("field was not sampled at the current positions")
        values = field.values
    else:
        values = np.asarray(field, dtype=float)
    out = _euler_update(x, params, spec, reg, np.sqrt(dt) * values, dt, mode, ito_correction)
    return SphericalCloud(out, ambient=(mode == "ambient"))


def _euler_mode(scheme: str) -> str:
    if scheme == "euler_ambient":
        return "ambient"
    if scheme in ("euler_projected", "pure_noise"):
        return "projected"
    raise ValueError(f"scheme {scheme!r} is not an Euler scheme")


def run_common_noise(
    config: ModelConfig,
    inits,
    streams: TrialStreams,
    record_stride: int = 1,
    reg: RegularizationSpec = DEFAULT_REGULARIZATION,
    max_points: int = 8192,
) -> list[TrajectoryRecord]:
    """Integrate several Euler systems driven by one common field.

    At each layer the field is drawn once, from stream ``(layer, FIELD)``, on
    the union of all systems' current positions.
    """
    mode = _euler_mode(config.scheme)
    params = config.attention
    if config.scheme == "pure_noise":
        params = AttentionParams(params.q_matrix, params.k_matrix, params.v_matrix, 0.0, params.beta)
    xs = [np.array(as_points(c), dtype=float) for c in inits]
    for x in xs:
        SphericalCloud(x)
    sizes = [x.shape[0] for x in xs]
    offsets = np.cumsum([0] + sizes)
    if offsets[-1] > max_points:
        raise ValueError(f"union of {offsets[-1]} points exceeds the cap of {max_points}")
    layers = recorded_layers(config.depth, record_stride)
    record_set = set(layers.tolist())
    states = [[x] for x in xs]
    dt = config.dt
    sq = np.sqrt(dt)
    for layer in range(config.depth):
        union = np.concatenate(xs, axis=0)
        try:
            values = sample_field(streams.get(layer, Role.FIELD), config.kernel, union).values
            xs = [
                _euler_update(
                    x, params, config.kernel, reg, sq * values[offsets[k] : offsets[k + 1]],
                    dt, mode, config.ito_correction,
                )
                for k, x in enumerate(xs)
            ]
        except NumericalFailure as exc:
            raise _wrap_failure(exc, streams.trial, layer)
        if layer + 1 in record_set:
            for k, x in enumerate(xs):
                states[k].append(x)
    trace = (streams.master_seed, streams.trial)
    return [TrajectoryRecord(np.array(s), layers, config.scheme, trace) for s in states]


def run_euler(config: ModelConfig, init, streams: TrialStreams, record_stride: int = 1,
              reg: RegularizationSpec = DEFAULT_REGULARIZATION) -> TrajectoryRecord:
    """Single-system Euler run (ambient, projected or pure noise)."""
    return run_common_noise(config, [init], streams, record_stride, reg)[0]


def run_pure_noise(spec: KernelSpec, init, depth: int, horizon: float, streams: TrialStreams,
                   record_stride: int = 1) -> TrajectoryRecord:
    """Noise-only dynamics on the sphere: Ito drift plus projected common field."""
    d = spec.dim
    config = ModelConfig(
        depth, horizon, AttentionParams.isotropic(d, 0.0, scale=0.0), spec, scheme="pure_noise"
    )
    return run_euler(config, init, streams, record_stride)


# --------------------------------------------------------------------- coupled pair


def run_coupled_pair(
    config_discrete: ModelConfig,
    config_euler: ModelConfig,
    init,
    streams: TrialStreams,
    record_stride: int = 1,
    reg: RegularizationSpec = DEFAULT_REGULARIZATION,
):
    """Discrete transformer and Euler scheme driven by layerwise-coupled fields.

    At layer ``l`` an MLP is drawn from ``(l, MLP)``. The discrete chain first
    takes its attention half-step to ``Y``; the MLP output at ``Y`` and a
    coupled draw of the limiting field at the Euler positions are then
    produced jointly on the union of the two point sets with stream
    ``(l, COUPLING)``.

    Returns
    -------
    discrete, euler : TrajectoryRecord
    error_series : (L + 1,) array
        ``mean_i |X_l^i - Xhat_l^i|^2`` at every layer.
    """
    a, b = config_discrete, config_euler
    if a.scheme != "transformer_discrete":
        raise ValueError("first config must use the discrete transformer")
    mode = _euler_mode(b.scheme)
    if (a.depth, a.horizon, a.dim) != (b.depth, b.horizon, b.dim):
        raise ValueError("both configs need the same depth, horizon and dimension")
    x = np.array(as_points(init), dtype=float)
    SphericalCloud(x)
    xh = x.copy()
    n = x.shape[0]
    dt = a.dt
    sq = np.sqrt(dt)
    layers = recorded_layers(a.depth, record_stride)
    record_set = set(layers.tolist())
    states_a, states_b = [x], [xh]
    errors = np.empty(a.depth + 1)
    errors[0] = 0.0
    for layer in range(a.depth):
        try:
            mlp = sample_mlp(streams.get(layer, Role.MLP), a.kernel, a.width)
            perm, inv = _sort_order(x)
            xs = x[perm]
            y = layer_normalize(xs + dt * attention_field(a.attention, xs))[inv]
            finite, limit = coupled_layer_fields(
                streams.get(layer, Role.COUPLING), mlp, b.kernel, np.concatenate([y, xh])
            )
            x = layer_normalize(y + sq * finite[:n])
            xh = _euler_update(xh, b.attention, b.kernel, reg, sq * limit[n:], dt, mode, b.ito_correction)
        except NumericalFailure as exc:
            raise _wrap_failure(exc, streams.trial, layer)
        errors[layer + 1] = np.mean(np.sum((x - xh) ** 2, axis=1))
        if layer + 1 in record_set:
            states_a.append(x)
            states_b.append(xh)
    trace = (streams.master_seed, streams.trial)
    return (
        TrajectoryRecord(np.array(states_a), layers, a.scheme, trace),
        TrajectoryRecord(np.array(states_b), layers, b.scheme, trace),
        errors,
    )


# --------------------------------------------------------------------- refinement ladder


@dataclass(frozen=True, eq=False)
class RefinementLadder:
    """Self-convergence data for Euler runs at depths ``L, 2L, ..., 2^k L``.

    ``gaps[j]`` is the maximum over the grid of level ``j`` of the mean
    squared distance between levels ``j`` and ``j + 1``.
    """

    depths: np.ndarray
    gaps: np.ndarray
    finals: tuple


def run_refinement_ladder(
    config: ModelConfig,
    levels: int,
    init,
    streams: TrialStreams,
    reg: RegularizationSpec = DEFAULT_REGULARIZATION,
) -> RefinementLadder:
    """Integrate the Euler scheme at ``levels + 1`` depths under one Brownian path.

    The finest level has ``config.depth * 2**levels`` steps. Finest substep
    ``s`` draws one field, from stream ``(s, FIELD)``, on the union of every
    level's current step-start position. A level whose step spans ``r``
    substeps uses ``sqrt(dt_fine) * sum_s G_s(X)`` as its increment, which
    is the coarse/fine consistency rule ``(G_a + G_b) / sqrt(2)`` iterated.
    """
    if not 1 <= levels <= 6:
        raise ValueError("levels must lie in 1..6")
    mode = _euler_mode(config.scheme)
    params = config.attention
    if config.scheme == "pure_noise":
        params = AttentionParams(params.q_matrix, params.k_matrix, params.v_matrix, 0.0, params.beta)
    base = config.depth
    depths = base * 2 ** np.arange(levels + 1)
    n_fine = int(depths[-1])
    dt_fine = config.horizon / n_fine
    sq_fine = np.sqrt(dt_fine)
    x0 = np.array(as_points(init), dtype=float)
    SphericalCloud(x0)
    n = x0.shape[0]
    xs = [x0.copy() for _ in depths]
    acc = [np.zeros_like(x0) for _ in depths]
    spans = [n_fine // int(dep) for dep in depths]
    # level j + 1 visits every grid time of level j at its even steps
    snaps = [[x0.copy()] for _ in depths]
    for s in range(n_fine):
        union = np.concatenate(xs, axis=0)
        try:
            values = sample_field(streams.get(s, Role.FIELD), config.kernel, union).values
        except NumericalFailure as exc:
            raise _wrap_failure(exc, streams.trial, s)
        for j, span in enumerate(spans):
            acc[j] += values[j * n : (j + 1) * n]
            if (s + 1) % span == 0:
                dt_j = config.horizon / depths[j]
                try:
                    xs[j] = _euler_update(
                        xs[j], params, config.kernel, reg, sq_fine * acc[j], dt_j, mode,
                        config.ito_correction,
                    )
                except NumericalFailure as exc:
                    raise _wrap_failure(exc, streams.trial, (s + 1) // span - 1)
                acc[j][:] = 0.0
                snaps[j].append(xs[j])
    gaps = np.empty(levels)
    for j in range(levels):
        coarse = np.array(snaps[j])
        fine = np.array(snaps[j + 1])[::2]
        gaps[j] = np.max(np.mean(np.sum((coarse - fine) ** 2, axis=2), axis=1))
    return RefinementLadder(depths, gaps, tuple(xs))


def run_refinement_pair(config: ModelConfig, levels: int, init, streams: TrialStreams,
                        reg: RegularizationSpec = DEFAULT_REGULARIZATION) -> np.ndarray:
    """Sup-over-layers mean squared gap for each refinement ``L 2^j -> L 2^{j+1}``."""
    return run_refinement_ladder(config, levels, init, streams, reg).gaps
