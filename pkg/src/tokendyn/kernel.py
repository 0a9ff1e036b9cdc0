"""Zonal NNGP kernel of a random one-hidden-layer MLP and derived constants.

For an activation ``sigma`` and bias scales ``(sigma_u, sigma_w)`` the MLP
``G(x) = W sigma(U x / sqrt(d) + b_U) / sqrt(m) + b_W`` has covariance
``K(x, y) Id`` with

    K(x, y) = E[sigma(V1) sigma(V2)] + sigma_w**2,
    (V1, V2) ~ N(0, [[|x|^2/d + su^2, <x,y>/d + su^2], [., |y|^2/d + su^2]]).

On the unit sphere this depends on ``t = <x, y>`` only and is written
``kappa(t)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit, gammaln, roots_jacobi

from .errors import (
    MissingDerivative,
    NonPositiveF,
    NotDissipative,
    QuadratureUnstable,
)

HERMITE_ORDER = 64
SCHOENBERG_TOL = 1e-8


# --------------------------------------------------------------------- activations


@dataclass(frozen=True, eq=False)
class Activation:
    """Scalar activation with its a.e. derivative and a global Lipschitz constant.

    Parameters
    ----------
    name : str
    fn : callable
        Vectorized scalar map.
    deriv : callable, optional
        Vectorized a.e. derivative; required for ``kappa_prime_one``.
    lipschitz : float
        Declared Lipschitz constant, checked against the quadrature nodes.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray] | None = None
    lipschitz: float = 1.0

    def __call__(self, y):
        return self.fn(y)

    def __repr__(self):
        return f"Activation({self.name!r})"


def _relu(y):
    return np.maximum(y, 0.0)


def _relu_prime(y):
    return (y > 0).astype(float)


def _tanh_prime(y):
    return 1.0 - np.tanh(y) ** 2


def _sigmoid_prime(y):
    s = expit(y)
    return s * (1.0 - s)


def _silu(y):
    return y * expit(y)


def _silu_prime(y):
    s = expit(y)
    return s * (1.0 + y * (1.0 - s))


def _identity(y):
    return np.asarray(y, dtype=float)


def _one(y):
    return np.ones_like(np.asarray(y, dtype=float))


def _zero(y):
    return np.zeros_like(np.asarray(y, dtype=float))


# SiLU is Lipschitz with constant ~1.0998; sigmoid with 1/4.
ACTIVATIONS: dict[str, Activation] = {
    "relu": Activation("relu", _relu, _relu_prime, 1.0),
    "tanh": Activation("tanh", np.tanh, _tanh_prime, 1.0),
    "sigmoid": Activation("sigmoid", expit, _sigmoid_prime, 0.25),
    "silu": Activation("silu", _silu, _silu_prime, 1.1),
    "linear": Activation("linear", _identity, _one, 1.0),
    "zero": Activation("zero", _zero, _zero, 0.0),
}


def get_activation(act) -> Activation:
    """Resolve a registry name or pass an :class:`Activation` through."""
    if isinstance(act, Activation):
        return act
    try:
        return ACTIVATIONS[act]
    except KeyError:
        raise ValueError(
            f"unknown activation {act!r}; choose from {sorted(ACTIVATIONS)} or pass an Activation"
        ) from None


# --------------------------------------------------------------------- spec


@dataclass(frozen=True)
class KernelSpec:
    """Activation, bias standard deviations and ambient dimension."""

    activation: Activation | str
    sigma_u: float = 0.0
    sigma_w: float = 0.0
    dim: int = 4

    def __post_init__(self):
        object.__setattr__(self, "activation", get_activation(self.activation))
        if self.sigma_u < 0 or self.sigma_w < 0:
            raise ValueError("bias standard deviations must be nonnegative")
        if int(self.dim) != self.dim or self.dim < 2:
            raise ValueError(f"dim must be an integer >= 2, got {self.dim}")
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "sigma_u", float(self.sigma_u))
        object.__setattr__(self, "sigma_w", float(self.sigma_w))

    @property
    def act(self) -> Activation:
        return self.activation

    @property
    def is_relu(self) -> bool:
        return self.activation is ACTIVATIONS["relu"]

    @property
    def pre_variance(self) -> float:
        """Variance of each pre-activation at a unit-norm input."""
        return 1.0 / self.dim + self.sigma_u**2

    def with_dim(self, d: int) -> "KernelSpec":
        return KernelSpec(self.activation, self.sigma_u, self.sigma_w, d)


@dataclass(frozen=True)
class KernelValues:
    kappa_one: float
    kappa_prime_one: float
    lambda_one: float
    lambda_bar: float


# --------------------------------------------------------------------- quadrature


@lru_cache(maxsize=None)
def _hermite(order: int = HERMITE_ORDER):
    """Probabilists' Gauss-Hermite nodes and weights normalized to sum 1."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / weights.sum()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _check_growth(act: Activation, y: np.ndarray, values: np.ndarray) -> None:
    f0 = float(np.asarray(act.fn(np.zeros(1)))[0])
    bound = abs(f0) + act.lipschitz * np.abs(y)
    if np.any(np.abs(values) > bound * (1 + 1e-9) + 1e-12):
        raise QuadratureUnstable(
            f"activation {act.name!r} grows faster than its declared Lipschitz constant "
            f"{act.lipschitz} at the quadrature nodes"
        )


def _relu_pair(a, b, c, det):
    """E[relu(V1) relu(V2)] for covariance [[a, c], [c, b]] with determinant ``det``."""
    root = np.sqrt(det)
    theta = np.arctan2(root, c)
    return (root + c * (np.pi - theta)) / (2.0 * np.pi)


def _quadrature_pair(act: Activation, a, b, c, det, order: int = HERMITE_ORDER, chunk: int = 256):
    """E[act(V1) act(V2)] by tensorized Gauss-Hermite on V1 = s1 Z1, V2 = r Z1 + q Z2."""
    z, w = _hermite(order)
    a = np.ravel(a)
    b = np.ravel(b)
    c = np.ravel(c)
    det = np.ravel(det)
    out = np.empty(a.shape)
    s1 = np.sqrt(a)
    pos = a > 0
    r = np.where(pos, c / np.where(pos, s1, 1.0), 0.0)
    q = np.sqrt(np.where(pos, det / np.where(pos, a, 1.0), b))
    for start in range(0, a.size, chunk):
        sl = slice(start, start + chunk)
        v1 = s1[sl, None] * z[None, :]  # (n, k)
        f1 = act.fn(v1)
        _check_growth(act, v1, f1)
        # inner expectation over Z2 for every Z1 node
        v2 = r[sl, None, None] * z[None, :, None] + q[sl, None, None] * z[None, None, :]
        f2 = act.fn(v2)
        _check_growth(act, v2, f2)
        inner = f2 @ w  # (n, k)
        out[sl] = (f1 * inner) @ w
    return out


def _pair_expectation(spec: KernelSpec, a, b, c, det):
    if spec.is_relu:
        return _relu_pair(a, b, c, det)
    if spec.activation is ACTIVATIONS["linear"]:
        return np.asarray(c, dtype=float)
    if spec.activation is ACTIVATIONS["zero"]:
        return np.zeros(np.shape(c))
    shape = np.shape(c)
    return _quadrature_pair(spec.activation, a, b, c, det).reshape(shape)


# --------------------------------------------------------------------- kernel values


def kappa(spec: KernelSpec, t):
    """Zonal kernel ``kappa(t)`` for ``t`` in ``[-1, 1]`` (scalar or array).

    ReLU uses the closed arc-cosine form; other activations use order-64
    Gauss-Hermite quadrature.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(np.abs(t_arr) > 1 + 1e-12):
        raise ValueError("kappa is defined for t in [-1, 1]")
    t_arr = np.clip(t_arr, -1.0, 1.0)
    d = spec.dim
    su2 = spec.sigma_u**2
    a = np.full(t_arr.shape, spec.pre_variance)
    c = t_arr / d + su2
    # det = (1 - t)/d * ((1 + t)/d + 2 su^2), free of cancellation near t = 1
    det = np.maximum((1 - t_arr) / d * ((1 + t_arr) / d + 2 * su2), 0.0)
    val = _pair_expectation(spec, a, a, c, det) + spec.sigma_w**2
    return float(val) if np.ndim(t) == 0 else val


def _moments(x, y, d, su2):
    """Covariance entries and determinant for points ``x`` and ``y`` (broadcasting rows)."""
    xx = np.sum(x * x, axis=-1)
    yy = np.sum(y * y, axis=-1)
    xy = np.sum(x * y, axis=-1)
    wv = y - x
    ww = np.sum(wv * wv, axis=-1)
    xw = np.sum(x * wv, axis=-1)
    # |x ^ y|^2 = |x|^2 |w|^2 - <x,w>^2 with w = y - x: accurate for nearby points
    wedge = np.maximum(xx * ww - xw * xw, 0.0)
    det = np.maximum(wedge / d**2 + su2 * ww / d, 0.0)
    return xx / d + su2, yy / d + su2, xy / d + su2, det


def kappa_ambient(spec: KernelSpec, x, y) -> float:
    """Ambient kernel ``K(x, y)`` for points in the ball of radius 3."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.linalg.norm(x) > 3 + 1e-9 or np.linalg.norm(y) > 3 + 1e-9:
        raise ValueError("kappa_ambient is defined on the ball of radius 3")
    a, b, c, det = _moments(x, y, spec.dim, spec.sigma_u**2)
    return float(_pair_expectation(spec, a, b, c, det)) + spec.sigma_w**2


def kappa_ambient_diag(spec: KernelSpec, points) -> np.ndarray:
    """``K(x, x)`` for every row of ``points``."""
    points = np.asarray(points, dtype=float)
    a = np.sum(points * points, axis=-1) / spec.dim + spec.sigma_u**2
    return _pair_expectation(spec, a, a, a, np.zeros_like(a)) + spec.sigma_w**2


def _gram_moments(points: np.ndarray, d: int, su2: float):
    """Upper-triangle covariance entries and determinants for all pairs of rows."""
    p = points.shape[0]
    iu, ju = np.triu_indices(p)
    inner = points @ points.T
    sq = np.diag(inner).copy()
    # direct differences keep |x - y|^2 accurate for nearby points; the
    # wedge |x|^2 |w|^2 - <x, w>^2 is then insensitive to the rounding of <x, w>
    d2 = cdist(points, points, "sqeuclidean")
    xw = 0.5 * (sq[None, :] - sq[:, None] - d2)
    wedge = np.maximum(sq[:, None] * d2 - xw**2, 0.0)
    det = np.maximum(wedge / d**2 + su2 * d2 / d, 0.0)
    a = sq / d + su2
    return a[iu], a[ju], (inner / d + su2)[iu, ju], det[iu, ju], iu, ju


def kernel_gram(spec: KernelSpec, points, include_bias: bool = True) -> np.ndarray:
    """Symmetric Gram matrix ``K(x_p, x_q)`` over the rows of ``points``.

    With ``include_bias=False`` the output-bias variance ``sigma_w**2`` is
    left out.
    """
    points = np.asarray(points, dtype=float)
    p = points.shape[0]
    a, b, c, det, iu, ju = _gram_moments(points, spec.dim, spec.sigma_u**2)
    vals = _pair_expectation(spec, a, b, c, det)
    if include_bias:
        vals = vals + spec.sigma_w**2
    gram = np.empty((p, p))
    gram[iu, ju] = vals
    gram[ju, iu] = vals
    return gram


def kappa_prime_one(spec: KernelSpec) -> float:
    """``kappa'(1) = E[act'(h)^2] / d`` with ``h ~ N(0, 1/d + sigma_u^2)``."""
    act = spec.activation
    if act.deriv is None:
        raise MissingDerivative(f"activation {act.name!r} has no registered derivative")
    z, w = _hermite()
    h = np.sqrt(spec.pre_variance) * z
    return float(w @ np.asarray(act.deriv(h), dtype=float) ** 2) / spec.dim


def relu_closed_forms(spec: KernelSpec) -> tuple[float, float]:
    """Closed-form ``(lambda_1, lambda_bar)`` for the ReLU activation."""
    d = spec.dim
    s = spec.sigma_u**2 + 2 * spec.sigma_w**2
    return -1.0 / (2 * d) - s * (d - 1) / 4.0, 1.0 / d - s * (d - 3) / 2.0


def lyapunov_constants(spec: KernelSpec) -> KernelValues:
    """``kappa(1)``, ``kappa'(1)``, the top Lyapunov exponent and the dissipation constant."""
    d = spec.dim
    k1 = kappa(spec, 1.0)
    kp = kappa_prime_one(spec)
    lam1 = (d - 3) / 2 * kp - (d - 1) / 2 * k1
    lbar = (d - 1) * kp - (d - 3) * k1
    if spec.is_relu:
        ref1, refbar = relu_closed_forms(spec)
        scale = max(1.0, abs(ref1), abs(refbar))
        if abs(lam1 - ref1) > 1e-10 * scale or abs(lbar - refbar) > 1e-10 * scale:
            raise QuadratureUnstable(
                f"ReLU quadrature disagrees with closed forms: {lam1} vs {ref1}, {lbar} vs {refbar}"
            )
    return KernelValues(k1, kp, lam1, lbar)


# --------------------------------------------------------------------- Gegenbauer


def gegenbauer_polynomial(n: int, d: int, u):
    """Gegenbauer polynomial of degree ``n`` in dimension ``d`` with ``P(1) = 1``.

    Uses ``(n + d - 3) P_n = (2n + d - 4) u P_{n-1} - (n - 1) P_{n-2}``; for
    ``d = 2`` this is the Chebyshev recurrence and for ``d = 3`` Legendre's.
    """
    return _gegenbauer_table(n, d, u)[n]


def _gegenbauer_table(n_max: int, d: int, u):
    if n_max < 0 or d < 2:
        raise ValueError("need n >= 0 and d >= 2")
    u = np.asarray(u, dtype=float)
    table = np.empty((n_max + 1,) + u.shape)
    table[0] = 1.0
    if n_max >= 1:
        table[1] = u
    for k in range(2, n_max + 1):
        table[k] = ((2 * k + d - 4) * u * table[k - 1] - (k - 1) * table[k - 2]) / (k + d - 3)
    return table


def harmonic_dimension(n: int, d: int) -> int:
    """Dimension of degree-``n`` spherical harmonics on ``S^{d-1}``."""
    from math import comb

    if n == 0:
        return 1
    return comb(n + d - 1, n) - (comb(n + d - 3, n - 2) if n >= 2 else 0)


def gegenbauer_norms(n_max: int, d: int) -> np.ndarray:
    """Analytic ``int P_{n,d}^2 (1-u^2)^{(d-3)/2} du`` for ``n = 0..n_max``."""
    n = np.arange(n_max + 1, dtype=float)
    lam = (d - 2) / 2.0
    if lam == 0.0:
        out = np.full(n_max + 1, np.pi / 2)
        out[0] = np.pi
        return out
    # C_n^lam norm divided by C_n^lam(1)^2
    log_h = (
        np.log(np.pi)
        + (1 - 2 * lam) * np.log(2.0)
        + gammaln(n + 2 * lam)
        - gammaln(n + 1)
        - np.log(n + lam)
        - 2 * gammaln(lam)
    )
    log_c1 = gammaln(n + 2 * lam) - gammaln(n + 1) - gammaln(2 * lam)
    return np.exp(log_h - 2 * log_c1)


def _jacobi_rule(n_nodes: int, d: int):
    alpha = (d - 3) / 2.0
    return roots_jacobi(n_nodes, alpha, alpha)


@dataclass(frozen=True)
class GegenbauerExpansion:
    """``kappa(u) ~ sum_n c_n P_{n,d}(u)`` truncated at ``order``."""

    order: int
    dim: int
    coefficients: np.ndarray
    dims: np.ndarray
    reconstruction_error: float = field(default=np.nan)

    def evaluate(self, u):
        table = _gegenbauer_table(self.order, self.dim, u)
        return np.tensordot(self.coefficients, table, axes=1)


def _weighted_rel_error(spec: KernelSpec, coefficients, n_max: int) -> float:
    # independent, finer rule than the one used for projection
    nodes, weights = _jacobi_rule(3 * n_max + 101, spec.dim)
    target = kappa(spec, nodes)
    approx = np.tensordot(coefficients, _gegenbauer_table(n_max, spec.dim, nodes), axes=1)
    num = weights @ (target - approx) ** 2
    den = weights @ target**2
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def gegenbauer_expand(spec: KernelSpec, n_max: int) -> GegenbauerExpansion:
    """Project ``kappa`` onto normalized Gegenbauer polynomials up to degree ``n_max``.

    Coefficients come from Gauss-Jacobi quadrature with ``2 n_max + 32``
    nodes. The quadrature norm of every basis polynomial is checked against
    its analytic value.

    Raises
    ------
    QuadratureUnstable
        If a basis norm is off by more than ``1e-6`` relative.
    """
    if not 0 <= n_max <= 512:
        raise ValueError("n_max must lie in [0, 512]")
    d = spec.dim
    nodes, weights = _jacobi_rule(2 * n_max + 32, d)
    table = _gegenbauer_table(n_max, d, nodes)
    norms = gegenbauer_norms(n_max, d)
    quad_norms = (table**2) @ weights
    rel = np.abs(quad_norms - norms) / norms
    if np.any(rel > 1e-6):
        raise QuadratureUnstable(f"basis norm error {rel.max():.3g} exceeds 1e-6")
    coeffs = (table @ (weights * kappa(spec, nodes))) / norms
    dims = np.array([harmonic_dimension(n, d) for n in range(n_max + 1)])
    err = _weighted_rel_error(spec, coeffs, n_max)
    return GegenbauerExpansion(n_max, d, coeffs, dims, err)


# --------------------------------------------------------------------- dissipation


@dataclass(frozen=True)
class DissipationRate:
    beta: float
    lambda_bar_prime: float
    minimizer_u: float
    boundary_value: float


def dissipation_profile(spec: KernelSpec, beta: float, u) -> np.ndarray:
    """The function ``F(u)`` whose infimum gives the energy dissipation rate (``u < 1``)."""
    u = np.asarray(u, dtype=float)
    d = spec.dim
    k1 = kappa(spec, 1.0)
    ku = kappa(spec, u)
    g = ku * (d - 2 + u**2 - beta * u * (1 - u**2)) + k1 * (beta * (1 - u**2) - (d - 1) * u)
    # beta e^{bu} / (e^b - e^{bu}) = beta e^{b(u-1)} / (1 - e^{b(u-1)})
    x = beta * (u - 1.0)
    return beta * np.exp(x) * g / (-np.expm1(x))


def dissipation_rate(spec: KernelSpec, beta: float, n_grid: int = 16384) -> DissipationRate:
    """Energy dissipation rate ``-inf_u F(u)`` with its minimizer.

    ``F`` is sampled on Chebyshev points of ``[-1, 1 - 1e-6]``, refined
    fourfold around the discrete minimizer, and compared with the limit
    ``F(1) = -lambda_bar``.

    Raises
    ------
    NotDissipative
        If ``lambda_bar >= 0``.
    NonPositiveF
        If ``F <= 0`` somewhere on the grid.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    vals = lyapunov_constants(spec)
    if vals.lambda_bar >= 0:
        raise NotDissipative(
            f"lambda_bar = {vals.lambda_bar:.6g} >= 0; the dissipation assumption fails"
        )
    lo, hi = -1.0, 1.0 - 1e-6
    k = np.arange(n_grid)
    grid = np.sort(0.5 * (lo + hi) + 0.5 * (hi - lo) * np.cos(np.pi * k / (n_grid - 1)))
    f = dissipation_profile(spec, beta, grid)
    i = int(np.argmin(f))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    fine = np.linspace(a, b, 9)
    f_fine = dissipation_profile(spec, beta, fine)
    if np.any(f <= 0) or np.any(f_fine <= 0):
        raise NonPositiveF("F is not positive on [-1, 1); the dissipation assumption is violated")
    j = int(np.argmin(f_fine))
    boundary = -vals.lambda_bar
    if f_fine[j] < boundary:
        fmin, umin = float(f_fine[j]), float(fine[j])
    else:
        fmin, umin = boundary, 1.0
    return DissipationRate(float(beta), -fmin, umin, boundary)


def zonal_interpolant(spec: KernelSpec, degree: int = 160, tol: float = 1e-12):
    """Fast evaluator of ``t -> kappa(t)`` on ``[-1, 1]``.

    ReLU has a closed form and is returned as is. Smooth activations are
    replaced by a Chebyshev interpolant of the quadrature values whose
    accuracy is verified at independent points.

    Raises
    ------
    QuadratureUnstable
        If the interpolant misses the quadrature by more than ``tol * kappa(1)``.
    """
    if spec.is_relu or spec.activation is ACTIVATIONS["linear"] or spec.activation is ACTIVATIONS["zero"]:
        return lambda t: kappa(spec, t)
    cheb = np.polynomial.chebyshev.Chebyshev.interpolate(lambda t: kappa(spec, t), degree)
    probe = np.cos(np.pi * (np.arange(97) + 0.5) / 97)
    scale = max(abs(kappa(spec, 1.0)), 1e-300)
    err = np.max(np.abs(cheb(probe) - kappa(spec, probe)))
    if err > tol * scale:
        raise QuadratureUnstable(f"Chebyshev interpolant error {err:.3g} exceeds {tol} * kappa(1)")
    return cheb
