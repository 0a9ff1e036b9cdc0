"""Point clouds on the unit sphere and the radial projection ``v -> v/|v|``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVector, OutOfDomain

DEGENERACY_THRESHOLD = 1e-12
SPHERE_TOL = 1e-9
AMBIENT_NORM_RANGE = (0.5, 3.0)


@dataclass(frozen=True, eq=False)
class SphericalCloud:
    """``N`` tokens in ``R^d``.

    With ``ambient=False`` (the default) every row must have unit norm within
    ``1e-9``; ambient clouds produced by the unprojected Euler scheme only need
    norms inside ``[1/2, 3]``.
    """

    points: np.ndarray
    ambient: bool = False

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2:
            raise ValueError(f"points must be an N x d array, got shape {pts.shape}")
        n, d = pts.shape
        if n < 1 or d < 2:
            raise ValueError(f"need N >= 1 and d >= 2, got N={n}, d={d}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        norms = np.linalg.norm(pts, axis=1)
        if self.ambient:
            lo, hi = AMBIENT_NORM_RANGE
            if norms.min() < lo or norms.max() > hi:
                raise OutOfDomain(
                    f"ambient cloud norms in [{norms.min():.4g}, {norms.max():.4g}] leave [{lo}, {hi}]"
                )
        elif np.max(np.abs(norms - 1.0)) > SPHERE_TOL:
            raise ValueError("rows are not on the unit sphere (tolerance 1e-9)")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_tokens(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def on_sphere(self) -> bool:
        return not self.ambient

    def __len__(self) -> int:
        return self.n_tokens


def as_points(cloud) -> np.ndarray:
    """Return the ``N x d`` coordinate array of a cloud or array-like."""
    if isinstance(cloud, SphericalCloud):
        return cloud.points
    return np.asarray(cloud, dtype=float)


def layer_normalize(v) -> np.ndarray:
    """Radially project ``v`` (a vector or a stack of row vectors) onto the sphere.

    Raises
    ------
    DegenerateVector
        If any vector has norm ``<= 1e-12``.
    """
    v = np.asarray(v, dtype=float)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= DEGENERACY_THRESHOLD):
        raise DegenerateVector("cannot normalize a vector of norm <= 1e-12")
    return v / norms


def tangent_project(x, w) -> np.ndarray:
    """Project ``w`` onto the tangent space at ``x``: ``w - <w, x> x``.

    Works row-wise on stacks. ``x`` must have unit norm.
    """
    x = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    return w - np.sum(w * x, axis=-1, keepdims=True) * x


def sample_uniform_sphere(rng: np.random.Generator, n: int, d: int) -> SphericalCloud:
    """Draw ``n`` iid uniform points on ``S^{d-1}`` (Gaussian draw, then normalize)."""
    if n < 1 or d < 2:
        raise ValueError(f"need n >= 1 and d >= 2, got n={n}, d={d}")
    g = rng.standard_normal((n, d))
    try:
        return SphericalCloud(layer_normalize(g))
    except DegenerateVector:
        # probability zero; one retry, then let it propagate
        g = rng.standard_normal((n, d))
        return SphericalCloud(layer_normalize(g))


@dataclass(frozen=True)
class TaylorExpansionReport:
    """First and second order expansion of ``LN(v + w)`` around a unit ``v``."""

    first_order: np.ndarray
    second_order: np.ndarray
    remainder_r1: np.ndarray
    remainder_r2: np.ndarray
    bound_r1: float
    bound_r2: float
    segment_min: float


def segment_min_norm(v, w, grid_points: int = 64) -> float:
    """``min_{t in [0,1]} |v + t w|``.

    The quadratic ``|v + t w|^2`` is minimized analytically; a uniform grid of
    ``grid_points`` values of ``t`` is used as a cross-check.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    ww = float(w @ w)
    if ww == 0.0:
        return float(np.linalg.norm(v))
    t_star = min(max(-float(v @ w) / ww, 0.0), 1.0)
    analytic = float(np.linalg.norm(v + t_star * w))
    ts = np.linspace(0.0, 1.0, grid_points)
    grid = float(np.min(np.linalg.norm(v[None, :] + ts[:, None] * w[None, :], axis=1)))
    # the analytic minimizer can never lose to a grid point
    assert analytic <= grid + 1e-12 * max(1.0, grid)
    return analytic


def ln_taylor_expand(v, w) -> TaylorExpansionReport:
    """Expand ``LN(v + w)`` to first and second order with explicit remainders.

    ``remainder_r1 = LN(v+w) - v - P_v w`` is bounded by ``3|w|^2 / m^2`` and
    ``remainder_r2`` (after also subtracting the second-order term) by
    ``6|w|^3 / m^3``, where ``m`` is the minimum norm on the segment from ``v``
    to ``v + w``.
    """
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    m = segment_min_norm(v, w)
    if m <= DEGENERACY_THRESHOLD:
        raise DegenerateVector("segment v + t w passes through the origin")
    pw = tangent_project(v, w)
    vw = float(v @ w)
    second = -vw * pw - 0.5 * float(pw @ pw) * v
    r1 = layer_normalize(v + w) - v - pw
    r2 = r1 - second
    nw = float(np.linalg.norm(w))
    return TaylorExpansionReport(
        first_order=pw,
        second_order=second,
        remainder_r1=r1,
        remainder_r2=r2,
        bound_r1=3.0 * nw**2 / m**2,
        bound_r2=6.0 * nw**3 / m**3,
        segment_min=m,
    )
