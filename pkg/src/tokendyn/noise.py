"""Exact Gaussian sampling of the limiting layer field and its couplings.

The limiting field ``G`` has covariance ``K(x, y) Id``: its ``d`` output
coordinates are independent Gaussian processes with covariance ``K``. Only
finitely many evaluation points are ever needed per layer, so the field is
drawn jointly on those points from the Gram matrix.

Noise is attached to positions, not to token indices. Point sets are first
put into a canonical (lexicographic) order with coincident points merged, so
the same stream gives the same value at the same position no matter how the
caller orders its points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCovariance, GramNotPSD, PointMismatch
from .kernel import KernelSpec, kernel_gram
from .mlp import MlpParams, hidden_activations, mlp_forward

DUPLICATE_TOL = 1e-12
EIG_FLOOR = 1e-12


# --------------------------------------------------------------------- canonical point sets


@dataclass(frozen=True, eq=False)
class CanonicalPoints:
    """Distinct points in lexicographic order plus the map back to the input rows."""

    unique: np.ndarray
    inverse: np.ndarray


def canonicalize(points) -> CanonicalPoints:
    """Sort rows lexicographically and merge rows closer than ``1e-12``.

    ``unique[inverse]`` reproduces ``points`` up to the merge tolerance.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ValueError("points must be a non-empty P x d array")
    uniq, inv = np.unique(pts, axis=0, return_inverse=True)
    inv = np.ravel(inv)
    if uniq.shape[0] > 1:
        # only neighbours in lexicographic order are merged: cheap and order-free
        gaps = np.max(np.abs(np.diff(uniq, axis=0)), axis=1)
        keep = np.concatenate([[True], gaps > DUPLICATE_TOL])
        if not keep.all():
            group = np.cumsum(keep) - 1
            uniq = uniq[keep]
            inv = group[inv]
    return CanonicalPoints(uniq, inv)


# --------------------------------------------------------------------- Gram factorization


def factor_gram(gram: np.ndarray) -> tuple[np.ndarray, float]:
    """Square root ``R`` with ``R R^T ~ gram``.

    Unpivoted Cholesky is tried with jitter ``0``, ``1e-12 tr/P`` and
    ``1e-9 tr/P``; if all fail the symmetric eigendecomposition with negative
    eigenvalues clipped to zero is used (then ``R`` is not triangular).

    Returns
    -------
    root : (P, P) array
    jitter : float
        Diagonal jitter added, or ``nan`` for the eigendecomposition fallback.

    Raises
    ------
    GramNotPSD
        If the matrix has an eigenvalue below ``-1e-6 tr/P``.
    """
    p = gram.shape[0]
    tr = float(np.trace(gram))
    if tr <= 0.0:
        if np.any(gram != 0.0):
            raise GramNotPSD("Gram matrix has nonpositive trace but nonzero entries")
        return np.zeros_like(gram), 0.0
    eye = np.eye(p)
    for jitter in (0.0, 1e-12 * tr / p, 1e-9 * tr / p):
        try:
            return np.linalg.cholesky(gram + jitter * eye), jitter
        except np.linalg.LinAlgError:
            continue
    lam, vec = np.linalg.eigh(gram)
    if lam.min() < -1e-6 * tr / p:
        raise GramNotPSD(f"Gram matrix has eigenvalue {lam.min():.3g} (trace {tr:.3g})")
    return vec * np.sqrt(np.clip(lam, 0.0, None)), float("nan")


@dataclass(frozen=True, eq=False)
class FieldSample:
    """Joint draw of the field at ``points``.

    ``values = (gram_root @ Z)[inverse]`` with ``Z`` standard normal of shape
    ``(P_unique, d)``, where ``gram_root`` factors the Gram matrix of the
    distinct points.
    """

    points: np.ndarray
    values: np.ndarray
    gram_root: np.ndarray
    jitter_used: float
    canonical: CanonicalPoints


def sample_field(rng: np.random.Generator, spec: KernelSpec, points) -> FieldSample:
    """Draw the limiting field jointly at ``points`` (rows in the ball of radius 3)."""
    pts = np.asarray(points, dtype=float)
    if np.any(np.linalg.norm(pts, axis=1) > 3 + 1e-9):
        raise ValueError("field points must lie in the ball of radius 3")
    canon = canonicalize(pts)
    gram = kernel_gram(spec, canon.unique)
    root, jitter = factor_gram(gram)
    z = rng.standard_normal((canon.unique.shape[0], pts.shape[1]))
    values = (root @ z)[canon.inverse]
    return FieldSample(pts, values, root, jitter, canon)


# --------------------------------------------------------------------- Gaussian OT


def _sym_sqrt(mat: np.ndarray, floor_rel: float = EIG_FLOOR):
    """Symmetric square root and the eigen-decomposition clipped at ``floor_rel * lam_max``."""
    lam, vec = np.linalg.eigh(0.5 * (mat + mat.T))
    lam_max = lam.max() if lam.size else 0.0
    lam = np.where(lam > floor_rel * max(lam_max, 0.0), lam, 0.0)
    return (vec * np.sqrt(lam)) @ vec.T, lam, vec


@dataclass(frozen=True, eq=False)
class GaussianCoupling:
    """Optimal map between ``N(0, sigma_one)`` and ``N(0, sigma_two)``.

    ``transport_map`` is the Bures map ``A``. When ``sigma_one`` is rank
    deficient ``A X`` only covers part of the target law; adding
    ``residual_root @ xi`` with independent standard normal ``xi`` makes the
    result exactly ``N(0, sigma_two)``. ``residual_root`` is zero when
    ``sigma_one`` is non-degenerate on the range of ``sigma_two``.
    """

    sigma_one: np.ndarray
    sigma_two: np.ndarray
    transport_map: np.ndarray
    residual_root: np.ndarray
    w2_squared: float


def bures_w2_squared(sigma_one, sigma_two) -> float:
    """``tr S1 + tr S2 - 2 tr (S1^{1/2} S2 S1^{1/2})^{1/2}``."""
    r1, _, _ = _sym_sqrt(np.asarray(sigma_one, dtype=float), 0.0)
    cross = r1 @ np.asarray(sigma_two, dtype=float) @ r1
    lam = np.linalg.eigvalsh(0.5 * (cross + cross.T))
    return float(np.trace(sigma_one) + np.trace(sigma_two) - 2 * np.sum(np.sqrt(np.clip(lam, 0, None))))


def gaussian_ot_map(sigma_one, sigma_two) -> GaussianCoupling:
    """Bures optimal transport map ``A = S (S Sigma1 S)^{-1/2} S`` with ``S = Sigma2^{1/2}``.

    Inverse square roots discard eigenvalues below ``1e-12 lam_max``.

    Raises
    ------
    DegenerateCovariance
        If ``sigma_two`` has no positive eigenvalue.
    """
    s1 = np.asarray(sigma_one, dtype=float)
    s2 = np.asarray(sigma_two, dtype=float)
    if s1.shape != s2.shape or s1.ndim != 2 or s1.shape[0] != s1.shape[1]:
        raise ValueError("covariances must be square matrices of equal shape")
    if s1.shape[0] > 512:
        raise ValueError("gaussian_ot_map is limited to 512 points")
    sq2, lam2, _ = _sym_sqrt(s2)
    if not np.any(lam2 > 0):
        raise DegenerateCovariance("target covariance has no positive eigenvalue")
    mid = sq2 @ s1 @ sq2
    lam, vec = np.linalg.eigh(0.5 * (mid + mid.T))
    lam_max = lam.max()
    rank = lam > EIG_FLOOR * lam_max if lam_max > 0 else np.zeros_like(lam, dtype=bool)
    inv_sqrt = np.where(rank, 1.0 / np.sqrt(np.where(rank, lam, 1.0)), 0.0)
    a_map = sq2 @ ((vec * inv_sqrt) @ vec.T) @ sq2
    # the complement of range(mid) receives fresh independent noise
    comp = vec[:, ~rank]
    residual = sq2 @ comp @ comp.T
    return GaussianCoupling(s1, s2, a_map, residual, bures_w2_squared(s1, s2))


def coupled_layer_fields(rng: np.random.Generator, mlp: MlpParams, spec: KernelSpec, points):
    """Finite-width MLP output and a coupled draw of the limiting field at ``points``.

    Given the hidden activations, each output coordinate of the MLP minus its
    bias is Gaussian with covariance ``H H^T / m``. The limiting field minus
    the same bias has covariance ``K_0`` (the Gram without ``sigma_w**2``).
    The two are coupled coordinatewise by the Bures map, and the output bias
    is shared.

    Returns
    -------
    finite_width, limit : (P, d) arrays
    """
    pts = np.asarray(points, dtype=float)
    if mlp.spec != spec:
        raise ValueError("MLP parameters were drawn for a different kernel spec")
    canon = canonicalize(pts)
    uq = canon.unique
    finite = mlp_forward(mlp, uq)
    h = hidden_activations(mlp, uq)
    sigma_one = h @ h.T / mlp.width
    sigma_two = kernel_gram(spec, uq, include_bias=False)
    xi = rng.standard_normal(finite.shape)
    centered = finite - mlp.bias_w
    if np.trace(sigma_two) <= 0.0:
        limit = np.broadcast_to(mlp.bias_w, finite.shape).copy()
    else:
        coupling = gaussian_ot_map(sigma_one, sigma_two)
        limit = coupling.transport_map @ centered + coupling.residual_root @ xi + mlp.bias_w
    return finite[canon.inverse], limit[canon.inverse]


# --------------------------------------------------------------------- refinement


def _locate(points: np.ndarray, canon: CanonicalPoints) -> np.ndarray:
    """Row of ``canon.unique`` matching each of ``points`` exactly, else PointMismatch."""
    uq = canon.unique
    # lexicographic binary search through a structured view
    keys = np.ascontiguousarray(uq).view([("", uq.dtype)] * uq.shape[1]).ravel()
    q = np.ascontiguousarray(points, dtype=float).view([("", uq.dtype)] * uq.shape[1]).ravel()
    idx = np.searchsorted(keys, q)
    idx = np.clip(idx, 0, len(keys) - 1)
    hit = np.max(np.abs(uq[idx] - points), axis=1) <= DUPLICATE_TOL
    if not hit.all():
        # fall back to a nearest search for merged near-duplicates
        for k in np.flatnonzero(~hit):
            dist = np.max(np.abs(uq - points[k]), axis=1)
            j = int(np.argmin(dist))
            if dist[j] > DUPLICATE_TOL:
                raise PointMismatch(f"point {points[k]} is not among the fine points")
            idx[k] = j
    return idx


def refine_field_pair(rng: np.random.Generator, spec: KernelSpec, coarse_points, fine_points_pair):
    """Two independent fine-step fields and the coarse-step field they induce.

    ``fine_a`` and ``fine_b`` are independent draws on the union of both fine
    point sets; the coarse field at ``coarse_points`` is
    ``(fine_a + fine_b) / sqrt(2)``, so a coarse step of length ``2 dt`` sees
    the sum of the two fine Brownian increments.

    Raises
    ------
    PointMismatch
        If a coarse point does not occur among the fine points.
    """
    pa, pb = (np.asarray(p, dtype=float) for p in fine_points_pair)
    coarse = np.asarray(coarse_points, dtype=float)
    union = np.concatenate([pa, pb], axis=0)
    draw_a = sample_field(rng, spec, union)
    draw_b = sample_field(rng, spec, union)
    canon = draw_a.canonical
    idx = _locate(coarse, canon)
    # values on distinct points, indexed back for each query set
    vals_a = np.empty((canon.unique.shape[0], union.shape[1]))
    vals_b = np.empty_like(vals_a)
    vals_a[canon.inverse] = draw_a.values
    vals_b[canon.inverse] = draw_b.values
    na = pa.shape[0]
    fine_a = FieldSample(pa, draw_a.values[:na], draw_a.gram_root, draw_a.jitter_used, canon)
    fine_b = FieldSample(pb, draw_b.values[na:], draw_b.gram_root, draw_b.jitter_used, canon)
    coarse_vals = (vals_a[idx] + vals_b[idx]) / np.sqrt(2.0)
    coarse_sample = FieldSample(coarse, coarse_vals, draw_a.gram_root, draw_a.jitter_used, canon)
    return coarse_sample, fine_a, fine_b
