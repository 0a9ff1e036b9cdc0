"""Measurements on token clouds and trajectories."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import NonPositiveEnergy, SizeMismatch, WindowCollapse
from .kernel import KernelSpec, zonal_interpolant
from .seeding import WHOLE_RUN, Role, derive_stream
from .sphere import as_points

W2_MAX_POINTS = 4096


# --------------------------------------------------------------------- energy


@dataclass(frozen=True, eq=False)
class EnergyTrace:
    """Interaction energy at a sequence of times."""

    beta: float
    times: np.ndarray
    values: np.ndarray
    trial_id: int | None = None


def interaction_energy(cloud, beta: float) -> float:
    """``(1 / 2N^2) sum_{i,j} (e^beta - e^{beta <x_i, x_j>})`` over all ordered pairs.

    Written as ``e^beta (1 - e^{-beta |x_i - x_j|^2 / 2})`` per pair, which is
    exact on the sphere and free of cancellation for nearby tokens.
    """
    x = as_points(cloud)
    n = x.shape[0]
    d2 = cdist(x, x, "sqeuclidean")
    return float(np.exp(beta) * np.sum(-np.expm1(-0.5 * beta * d2)) / (2.0 * n * n))


def interaction_energy_reference(cloud, beta: float) -> float:
    """Direct double loop over the defining formula; slow, used as a check."""
    x = as_points(cloud)
    n = x.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += np.exp(beta) - np.exp(beta * float(x[i] @ x[j]))
    return total / (2.0 * n * n)


def energy_trace(states, times, beta: float, trial_id: int | None = None) -> EnergyTrace:
    """Energy of every recorded state of a trajectory."""
    values = np.array([interaction_energy(s, beta) for s in states])
    return EnergyTrace(float(beta), np.asarray(times, dtype=float), values, trial_id)


@dataclass(frozen=True)
class DecayFit:
    rate: float
    intercept: float
    r_squared: float


def decay_rate_fit(trace: EnergyTrace, window: tuple[float, float] | None = None) -> DecayFit:
    """Least-squares slope of ``log(energy)`` against time on ``window``.

    Raises
    ------
    NonPositiveEnergy
        If an energy value in the window is not strictly positive.
    """
    t = np.asarray(trace.times, dtype=float)
    v = np.asarray(trace.values, dtype=float)
    if window is not None:
        mask = (t >= window[0]) & (t <= window[1])
        t, v = t[mask], v[mask]
    if t.size < 2:
        raise ValueError("need at least two times in the fit window")
    if np.any(~(v > 0)):
        raise NonPositiveEnergy("energy must be strictly positive to fit a log-linear rate")
    y = np.log(v)
    tc = t - t.mean()
    slope = float(tc @ (y - y.mean()) / (tc @ tc))
    intercept = float(y.mean() - slope * t.mean())
    resid = y - (intercept + slope * t)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(resid @ resid) / ss_tot
    return DecayFit(slope, intercept, r2)


# --------------------------------------------------------------------- Wasserstein


@dataclass(frozen=True, eq=False)
class W2Result:
    """Exact W2 between uniform empirical measures.

    ``assignment[k]`` is the atom of ``b`` matched to the ``k``-th (replicated)
    atom of ``a``; with replication the atoms of the smaller cloud are
    repeated ``N_large / N_small`` times in order.
    """

    distance: float
    assignment: np.ndarray
    method: str


def w2_empirical(a, b) -> W2Result:
    """Wasserstein-2 distance between the empirical measures of two clouds.

    When the sizes differ, one must divide the other; the smaller cloud's
    atoms are replicated so that an exact assignment between equal-size
    point sets solves the transport problem.

    Raises
    ------
    SizeMismatch
        If neither size divides the other.
    """
    xa = as_points(a)
    xb = as_points(b)
    na, nb = xa.shape[0], xb.shape[0]
    if max(na, nb) > W2_MAX_POINTS:
        raise ValueError(f"W2 is limited to {W2_MAX_POINTS} atoms per cloud")
    if na == nb:
        method = "hungarian_exact"
    elif nb % na == 0:
        xa = np.repeat(xa, nb // na, axis=0)
        method = "replicated_exact"
    elif na % nb == 0:
        xb = np.repeat(xb, na // nb, axis=0)
        method = "replicated_exact"
    else:
        raise SizeMismatch(f"cloud sizes {na} and {nb}: neither divides the other")
    cost = cdist(xa, xb, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return W2Result(float(np.sqrt(cost[rows, cols].mean())), cols, method)


# --------------------------------------------------------------------- cosine statistics


def cosine_stats(cloud) -> dict[str, float]:
    """Mean, median and minimum of the pairwise inner products ``<x_i, x_j>``, ``i < j``.

    A single token counts as fully synchronized.
    """
    x = as_points(cloud)
    n = x.shape[0]
    if n == 1:
        return {"mean": 1.0, "median": 1.0, "min": 1.0}
    iu = np.triu_indices(n, 1)
    c = (x @ x.T)[iu]
    return {"mean": float(c.mean()), "median": float(np.median(c)), "min": float(c.min())}


def mean_squared_gap(a, b) -> float:
    """``(1/N) sum_i |a_i - b_i|^2`` for two clouds with matched labels."""
    return float(np.mean(np.sum((as_points(a) - as_points(b)) ** 2, axis=1)))


# --------------------------------------------------------------------- Lyapunov exponent


@dataclass(frozen=True, eq=False)
class LyapunovEstimate:
    lambda_hat: float
    stderr: float
    per_trial: np.ndarray
    n_intervals: int


def _geodesic(x, y):
    chord = np.linalg.norm(x - y, axis=1)
    return 2.0 * np.arcsin(np.minimum(chord / 2.0, 1.0))


def _place_at_gap(x, y, gap):
    """Point at geodesic distance ``gap`` from ``x`` in the direction of ``y``."""
    v = y - x
    v = v - np.sum(v * x, axis=1, keepdims=True) * x
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.cos(gap) * x + np.sin(gap) * v


def lyapunov_estimate(
    spec: KernelSpec,
    horizon: float,
    depth: int,
    n_trials: int,
    initial_gap: float = 1e-3,
    master_seed: int = 0,
    renorm_every: int = 8,
    window: tuple[float, float] = (1e-9, 1e-1),
    first_trial: int = 0,
) -> LyapunovEstimate:
    """Two-point estimate of the top Lyapunov exponent of the pure-noise flow.

    Each trial starts a uniform point and a companion at geodesic distance
    ``initial_gap`` and integrates both with the projected Euler scheme,
    driven by a joint draw of the common field at the two positions. Every
    ``renorm_every`` steps, or as soon as the gap leaves ``window``, the
    companion is moved back to distance ``initial_gap`` and the log growth
    factor is accumulated. The estimate of a trial is the total log growth
    divided by the horizon.

    Trial ``k`` consumes the stream ``(master_seed, k, WHOLE_RUN, LYAPUNOV)``:
    ``standard_normal((2, d))`` for the start point and direction, then
    ``standard_normal((2, d))`` per step for the two field coordinates.

    Raises
    ------
    WindowCollapse
        If fewer than ten renormalization intervals fit in the run.
    """
    if not 1e-6 <= initial_gap <= 1e-3:
        raise ValueError("initial_gap must lie in [1e-6, 1e-3]")
    if n_trials < 1:
        raise ValueError("need at least one trial")
    n_intervals = -(-depth // renorm_every)
    if n_intervals < 10:
        raise WindowCollapse(f"only {n_intervals} renormalization intervals; need at least 10")
    d = spec.dim
    dt = horizon / depth
    sq = np.sqrt(dt)
    kfun = zonal_interpolant(spec)
    k1 = float(kfun(1.0))
    shrink = dt * k1 * (d - 1) / 2.0
    rngs = [derive_stream(master_seed, first_trial + t, WHOLE_RUN, Role.LYAPUNOV) for t in range(n_trials)]
    start = np.stack([r.standard_normal((2, d)) for r in rngs])
    x = start[:, 0] / np.linalg.norm(start[:, 0], axis=1, keepdims=True)
    y = _place_at_gap(x, x + start[:, 1], initial_gap)
    log_growth = np.zeros(n_trials)
    lo, hi = window
    # normals are drawn in blocks of layers to bound memory
    block = max(1, min(depth, 4_000_000 // (n_trials * 2 * d)))
    done = 0
    since = 0
    while done < depth:
        nb = min(block, depth - done)
        z = np.stack([r.standard_normal((nb, 2, d)) for r in rngs], axis=1)  # (nb, trials, 2, d)
        for k in range(nb):
            t = np.clip(np.sum(x * y, axis=1), -1.0, 1.0)
            k12 = np.atleast_1d(kfun(t))
            if k1 > 0:
                gx = np.sqrt(k1) * z[k, :, 0]
                cond = np.sqrt(np.maximum(k1 - k12**2 / k1, 0.0))
                gy = (k12 / np.sqrt(k1))[:, None] * z[k, :, 0] + cond[:, None] * z[k, :, 1]
            else:
                gx = gy = np.zeros_like(x)
            x = _pure_noise_update(x, gx, shrink, sq)
            y = _pure_noise_update(y, gy, shrink, sq)
            since += 1
            gap = _geodesic(x, y)
            last = done + k + 1 == depth
            out = (gap < lo) | (gap > hi)
            if since == renorm_every or last or np.any(out):
                if since == renorm_every or last:
                    idx = slice(None)
                    since = 0
                else:
                    idx = out
                log_growth[idx] += np.log(np.maximum(gap[idx], 1e-300) / initial_gap)
                if not last:
                    y[idx] = _place_at_gap(x[idx], y[idx], initial_gap)
        done += nb
    per_trial = log_growth / horizon
    stderr = float(per_trial.std(ddof=1) / np.sqrt(n_trials)) if n_trials > 1 else float("nan")
    return LyapunovEstimate(float(per_trial.mean()), stderr, per_trial, n_intervals)


def _pure_noise_update(x, g, shrink, sq):
    out = x * (1.0 - shrink) + sq * (g - np.sum(g * x, axis=1, keepdims=True) * x)
    return out / np.linalg.norm(out, axis=1, keepdims=True)
