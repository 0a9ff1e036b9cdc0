"""Softmax self-attention vector field over a token cloud."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sphere import as_points


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Query, key and value matrices with a scalar output multiplier.

    The logit between tokens ``x`` and ``y`` is ``<Q x, K y>`` and the update
    for ``x`` is ``scale * sum_j softmax_j <Q x, K y_j> V y_j``.
    """

    q_matrix: np.ndarray
    k_matrix: np.ndarray
    v_matrix: np.ndarray
    scale: float = 1.0
    beta: float | None = None

    def __post_init__(self):
        mats = []
        for name in ("q_matrix", "k_matrix", "v_matrix"):
            m = np.array(getattr(self, name), dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} must be square, got shape {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} must be finite")
            m.setflags(write=False)
            object.__setattr__(self, name, m)
            mats.append(m)
        if len({m.shape for m in mats}) != 1:
            raise ValueError("Q, K, V must share one dimension")
        object.__setattr__(self, "scale", float(self.scale))
        # Q^T K is what enters the logits; cache it once
        qk = self.q_matrix.T @ self.k_matrix
        qk.setflags(write=False)
        object.__setattr__(self, "_qk", qk)

    @classmethod
    def isotropic(cls, dim: int, beta: float, scale: float = 1.0) -> "AttentionParams":
        """``Q = sqrt(beta) Id``, ``K = sqrt(beta) Id``, ``V = Id`` so ``Q^T K = beta Id``."""
        if beta < 0:
            raise ValueError("beta must be nonnegative")
        r = np.sqrt(beta) * np.eye(dim)
        return cls(r, r, np.eye(dim), scale=scale, beta=float(beta))

    @property
    def dim(self) -> int:
        return self.q_matrix.shape[0]

    @property
    def qk(self) -> np.ndarray:
        return self._qk

    @property
    def value_norm(self) -> float:
        """Operator norm of ``V``."""
        return float(np.linalg.norm(self.v_matrix, 2))


def attention_field(params: AttentionParams, cloud, queries=None) -> np.ndarray:
    """Attention update at every query point against the cloud's empirical measure.

    Parameters
    ----------
    params : AttentionParams
    cloud : SphericalCloud or (N, d) array
        Keys and values.
    queries : (P, d) array, optional
        Evaluation points; defaults to the cloud itself.

    Returns
    -------
    (P, d) array
    """
    x = as_points(cloud)
    q = x if queries is None else np.asarray(queries, dtype=float)
    if params.scale == 0.0:
        return np.zeros_like(q)
    logits = q @ params.qk @ x.T
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=1, keepdims=True)
    return params.scale * (weights @ (x @ params.v_matrix.T))


def attention(params: AttentionParams, cloud, query_index: int) -> np.ndarray:
    """Attention update for a single token of the cloud."""
    x = as_points(cloud)
    n = x.shape[0]
    if not 0 <= query_index < n:
        raise IndexError(f"query_index {query_index} out of range for {n} tokens")
    return attention_field(params, x, x[query_index : query_index + 1])[0]
