"""Finite-width random MLP with Gaussian initialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernel import KernelSpec


@dataclass(frozen=True, eq=False)
class MlpParams:
    """One layer's weights ``(U, W, b_U, b_W)`` at width ``m``."""

    u_matrix: np.ndarray
    w_matrix: np.ndarray
    bias_u: np.ndarray
    bias_w: np.ndarray
    spec: KernelSpec

    def __post_init__(self):
        m, d = np.shape(self.u_matrix)
        if np.shape(self.w_matrix) != (d, m):
            raise ValueError(f"W must have shape {(d, m)}, got {np.shape(self.w_matrix)}")
        if np.shape(self.bias_u) != (m,) or np.shape(self.bias_w) != (d,):
            raise ValueError("bias shapes do not match (m, d)")
        for name in ("u_matrix", "w_matrix", "bias_u", "bias_w"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def width(self) -> int:
        return self.u_matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.u_matrix.shape[1]


def sample_mlp(rng: np.random.Generator, spec: KernelSpec, width: int) -> MlpParams:
    """Draw ``U, W`` with iid standard normal entries and the two bias vectors."""
    if width < 1:
        raise ValueError("width must be >= 1")
    d = spec.dim
    u = rng.standard_normal((width, d))
    w = rng.standard_normal((d, width))
    bu = spec.sigma_u * rng.standard_normal(width)
    bw = spec.sigma_w * rng.standard_normal(d)
    return MlpParams(u, w, bu, bw, spec)


def hidden_activations(params: MlpParams, points) -> np.ndarray:
    """Hidden-layer activations ``act(U x / sqrt(d) + b_U)``, shape ``(P, m)``."""
    x = np.asarray(points, dtype=float)
    pre = x @ params.u_matrix.T / np.sqrt(params.dim) + params.bias_u
    return params.spec.activation(pre)


def mlp_forward(params: MlpParams, points) -> np.ndarray:
    """``G(x) = W act(U x / sqrt(d) + b_U) / sqrt(m) + b_W`` for every row."""
    a = hidden_activations(params, points)
    return a @ params.w_matrix.T / np.sqrt(params.width) + params.bias_w
