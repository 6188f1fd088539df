"""Multi-head spatial self-attention over the L local descriptors of a frame.

Each head scores every descriptor with a two-layer tanh network, normalizes
the scores over the spatial cells, and forms a weighted sum of the
descriptors. Head outputs are concatenated head-major into one N*D vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .backbone import FeatureMap, _glorot
from .errors import ContractError, DimensionError


@dataclass
class AttentionParams:
    W_s1: np.ndarray  # U x D
    W_s2: np.ndarray  # N x U

    def __post_init__(self):
        self.W_s1 = np.asarray(self.W_s1, dtype=np.float64)
        self.W_s2 = np.asarray(self.W_s2, dtype=np.float64)
        if self.W_s1.ndim != 2 or self.W_s2.ndim != 2 or self.W_s2.shape[1] != self.W_s1.shape[0]:
            raise DimensionError(f"W_s1 {self.W_s1.shape} and W_s2 {self.W_s2.shape} are inconsistent")

    @property
    def hidden(self) -> int:
        return self.W_s1.shape[0]

    @property
    def heads(self) -> int:
        return self.W_s2.shape[0]

    @property
    def dim(self) -> int:
        return self.W_s1.shape[1]


def init_attention(D: int, hidden: int, heads: int, rng: np.random.Generator) -> AttentionParams:
    if hidden < 1 or heads < 1:
        raise ContractError("attention needs hidden >= 1 and heads >= 1")
    return AttentionParams(
        _glorot(rng, (hidden, D), D, hidden),
        _glorot(rng, (heads, hidden), hidden, heads),
    )


def _descriptors(R):
    return R.values if isinstance(R, FeatureMap) else R


def attention_weights(R, W_s1, W_s2):
    """softmax(W_s2 tanh(W_s1 R^T)) along the spatial axis.

    ``R`` is (..., L, D); the result is (..., N, L) with rows summing to one.
    """
    R = _descriptors(R)
    rv, w1, w2 = nx.value_of(R), nx.value_of(W_s1), nx.value_of(W_s2)
    if rv.shape[-1] != w1.shape[1]:
        raise DimensionError(f"descriptor width {rv.shape[-1]} does not match W_s1 {w1.shape}")
    if w2.shape[1] != w1.shape[0]:
        raise DimensionError(f"W_s2 {w2.shape} does not match W_s1 {w1.shape}")
    hidden = nx.tanh_map(nx.matmul(W_s1, nx.transpose(R)))
    return nx.stable_softmax(nx.matmul(W_s2, hidden), axes=-1)


def aggregate(A, R):
    """Per-head weighted sums of descriptors, flattened head-major to (..., N*D)."""
    R = _descriptors(R)
    av, rv = nx.value_of(A), nx.value_of(R)
    if av.shape[-1] != rv.shape[-2]:
        raise DimensionError(f"attention covers {av.shape[-1]} cells but R has {rv.shape[-2]}")
    heads = nx.matmul(A, R)
    hv = nx.value_of(heads)
    return nx.reshape(heads, (*hv.shape[:-2], hv.shape[-2] * hv.shape[-1]))


def orthogonality_penalty(A):
    """Squared Frobenius norm of A A^T - I, per leading index."""
    n = nx.value_of(A).shape[-2]
    gram = nx.matmul(A, nx.transpose(A))
    diff = nx.sub(gram, np.eye(n))
    return nx.sum_axes(nx.mul(diff, diff), axes=(-2, -1))


def attention_heatmap(A, grid: tuple[int, int]) -> list[np.ndarray]:
    """Reshape each head's weights to the feature grid, scaled so the max cell is 1."""
    a = np.asarray(nx.value_of(A), dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    h, w = grid
    if h * w != a.shape[-1]:
        raise ContractError(f"grid {h}x{w} does not cover {a.shape[-1]} attention cells")
    maps = []
    for row in a:
        g = row.reshape(h, w)
        peak = g.max()
        maps.append(g / peak if peak > 0 else np.zeros_like(g))
    return maps


def inter_head_cosine(A) -> np.ndarray:
    """Mean pairwise cosine similarity between the attention rows of each (..., N, L) matrix."""
    a = np.asarray(nx.value_of(A), dtype=np.float64)
    n = a.shape[-2]
    if n < 2:
        raise ContractError("cosine similarity between heads needs at least 2 heads")
    unit = a / np.linalg.norm(a, axis=-1, keepdims=True)
    gram = unit @ np.swapaxes(unit, -1, -2)
    iu = np.triu_indices(n, 1)
    return gram[..., iu[0], iu[1]].mean(axis=-1)
