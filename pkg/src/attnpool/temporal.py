"""Video-level pooling of per-frame class scores.

Scores are (..., F, E) arrays: frame f, class c. Temporal softmax pooling
normalizes all F*E scores jointly; marginalizing the joint distribution over
frames gives class probabilities, over classes gives frame importance.

The independent-frame loss sums per-frame cross-entropies. It is related to
average pooling of the pre-softmax scores (both treat frames symmetrically),
but the two are not numerically identical, so both are provided.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError

POOLINGS = ("tp", "avg", "max", "indep")


def class_scores(V, W_sm):
    """O[f] = W_sm @ V[f] for frame summaries V of shape (..., F, N*D)."""
    vv, wv = nx.value_of(V), nx.value_of(W_sm)
    if vv.shape[-1] != wv.shape[1]:
        raise DimensionError(f"frame summaries of width {vv.shape[-1]} do not match W_sm {wv.shape}")
    return nx.matmul(V, nx.transpose(W_sm))


def joint_softmax(O):
    return nx.stable_softmax(O, axes=(-2, -1))


def class_marginal(P):
    return nx.sum_axes(P, axes=-2)


def frame_importance(P):
    return nx.sum_axes(P, axes=-1)


def importance_display(p_frames) -> np.ndarray:
    """Frame importance rescaled so the most important frame reads 100."""
    p = np.asarray(nx.value_of(p_frames), dtype=np.float64)
    return 100.0 * p / p.max(axis=-1, keepdims=True)


def tp_probs(O):
    return class_marginal(joint_softmax(O))


def avg_pool_probs(O):
    return nx.stable_softmax(nx.mean_axes(O, axes=-2), axes=-1)


def max_pool_probs(O):
    return nx.stable_softmax(nx.max_axis(O, axis=-2), axes=-1)


def per_frame_probs(O):
    return nx.stable_softmax(O, axes=-1)


def _check_labels(y, E: int):
    y = np.asarray(y, dtype=np.intp)
    if np.any(y < 0) or np.any(y >= E):
        raise ContractError(f"label out of range [0, {E})")
    return y


def independent_frame_loss(O, y):
    """Sum over frames of the cross-entropy of each frame's class softmax at label ``y``."""
    ov = nx.value_of(O)
    y = _check_labels(y, ov.shape[-1])
    labels = np.broadcast_to(np.expand_dims(y, -1), ov.shape[:-1])
    logp = nx.pick(nx.log_softmax(O, axes=-1), labels)
    return nx.scale(nx.sum_axes(logp, axes=-1), -1.0)


def pooled_probs(O, pooling: str):
    """Class probabilities under one of the pooling modes.

    For ``indep`` the frame-independent posterior is returned, i.e. the
    normalized product of per-frame class probabilities.
    """
    if pooling == "tp":
        return tp_probs(O)
    if pooling == "avg":
        return avg_pool_probs(O)
    if pooling == "max":
        return max_pool_probs(O)
    if pooling == "indep":
        return nx.stable_softmax(nx.sum_axes(nx.log_softmax(O, axes=-1), axes=-2), axes=-1)
    raise ContractError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")


def pooled_nll(O, y, pooling: str):
    """Per-video training loss for a pooling mode, shape (...)."""
    ov = nx.value_of(O)
    y = _check_labels(y, ov.shape[-1])
    if pooling == "indep":
        return independent_frame_loss(O, y)
    probs = pooled_probs(O, pooling)
    return nx.scale(nx.guarded_log(nx.pick(probs, y)), -1.0)
