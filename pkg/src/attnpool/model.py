from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import aggregate, attention_weights, init_attention, orthogonality_penalty
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .errors import ContractError, DimensionError
from .temporal import class_scores, pooled_nll


@dataclass
class ModelConfig:
    """Architecture. ``heads=0`` replaces spatial attention by a plain mean over cells."""

    num_classes: int = 4
    dim: int = 16
    hidden: int = 64
    heads: int = 2
    input: str = "features"  # "features" or "images"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.input not in ("features", "images"):
            raise ContractError(f"model input must be 'features' or 'images', got {self.input!r}")
        if self.num_classes < 2:
            raise ContractError("need at least 2 classes")
        if self.heads < 0 or self.hidden < 1 or self.dim < 1:
            raise ContractError("heads >= 0, hidden >= 1 and dim >= 1 are required")
        if self.input == "images" and self.backbone.out_dim != self.dim:
            raise ContractError(f"backbone emits D={self.backbone.out_dim} but model dim is {self.dim}")

    @property
    def summary_dim(self) -> int:
        return self.dim * max(self.heads, 1)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    if config.input == "images":
        params.update(init_backbone(config.backbone, rng).weights)
    if config.heads:
        att = init_attention(config.dim, config.hidden, config.heads, rng)
        params["attention.W_s1"] = att.W_s1
        params["attention.W_s2"] = att.W_s2
    E, width = config.num_classes, config.summary_dim
    # zero readout: attention starts with a consistent gradient toward every class signal
    params["classifier.W_sm"] = np.zeros((E, width))
    return params


def is_backbone_param(name: str) -> bool:
    return name.startswith("backbone.")


@dataclass
class Forward:
    scores: object  # (B, F, E)
    attention: object | None  # (B, F, N, L)
    descriptors: object  # (B, F, L, D)


def forward(params: dict, inputs, config: ModelConfig) -> Forward:
    """Score a batch of clips.

    ``inputs`` is (B, F, L, D) descriptors or (B, F, H, W, C) images; ``params``
    values may be arrays or tape Tensors.
    """
    xv = nx.value_of(inputs)
    if config.input == "images":
        if xv.ndim != 5:
            raise DimensionError(f"image clips must be (B, F, H, W, C), got {xv.shape}")
        R = backbone_forward(inputs, params, config.backbone)
    else:
        if xv.ndim != 4 or xv.shape[-1] != config.dim:
            raise DimensionError(f"feature clips must be (B, F, L, {config.dim}), got {xv.shape}")
        R = inputs
    if config.heads:
        A = attention_weights(R, params["attention.W_s1"], params["attention.W_s2"])
        V = aggregate(A, R)
    else:
        A = None
        V = nx.mean_axes(R, axes=-2)
    return Forward(class_scores(V, params["classifier.W_sm"]), A, R)


def clip_loss(params: dict, inputs, labels, config: ModelConfig, reg: float, pooling: str = "tp"):
    """Batch-mean of the pooled cross-entropy plus reg times the frame-averaged attention penalty."""
    out = forward(params, inputs, config)
    nll = pooled_nll(out.scores, labels, pooling)
    if config.heads and reg:
        pen = nx.mean_axes(orthogonality_penalty(out.attention), axes=-1)
        nll = nx.add(nll, nx.scale(pen, reg))
    return nx.mean_axes(nll), out


def loss_and_grads(params: dict[str, np.ndarray], inputs, labels, config: ModelConfig, reg: float, pooling="tp"):
    tape = nx.Tape()
    tensors = {k: tape.param(k, v) for k, v in params.items()}
    loss, out = clip_loss(tensors, inputs, labels, config, reg, pooling)
    return float(loss.value), nx.backward(tape, loss), out
