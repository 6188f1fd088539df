"""Local descriptor extraction: a small trainable conv net and FEAT file I/O."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ContractError, FormatError

DOWNSAMPLE = 16
FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
_HEADER = struct.Struct("<4s7I")  # magic, version, F, h, w, D, reserved x2


@dataclass
class FeatureMap:
    """Local descriptors of one frame: ``values`` has shape (h * w, D), row-major over the grid."""

    values: np.ndarray
    grid: tuple[int, int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        h, w = self.grid
        if h <= 0 or w <= 0 or self.values.ndim != 2 or self.values.shape[0] != h * w or self.values.shape[1] <= 0:
            raise ContractError(f"feature map of shape {self.values.shape} does not fit grid {self.grid}")

    @property
    def L(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]


@dataclass
class BackboneConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (8, 16, 32, 16)
    kernel_size: int = 3
    padding: int | None = None  # None -> "same" padding, kernel_size // 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4:
            raise ContractError("the backbone needs exactly 4 blocks to downsample by 16")
        if self.kernel_size % 2 != 1:
            raise ContractError("kernel_size must be odd")

    @property
    def out_dim(self) -> int:
        return self.channels[-1]

    @property
    def pad(self) -> int:
        return self.kernel_size // 2 if self.padding is None else self.padding


@dataclass
class BackboneParams:
    config: BackboneConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    weights = {}
    cin = config.in_channels
    k = config.kernel_size
    for i, cout in enumerate(config.channels):
        weights[f"backbone.conv{i}.kernel"] = _glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout)
        weights[f"backbone.conv{i}.bias"] = np.zeros(cout)
        cin = cout
    return BackboneParams(config, weights)


def backbone_forward(images, weights: dict, config: BackboneConfig):
    """Run the conv stack on a (..., H, W, C) batch and return (..., L, D) descriptors.

    ``weights`` maps parameter names to arrays or tape ``Tensor``s.
    """
    xv = nx.value_of(images)
    if xv.ndim < 3:
        raise ContractError(f"expected (..., H, W, C) images, got shape {xv.shape}")
    *lead, H, W, C = xv.shape
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ContractError(f"image extents must be divisible by {DOWNSAMPLE}, got {H}x{W}")
    if C != config.in_channels:
        raise ContractError(f"expected {config.in_channels} input channels, got {C}")
    x = nx.reshape(images, (-1, H, W, C))
    for i in range(len(config.channels)):
        x = nx.conv2d(x, weights[f"backbone.conv{i}.kernel"], weights[f"backbone.conv{i}.bias"], config.pad)
        x = nx.relu(x)
        x = nx.maxpool2x2(x)
    h, w = H // DOWNSAMPLE, W // DOWNSAMPLE
    out_shape = nx.value_of(x).shape
    if out_shape[1:3] != (h, w):
        raise ContractError(
            f"backbone produced a {out_shape[1]}x{out_shape[2]} grid, expected {h}x{w}; "
            "padding-free configurations need kernel_size=1"
        )
    return nx.reshape(x, (*lead, h * w, config.out_dim))


def extract_features(frame: np.ndarray, params: BackboneParams) -> FeatureMap:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3:
        raise ContractError(f"frame must be H x W x C, got shape {frame.shape}")
    H, W, _ = frame.shape
    values = backbone_forward(frame, params.weights, params.config)
    return FeatureMap(values, (H // DOWNSAMPLE, W // DOWNSAMPLE))


# ---------------------------------------------------------------- FEAT files


def encode_feature_sequence(maps: list[FeatureMap]) -> bytes:
    if not maps:
        raise ContractError("cannot save an empty feature sequence")
    grid, D = maps[0].grid, maps[0].D
    for i, m in enumerate(maps):
        if m.grid != grid or m.D != D:
            raise ContractError(f"frame {i} has grid {m.grid}, D={m.D}; expected {grid}, D={D}")
        if not np.all(np.isfinite(m.values)):
            raise ContractError(f"frame {i} contains non-finite values")
    payload = np.stack([m.values for m in maps]).astype("<f4")
    header = _HEADER.pack(FEAT_MAGIC, FEAT_VERSION, len(maps), grid[0], grid[1], D, 0, 0)
    return header + payload.tobytes(order="C")


def decode_feature_sequence(data: bytes) -> list[FeatureMap]:
    if len(data) < _HEADER.size:
        raise FormatError(f"FEAT header needs {_HEADER.size} bytes, file has {len(data)}", len(data))
    magic, version, F, h, w, D, _, _ = _HEADER.unpack_from(data, 0)
    if magic != FEAT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FEAT_VERSION:
        raise FormatError(f"unsupported FEAT version {version}", 4)
    if F == 0 or h == 0 or w == 0 or D == 0:
        raise FormatError(f"inconsistent dims F={F} h={h} w={w} D={D}", 8)
    expected = _HEADER.size + F * h * w * D * 4
    if len(data) < expected:
        raise FormatError(f"truncated payload: header declares {F} frames, need {expected} bytes", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after payload", expected)
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(F, h * w, D)
    if not np.all(np.isfinite(arr)):
        bad = int(np.argmax(~np.isfinite(arr).ravel()))
        raise FormatError("non-finite value in payload", _HEADER.size + 4 * bad)
    return [FeatureMap(arr[f].astype(np.float64), (h, w)) for f in range(F)]


def save_feature_sequence(maps: list[FeatureMap], path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_feature_sequence(maps))


def load_feature_sequence(path: str | os.PathLike) -> list[FeatureMap]:
    return decode_feature_sequence(Path(path).read_bytes())
