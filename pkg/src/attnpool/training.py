"""Optimization loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .attention import inter_head_cosine
from .data import Dataset, planted_cells_of, planted_layout, SyntheticSpec
from .errors import ContractError, DimensionError, FormatError, NumericalError
from .model import ModelConfig, forward, init_params, is_backbone_param, loss_and_grads
from .temporal import POOLINGS, frame_importance, joint_softmax, pooled_probs

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    frames: int = 16
    epochs: int = 30
    batch_size: int = 16
    weight_decay: float = 5e-5
    lr_backbone: float = 1e-5
    lr_head: float = 0.1
    momentum: float = 0.9
    reg: float = 0.0
    restart_period: int = 10
    restart_mult: int = 2
    eta_min_ratio: float = 1e-3
    schedule: str = "cosine"  # "cosine" or "step"
    pooling: str = "tp"
    augment: bool = True
    crop_fraction: float = 7 / 8
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ContractError("frames, epochs and batch_size must be >= 1")
        if self.lr_head <= 0 or self.lr_backbone <= 0:
            raise ContractError("learning rates must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1 or self.reg < 0:
            raise ContractError("weight_decay >= 0, 0 <= momentum < 1 and reg >= 0 are required")
        if self.restart_period < 1 or self.restart_mult < 1:
            raise ContractError("restart_period and restart_mult must be >= 1")
        if self.schedule not in ("cosine", "step"):
            raise ContractError(f"schedule must be 'cosine' or 'step', got {self.schedule!r}")
        if self.pooling not in POOLINGS:
            raise ContractError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if not 0 < self.crop_fraction <= 1:
            raise ContractError("crop_fraction must lie in (0, 1]")


# ---------------------------------------------------------------- schedule and optimizer


def sgdr_learning_rate(t: float, T: float, eta_max: float, eta_min: float) -> float:
    """Cosine-annealed rate at position ``t`` of a cycle of length ``T``."""
    if not 0 <= t <= T:
        raise ContractError(f"cycle position t={t} outside [0, {T}]")
    if t == 0:
        return eta_max
    if t == T:
        return eta_min
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t / T))


def cycle_position(progress: float, period: int, mult: int) -> tuple[float, float]:
    """Map training progress in epochs to (position within cycle, cycle length)."""
    start, T = 0.0, float(period)
    while progress >= start + T:
        start += T
        T *= mult
    return progress - start, T


def learning_rate(progress: float, eta_max: float, config: TrainConfig) -> float:
    eta_min = config.eta_min_ratio * eta_max
    t, T = cycle_position(progress, config.restart_period, config.restart_mult)
    if config.schedule == "step":
        return eta_max if t < T / 2 else eta_min
    return sgdr_learning_rate(t, T, eta_max, eta_min)


def sgd_momentum_step(
    params: dict[str, np.ndarray],
    buffers: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: Callable[[str], float] | float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place update: buf = momentum*buf + grad + wd*param; param -= lr*buf."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or buffers[name].shape != p.shape:
            raise DimensionError(f"{name}: param {p.shape}, grad {g.shape}, buffer {buffers[name].shape}")
        buf = momentum * buffers[name] + g + weight_decay * p
        buffers[name] = buf
        rate = lr(name) if callable(lr) else lr
        params[name] = p - rate * buf


# ---------------------------------------------------------------- sampling and augmentation


def sample_frames(total: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted frame indices; without replacement when enough frames exist.

    Short clips keep every frame at least once and fill the remainder with
    replacement.
    """
    if total < 1 or count < 1:
        raise ContractError("need at least one frame to sample from and to")
    if total >= count:
        idx = rng.choice(total, size=count, replace=False)
    else:
        idx = np.concatenate([np.arange(total), rng.integers(0, total, size=count - total)])
    return np.sort(idx)


def _resize_nearest(img: np.ndarray, H: int, W: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.minimum(((np.arange(H) + 0.5) * h / H).astype(int), h - 1)
    cols = np.minimum(((np.arange(W) + 0.5) * w / W).astype(int), w - 1)
    return img[rows][:, cols]


def augment(
    image: np.ndarray,
    rng: np.random.Generator | None,
    train: bool = True,
    crop: tuple[int, int] | None = None,
    crop_fraction: float = 7 / 8,
) -> np.ndarray:
    """Random mirror + crop in train mode, center crop in eval mode; resized back to the input size."""
    H, W = image.shape[:2]
    ch, cw = crop if crop is not None else (round(H * crop_fraction), round(W * crop_fraction))
    if ch > H or cw > W or ch < 1 or cw < 1:
        raise ContractError(f"crop {ch}x{cw} does not fit image {H}x{W}")
    if train:
        if rng is None:
            raise ContractError("train-mode augmentation needs an rng")
        if rng.random() < 0.5:
            image = image[:, ::-1]
        top = int(rng.integers(0, H - ch + 1))
        left = int(rng.integers(0, W - cw + 1))
    else:
        top, left = (H - ch) // 2, (W - cw) // 2
    out = image[top : top + ch, left : left + cw]
    return np.ascontiguousarray(_resize_nearest(out, H, W))


def sample_stream(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Per-sample rng so loader concurrency never changes results."""
    return np.random.default_rng([seed, epoch, index])


def make_clip(video: np.ndarray, config: TrainConfig, rng: np.random.Generator, train: bool) -> np.ndarray:
    idx = sample_frames(len(video), config.frames, rng)
    clip = video[idx]
    if clip.ndim == 4 and config.augment:
        clip = np.stack([augment(f, rng, train, crop_fraction=config.crop_fraction) for f in clip])
    return clip


def eval_clip(video: np.ndarray, config: TrainConfig | None) -> np.ndarray:
    if video.ndim == 4 and (config is None or config.augment):
        frac = config.crop_fraction if config else 7 / 8
        return np.stack([augment(f, None, False, crop_fraction=frac) for f in video])
    return video


# ---------------------------------------------------------------- state and checkpoints


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    log: list[dict] = field(default_factory=list)


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


CKPT_MAGIC = b"APCK"
CKPT_VERSION = 1


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    if "backbone" in d:
        d["backbone"]["channels"] = list(d["backbone"]["channels"])
    return d


def encode_checkpoint(state: TrainState, model_config: ModelConfig, train_config: TrainConfig) -> bytes:
    tensors = []
    chunks = []
    for group, store in (("param", state.params), ("momentum", state.buffers)):
        for name in sorted(store):
            arr = np.ascontiguousarray(store[name], dtype="<f8")
            tensors.append({"group": group, "name": name, "shape": list(arr.shape)})
            chunks.append(arr.tobytes())
    header = {
        "model": _config_dict(model_config),
        "train": _config_dict(train_config),
        "step": state.step,
        "epoch": state.epoch,
        "rng": state.rng.bit_generator.state,
        "log": state.log,
        "tensors": tensors,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hb)) + hb + b"".join(chunks)


def decode_checkpoint(data: bytes) -> tuple[TrainState, ModelConfig, TrainConfig]:
    if len(data) < 16 or data[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if 16 + hlen > len(data):
        raise FormatError("truncated checkpoint header", len(data))
    header = json.loads(data[16 : 16 + hlen])
    offset = 16 + hlen
    params, buffers = {}, {}
    for t in header["tensors"]:
        n = math.prod(t["shape"])
        end = offset + 8 * n
        if end > len(data):
            raise FormatError(f"truncated tensor {t['name']}", offset)
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(t["shape"]).astype(np.float64)
        (params if t["group"] == "param" else buffers)[t["name"]] = arr
        offset = end
    if offset != len(data):
        raise FormatError("trailing bytes after checkpoint payload", offset)
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = header["rng"]
    state = TrainState(params, buffers, rng, header["step"], header["epoch"], header["log"])
    return state, ModelConfig(**header["model"]), TrainConfig(**header["train"])


def save_checkpoint(path, state: TrainState, model_config: ModelConfig, train_config: TrainConfig) -> None:
    Path(path).write_bytes(encode_checkpoint(state, model_config, train_config))


def load_checkpoint(path) -> tuple[TrainState, ModelConfig, TrainConfig]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    pooling: str
    accuracy: float
    confusion: np.ndarray
    predictions: list[int]
    importance: list[list[float]]
    ids: list[str]

    def to_json(self) -> dict:
        return {
            "pooling": self.pooling,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "videos": [
                {"id": i, "predicted": p, "top_frame": int(np.argmax(imp)), "importance": imp}
                for i, p, imp in zip(self.ids, self.predictions, self.importance)
            ],
        }


def _batched_scores(params, dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig | None, batch=64):
    """Per-video (scores, attention) over all frames, deterministic."""
    out = []
    i = 0
    n = len(dataset)
    while i < n:
        j = i
        length = len(dataset.videos[i])
        while j < n and j - i < batch and len(dataset.videos[j]) == length:
            j += 1
        clips = np.stack([eval_clip(v, train_config) for v in dataset.videos[i:j]])
        res = forward(params, clips, model_config)
        A = res.attention
        for k in range(j - i):
            out.append((res.scores[k], None if A is None else A[k]))
        i = j
    return out


def evaluate(
    dataset: Dataset,
    params: dict[str, np.ndarray],
    model_config: ModelConfig,
    pooling: str = "tp",
    train_config: TrainConfig | None = None,
) -> EvalReport:
    if pooling not in POOLINGS:
        raise ContractError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
    E = model_config.num_classes
    if dataset.manifest.num_classes != E:
        raise DimensionError(f"dataset has {dataset.manifest.num_classes} classes, model has {E}")
    confusion = np.zeros((E, E), dtype=np.int64)
    preds, importance = [], []
    for (O, _), y in zip(_batched_scores(params, dataset, model_config, train_config), dataset.labels):
        p = pooled_probs(O, pooling)
        c = int(np.argmax(p))
        confusion[y, c] += 1
        preds.append(c)
        importance.append([float(v) for v in frame_importance(joint_softmax(O))])
    acc = float(np.trace(confusion) / confusion.sum())
    return EvalReport(pooling, acc, confusion, preds, importance, dataset.ids)


@dataclass
class PlantedMetrics:
    attention_mass: float
    key_frame_mass: float
    head_cosine: float | None


def planted_metrics(params, model_config: ModelConfig, dataset: Dataset) -> PlantedMetrics:
    """Attention mass on the planted cell over key frames, and frame-importance mass on key frames."""
    cells = planted_cells_of(dataset.manifest)
    meta = dataset.manifest.synthetic
    L = dataset.grid[0] * dataset.grid[1]
    if meta.get("num_classes") != model_config.num_classes or (
        dataset.kind == "features" and meta.get("dim") != model_config.dim
    ):
        raise ContractError("model does not match the synthetic spec of this dataset")
    att, key, cos = [], [], []
    for s, (O, A) in zip(dataset.manifest.samples, _batched_scores(params, dataset, model_config, None)):
        keys = s.key_frames
        if keys is None:
            raise ContractError(f"sample {s.id!r} has no key-frame annotation")
        pf = frame_importance(joint_softmax(O))
        key.append(float(pf[keys].sum()))
        if A is None:
            att.append(1.0 / L)
        else:
            att.append(float(A[keys][:, :, cells[s.label]].mean()))
            if A.shape[-2] >= 2:
                cos.append(float(inter_head_cosine(A).mean()))
    return PlantedMetrics(float(np.mean(att)), float(np.mean(key)), float(np.mean(cos)) if cos else None)


def oracle_params(dataset: Dataset, model_config: ModelConfig, gain: float = 10.0) -> dict[str, np.ndarray]:
    """Hand-built parameters for a feature-space planted set: uniform attention and a readout
    aligned with each class's signal direction, so key frames score their true class highest."""
    meta = dataset.manifest.synthetic
    if not meta or model_config.input != "features":
        raise ContractError("oracle parameters need a feature-space synthetic dataset")
    spec = SyntheticSpec.from_dict({k: v for k, v in meta.items() if k != "planted_cells"})
    _, dirs = planted_layout(spec)
    params = {}
    heads = model_config.heads
    if heads:
        params["attention.W_s1"] = np.zeros((model_config.hidden, model_config.dim))
        params["attention.W_s2"] = np.zeros((heads, model_config.hidden))
    params["classifier.W_sm"] = gain * np.tile(dirs, (1, max(heads, 1)))
    return params


# ---------------------------------------------------------------- training loop


def init_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    rng = np.random.default_rng(train_config.seed)
    params = init_params(model_config, np.random.default_rng([train_config.seed, 99]))
    buffers = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainState(params, buffers, rng)


def _param_norms(params) -> dict[str, float]:
    return {k: float(np.linalg.norm(v)) if np.all(np.isfinite(v)) else float("nan") for k, v in params.items()}


def train_epoch(state: TrainState, dataset: Dataset, model_config: ModelConfig, config: TrainConfig) -> dict:
    epoch = state.epoch
    order = state.rng.permutation(len(dataset))
    nb = math.ceil(len(order) / config.batch_size)
    losses, correct = [], 0
    lr_head0 = learning_rate(epoch, config.lr_head, config)
    lr_bb0 = learning_rate(epoch, config.lr_backbone, config)
    for b in range(nb):
        idx = order[b * config.batch_size : (b + 1) * config.batch_size]
        clips = np.stack([make_clip(dataset.videos[i], config, sample_stream(config.seed, epoch, int(i)), True) for i in idx])
        labels = dataset.labels[idx]
        try:
            loss, grads, out = loss_and_grads(state.params, clips, labels, model_config, config.reg, config.pooling)
            if not math.isfinite(loss):
                raise NumericalError("non-finite loss")
        except NumericalError as exc:
            diag = {"epoch": epoch, "batch": b, "step": state.step, "param_norms": _param_norms(state.params)}
            raise TrainingDiverged(f"training diverged at epoch {epoch}, batch {b}: {exc}", diag) from exc
        probs = pooled_probs(out.scores.value, config.pooling)
        p_true = probs[np.arange(len(labels)), labels]
        if np.any(p_true < 1e-30):
            log.warning("epoch %d batch %d: label probability below 1e-30 clamped in the log", epoch, b)
        correct += int((probs.argmax(axis=1) == labels).sum())
        losses.append(loss * len(idx))
        progress = epoch + b / nb
        lr_head = learning_rate(progress, config.lr_head, config)
        lr_bb = learning_rate(progress, config.lr_backbone, config)
        sgd_momentum_step(
            state.params,
            state.buffers,
            grads,
            lambda name: lr_bb if is_backbone_param(name) else lr_head,
            config.momentum,
            config.weight_decay,
        )
        state.step += 1
    state.epoch += 1
    return {
        "epoch": state.epoch,
        "lr_head": lr_head0,
        "lr_backbone": lr_bb0,
        "train_loss": float(sum(losses) / len(order)),
        "train_acc": correct / len(order),
    }


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    config: TrainConfig,
    val: Dataset | None = None,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
    stop_after: int | None = None,
) -> TrainState:
    """Run (or continue) training up to ``config.epochs``.

    ``on_epoch`` is called after every epoch, e.g. to write a checkpoint.
    ``stop_after`` ends early after that many epochs in total (for interruption tests).
    """
    if len(dataset) == 0:
        raise ContractError("empty training set")
    if dataset.manifest.num_classes != model_config.num_classes:
        raise DimensionError(
            f"dataset has {dataset.manifest.num_classes} classes, model has {model_config.num_classes}"
        )
    if state is None:
        state = init_state(model_config, config)
    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    while state.epoch < last:
        row = train_epoch(state, dataset, model_config, config)
        for pooling in POOLINGS:
            row[f"val_acc_{pooling}"] = (
                evaluate(val, state.params, model_config, pooling, config).accuracy if val is not None else float("nan")
            )
        if val is None:
            row = {k: v for k, v in row.items() if not k.startswith("val_")}
        state.log.append(row)
        log.info("epoch %(epoch)d loss %(train_loss).4f acc %(train_acc).3f", row)
        if on_epoch is not None:
            on_epoch(state)
    return state


LOG_COLUMNS = ["epoch", "lr_head", "lr_backbone", "train_loss", "train_acc"] + [f"val_acc_{p}" for p in POOLINGS]


def write_log_csv(rows: list[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
