"""Dataset manifests, in-memory datasets and the planted-signal generator.

A synthetic video of class c is pure Gaussian noise except on K key frames,
where the descriptor at the class's planted cell is shifted by ``s`` per
coordinate along a class-specific random direction. Attention should find
that cell and temporal pooling should find the key frames.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import DOWNSAMPLE, FeatureMap, load_feature_sequence, save_feature_sequence
from .errors import ContractError

MANIFEST_VERSION = 1
SPLITS = ("train", "val")
_SPLIT_STREAM = {"train": 0, "val": 1}


@dataclass
class VideoSample:
    id: str
    label: int
    frames: list[str] | None = None
    features: str | None = None
    key_frames: list[int] | None = None

    def to_json(self) -> dict:
        rec = {"id": self.id, "label": self.label}
        if self.features is not None:
            rec["features"] = self.features
        else:
            rec["frames"] = list(self.frames or [])
        if self.key_frames is not None:
            rec["key_frames"] = list(self.key_frames)
        return rec


@dataclass
class DatasetManifest:
    num_classes: int
    class_names: list[str]
    split: str
    samples: list[VideoSample]
    synthetic: dict | None = None
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def find(self, video_id: str) -> VideoSample:
        for s in self.samples:
            if s.id == video_id:
                return s
        raise KeyError(video_id)

    def to_json(self) -> dict:
        doc = {
            "version": MANIFEST_VERSION,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "split": self.split,
            "samples": [s.to_json() for s in self.samples],
        }
        if self.synthetic is not None:
            doc["synthetic"] = self.synthetic
        return doc


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True) + "\n")


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ContractError(f"{path}: manifest must be a JSON object")
    if doc.get("version") != MANIFEST_VERSION:
        raise ContractError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    E = doc.get("num_classes")
    names = doc.get("class_names")
    split = doc.get("split")
    samples = doc.get("samples")
    if not isinstance(E, int) or E < 2:
        raise ContractError(f"{path}: num_classes must be an integer >= 2")
    if not isinstance(names, list) or len(names) != E:
        raise ContractError(f"{path}: class_names must list exactly {E} names")
    if split not in SPLITS:
        raise ContractError(f"{path}: split must be one of {SPLITS}, got {split!r}")
    if not isinstance(samples, list):
        raise ContractError(f"{path}: samples must be a list")

    manifest = DatasetManifest(E, [str(n) for n in names], split, [], doc.get("synthetic"), path.parent)
    seen = set()
    for i, rec in enumerate(samples):
        where = f"{path}: sample #{i}"
        if not isinstance(rec, dict) or "id" not in rec or "label" not in rec:
            raise ContractError(f"{where}: needs 'id' and 'label'")
        vid, label = str(rec["id"]), rec["label"]
        if vid in seen:
            raise ContractError(f"{where}: duplicate id {vid!r}")
        seen.add(vid)
        if not isinstance(label, int) or not 0 <= label < E:
            raise ContractError(f"{where} ({vid!r}): label {label!r} outside [0, {E})")
        has_frames, has_feat = "frames" in rec, "features" in rec
        if has_frames == has_feat:
            raise ContractError(f"{where} ({vid!r}): exactly one of 'frames' or 'features' is required")
        if has_frames and (not isinstance(rec["frames"], list) or not rec["frames"]):
            raise ContractError(f"{where} ({vid!r}): 'frames' must be a nonempty list")
        sample = VideoSample(
            vid,
            label,
            frames=[str(f) for f in rec["frames"]] if has_frames else None,
            features=str(rec["features"]) if has_feat else None,
            key_frames=rec.get("key_frames"),
        )
        if check_files:
            for rel in sample.frames or [sample.features]:
                if not manifest.resolve(rel).is_file():
                    raise ContractError(f"{where} ({vid!r}): missing file {rel}")
        manifest.samples.append(sample)
    return manifest


# ---------------------------------------------------------------- in-memory datasets


@dataclass
class Dataset:
    """Decoded clips: ``videos[i]`` is (F_i, L, D) descriptors or (F_i, H, W, C) images."""

    manifest: DatasetManifest
    videos: list[np.ndarray]
    labels: np.ndarray
    grid: tuple[int, int]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.manifest.samples]

    @property
    def kind(self) -> str:
        return "features" if self.videos[0].ndim == 3 else "images"

    def __len__(self) -> int:
        return len(self.videos)


def worker_count() -> int:
    """Loader threads; ATTNPOOL_THREADS caps it. Affects speed only."""
    try:
        cap = int(os.environ.get("ATTNPOOL_THREADS", "0"))
    except ValueError:
        cap = 0
    n = os.cpu_count() or 1
    return max(1, min(n, cap) if cap > 0 else n)


def load_image(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def _load_sample(manifest: DatasetManifest, sample: VideoSample) -> tuple[np.ndarray, tuple[int, int]]:
    if sample.features is not None:
        maps = load_feature_sequence(manifest.resolve(sample.features))
        return np.stack([m.values for m in maps]), maps[0].grid
    frames = np.stack([load_image(manifest.resolve(f)) for f in sample.frames])
    H, W = frames.shape[1:3]
    return frames, (H // DOWNSAMPLE, W // DOWNSAMPLE)


def load_dataset(manifest: DatasetManifest | str | os.PathLike) -> Dataset:
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    if not manifest.samples:
        raise ContractError("dataset has no samples")
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        loaded = list(pool.map(lambda s: _load_sample(manifest, s), manifest.samples))
    videos = [v for v, _ in loaded]
    grid = loaded[0][1]
    for s, (v, g) in zip(manifest.samples, loaded):
        if g != grid or v.shape[1:] != videos[0].shape[1:]:
            raise ContractError(f"sample {s.id!r} has inconsistent dims {v.shape[1:]} vs {videos[0].shape[1:]}")
    labels = np.array([s.label for s in manifest.samples], dtype=np.intp)
    return Dataset(manifest, videos, labels, grid)


# ---------------------------------------------------------------- synthetic generator


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    grid: tuple[int, int] = (4, 4)
    dim: int = 16
    frames: int = 24
    key_frames: int = 4
    signal: float = 3.0
    noise: float = 1.0
    videos_per_class: int = 50
    seed: int = 7
    mode: str = "features"  # or "pixels"
    channels: int = 3

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.validate()

    def validate(self) -> None:
        h, w = self.grid
        if self.num_classes < 2:
            raise ContractError("synthetic spec needs num_classes >= 2")
        if h < 1 or w < 1 or self.dim < 1 or self.frames < 1 or self.videos_per_class < 1:
            raise ContractError("grid, dim, frames and videos_per_class must be positive")
        if not 1 <= self.key_frames <= self.frames:
            raise ContractError(f"key_frames={self.key_frames} must lie in [1, frames={self.frames}]")
        if self.num_classes > h * w:
            raise ContractError(f"{self.num_classes} classes need distinct planted cells but the grid has {h * w}")
        if self.signal < 0 or self.noise < 0:
            raise ContractError("signal and noise must be nonnegative")
        if self.mode not in ("features", "pixels"):
            raise ContractError(f"mode must be 'features' or 'pixels', got {self.mode!r}")

    @property
    def cells(self) -> int:
        return self.grid[0] * self.grid[1]

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def planted_layout(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-class planted cell indices and signal directions, fixed by the seed.

    Directions have unit RMS per coordinate (norm sqrt(width)), so ``signal``
    and ``noise`` are on the same per-coordinate scale.
    """
    rng = np.random.default_rng([spec.seed, 1_000_003])
    cells = rng.choice(spec.cells, size=spec.num_classes, replace=False)
    width = spec.channels if spec.mode == "pixels" else spec.dim
    dirs = rng.standard_normal((spec.num_classes, width))
    dirs *= np.sqrt(width) / np.linalg.norm(dirs, axis=1, keepdims=True)
    return cells, dirs


def synth_video(spec: SyntheticSpec, label: int, split: str, index: int) -> tuple[np.ndarray, list[int]]:
    """One planted-signal clip of shape (F, L, D) and its sorted key-frame indices."""
    cells, dirs = planted_layout(spec)
    rng = np.random.default_rng([spec.seed, _SPLIT_STREAM[split], index])
    keys = sorted(int(k) for k in rng.choice(spec.frames, size=spec.key_frames, replace=False))
    x = spec.noise * rng.standard_normal((spec.frames, spec.cells, spec.dim))
    x[keys, cells[label], :] += spec.signal * dirs[label]
    return x, keys


def _synth_pixels(spec: SyntheticSpec, label: int, split: str, index: int) -> tuple[np.ndarray, list[int]]:
    cells, dirs = planted_layout(spec)
    rng = np.random.default_rng([spec.seed, _SPLIT_STREAM[split], index])
    keys = sorted(int(k) for k in rng.choice(spec.frames, size=spec.key_frames, replace=False))
    h, w = spec.grid
    H, W = h * DOWNSAMPLE, w * DOWNSAMPLE
    img = 0.5 + 0.1 * spec.noise * rng.standard_normal((spec.frames, H, W, spec.channels))
    r, c = divmod(int(cells[label]), w)
    patch = 0.15 * spec.signal * dirs[label] / np.sqrt(spec.channels)
    img[keys, r * DOWNSAMPLE + 2 : (r + 1) * DOWNSAMPLE - 2, c * DOWNSAMPLE + 2 : (c + 1) * DOWNSAMPLE - 2, :] += patch
    return np.clip(img, 0.0, 1.0), keys


def generate_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike, splits=SPLITS) -> dict[str, DatasetManifest]:
    """Write FEAT files (or PNG frames in pixel mode) plus one manifest per split."""
    spec.validate()
    out = Path(out_dir)
    cells, _ = planted_layout(spec)
    meta = asdict(spec)
    meta["grid"] = list(spec.grid)
    meta["planted_cells"] = [int(c) for c in cells]
    names = [f"class{c}" for c in range(spec.num_classes)]
    manifests = {}
    for split in splits:
        (out / split).mkdir(parents=True, exist_ok=True)
        samples = []
        index = 0
        for label in range(spec.num_classes):
            for _ in range(spec.videos_per_class):
                vid = f"{split}_{index:05d}"
                if spec.mode == "features":
                    x, keys = synth_video(spec, label, split, index)
                    rel = f"{split}/{vid}.feat"
                    save_feature_sequence([FeatureMap(f, spec.grid) for f in x], out / rel)
                    samples.append(VideoSample(vid, label, features=rel, key_frames=keys))
                else:
                    from PIL import Image

                    x, keys = _synth_pixels(spec, label, split, index)
                    frame_paths = []
                    for f, img in enumerate(x):
                        rel = f"{split}/{vid}_{f:03d}.png"
                        u8 = np.round(img * 255).astype(np.uint8)
                        Image.fromarray(u8.squeeze(-1) if u8.shape[-1] == 1 else u8).save(out / rel)
                        frame_paths.append(rel)
                    samples.append(VideoSample(vid, label, frames=frame_paths, key_frames=keys))
                index += 1
        manifest = DatasetManifest(spec.num_classes, names, split, samples, meta, out)
        write_manifest(manifest, out / f"{split}.json")
        manifests[split] = manifest
    return manifests


def planted_cells_of(manifest: DatasetManifest) -> np.ndarray:
    if not manifest.synthetic or "planted_cells" not in manifest.synthetic:
        raise ContractError("manifest carries no planted-signal metadata")
    return np.asarray(manifest.synthetic["planted_cells"], dtype=np.intp)


def nearest_centroid_accuracy(train: Dataset, val: Dataset) -> float:
    """Oracle check that the planted task is learnable.

    Uses knowledge of the construction: each clip is summarized by the
    key-frame mean of the descriptors at every planted cell, and classified
    by the nearest class centroid from the training split.
    """
    cells = planted_cells_of(train.manifest)

    def summarize(ds: Dataset) -> np.ndarray:
        rows = []
        for s, v in zip(ds.manifest.samples, ds.videos):
            keys = s.key_frames if s.key_frames else list(range(len(v)))
            rows.append(v[keys][:, cells, :].mean(axis=0).ravel())
        return np.array(rows)

    xt, xv = summarize(train), summarize(val)
    E = train.manifest.num_classes
    centroids = np.stack([xt[train.labels == c].mean(axis=0) for c in range(E)])
    d = ((xv[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float((d.argmin(axis=1) == val.labels).mean())
