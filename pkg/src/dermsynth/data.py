"""Real-image ingestion, logo removal, classifier preprocessing and seeded splits."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from PIL import Image

from .errors import ConfigError, DecodeError, EmptyClass, InsufficientClassSize, MaskOutOfBounds, UnreadableImage
from .manifest import DatasetManifest, ImageRecord, Source, sha256_file
from .prompts import LABEL_RE, stable_hash64

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class RealDatasetSource:
    root: Path
    skip_unreadable: bool = False

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))


@dataclass(frozen=True)
class SplitSpec:
    finetune_fraction: float = 0.10
    seed: int = 0
    stratified: bool = True
    min_per_class: int = 1

    def __post_init__(self):
        if not 0.0 < self.finetune_fraction < 1.0:
            raise ConfigError(f"finetune_fraction must lie in (0, 1), got {self.finetune_fraction}")
        if self.min_per_class < 0:
            raise ConfigError("min_per_class must be non-negative")


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: tuple[int, int] = (224, 224)  # (width, height)
    channel_means: tuple[float, float, float] = IMAGENET_MEAN
    channel_stds: tuple[float, float, float] = IMAGENET_STD
    logo_removal: str = "none"  # "none" | "mask_inpaint"
    mask_region: tuple[int, int, int, int] | None = None  # (x, y, width, height) in original pixels

    def __post_init__(self):
        object.__setattr__(self, "target_size", tuple(int(v) for v in self.target_size))
        object.__setattr__(self, "channel_means", tuple(float(v) for v in self.channel_means))
        object.__setattr__(self, "channel_stds", tuple(float(v) for v in self.channel_stds))
        if self.mask_region is not None:
            object.__setattr__(self, "mask_region", tuple(int(v) for v in self.mask_region))
        if len(self.target_size) != 2 or min(self.target_size) <= 0:
            raise ConfigError(f"target_size must be two positive ints, got {self.target_size}")
        if len(self.channel_means) != 3 or len(self.channel_stds) != 3:
            raise ConfigError("channel_means and channel_stds need three values")
        if min(self.channel_stds) <= 0:
            raise ConfigError("channel_stds must be strictly positive")
        if self.logo_removal not in ("none", "mask_inpaint"):
            raise ConfigError(f"unknown logo_removal {self.logo_removal!r}")
        if self.logo_removal == "mask_inpaint" and self.mask_region is None:
            raise ConfigError("logo_removal=mask_inpaint requires mask_region")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "PreprocessConfig":
        return cls(**(d or {}))


# ---------------------------------------------------------------------------
# ingestion

def load_image(path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except Exception as exc:
        raise UnreadableImage(path, str(exc)) from exc


def ingest_real(source: RealDatasetSource | str | Path) -> DatasetManifest:
    """Scan ``<root>/<label>/*.{jpg,jpeg,png}`` into a manifest of real records."""
    if not isinstance(source, RealDatasetSource):
        source = RealDatasetSource(source)
    root = source.root
    if not root.is_dir():
        raise ConfigError(f"real dataset root {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise ConfigError(f"no class folders under {root}")
    records = []
    for d in class_dirs:
        if not LABEL_RE.match(d.name):
            raise ConfigError(f"class folder {d.name!r} does not match [a-z0-9_]+")
        files = sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        kept = 0
        for f in files:
            try:
                load_image(f)
            except UnreadableImage:
                if not source.skip_unreadable:
                    raise
                log.warning("skipping unreadable image %s", f)
                continue
            records.append(
                ImageRecord(
                    relative_path=f"{d.name}/{f.name}",
                    condition_label=d.name,
                    source=Source.REAL,
                    checksum=sha256_file(f),
                )
            )
            kept += 1
        if kept == 0:
            raise EmptyClass(f"class folder {d} contains no readable images")
    return DatasetManifest(tuple(records), tuple(d.name for d in class_dirs), root_hint=str(root.resolve())).sorted()


# ---------------------------------------------------------------------------
# logo removal

def _mask_bounds(region, width, height):
    x, y, w, h = region
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
        raise MaskOutOfBounds(f"mask {tuple(region)} exceeds {width}x{height} image")
    if w == width and h == height:
        raise MaskOutOfBounds("mask covers the whole image; nothing to interpolate from")
    return x, y, w, h


def harmonic_fill(pixels: np.ndarray, region) -> np.ndarray:
    """Replace a rectangle by the solution of Laplace's equation with the surrounding pixels as boundary.

    4-neighbour stencil; neighbours outside the image are dropped (zero-flux edge).
    """
    height, width = pixels.shape[:2]
    x, y, w, h = _mask_bounds(region, width, height)
    n = w * h
    idx = np.arange(n).reshape(h, w)
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    rhs = np.zeros((n, pixels.shape[2]))
    src = pixels.astype(np.float64)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        for j in range(h):
            for i in range(w):
                gy, gx = y + j + dy, x + i + dx
                if not (0 <= gy < height and 0 <= gx < width):
                    continue
                k = idx[j, i]
                diag[k] += 1
                if y <= gy < y + h and x <= gx < x + w:
                    rows.append(k)
                    cols.append(idx[gy - y, gx - x])
                    vals.append(-1.0)
                else:
                    rhs[k] += src[gy, gx]
    A = sp.csc_matrix((np.r_[diag, vals], (np.r_[np.arange(n), rows], np.r_[np.arange(n), cols])), shape=(n, n))
    solution = splu(A).solve(rhs)
    out = pixels.copy()
    filled = np.clip(np.rint(solution), 0, 255) if np.issubdtype(pixels.dtype, np.integer) else solution
    out[y : y + h, x : x + w] = filled.reshape(h, w, -1).astype(pixels.dtype)
    return out


def remove_logo(image, config: PreprocessConfig):
    """Inpaint ``config.mask_region``; identity when logo removal is off."""
    if config.logo_removal == "none":
        return image
    as_pil = isinstance(image, Image.Image)
    arr = np.asarray(image.convert("RGB") if as_pil else image)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    out = harmonic_fill(arr, config.mask_region)
    if squeeze:
        out = out[..., 0]
    return Image.fromarray(out) if as_pil else out


# ---------------------------------------------------------------------------
# preprocessing

def preprocess(image, config: PreprocessConfig) -> np.ndarray:
    """Logo removal, bilinear resize, scale to [0, 1], per-channel standardisation -> float32 (3, H, W)."""
    if isinstance(image, (str, Path)):
        image = load_image(image)
    elif isinstance(image, (bytes, bytearray)):
        import io

        try:
            image = Image.open(io.BytesIO(image))
            image.load()
        except Exception as exc:
            raise DecodeError(str(exc)) from exc
    if isinstance(image, np.ndarray):
        image = Image.fromarray(image)
    image = image.convert("RGB")
    image = remove_logo(image, config)
    image = image.resize(config.target_size, Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(config.channel_means, dtype=np.float32)) / np.asarray(config.channel_stds, dtype=np.float32)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_arrays(manifest: DatasetManifest, config: PreprocessConfig, label_order: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Preprocess every record; labels are indices into ``label_order``."""
    index = {label: i for i, label in enumerate(label_order)}
    w, h = config.target_size
    X = np.empty((len(manifest), 3, h, w), dtype=np.float32)
    y = np.empty(len(manifest), dtype=np.int64)
    for n, rec in enumerate(manifest.records):
        X[n] = preprocess(load_image(manifest.resolve(rec)), config)
        y[n] = index[rec.condition_label]
    return X, y


# ---------------------------------------------------------------------------
# splits

def seeded_order(records: Sequence[ImageRecord], seed: int, tag: str) -> list[ImageRecord]:
    """Records ranked by a seeded hash of their path: a shuffle that ignores input order."""
    return sorted(records, key=lambda r: (stable_hash64(seed, tag, r.relative_path), r.relative_path))


def finetune_count(class_size: int, spec: SplitSpec) -> int:
    # epsilon guards float products such as 0.29 * 100 = 28.999...
    return max(spec.min_per_class, math.floor(spec.finetune_fraction * class_size + 1e-9))


def split_real(manifest: DatasetManifest, spec: SplitSpec) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded finetune/eval partition; per class ``max(min_per_class, floor(fraction * n))`` go to finetuning."""
    groups = manifest.by_class()
    chosen: list[ImageRecord] = []
    if spec.stratified:
        for label, recs in groups.items():
            need = math.ceil(spec.min_per_class / spec.finetune_fraction - 1e-9)
            if len(recs) < need:
                raise InsufficientClassSize(
                    f"class {label!r} has {len(recs)} items; stratified split needs >= {need}"
                )
            chosen += seeded_order(recs, spec.seed, "split")[: finetune_count(len(recs), spec)]
    else:
        total = max(1, math.floor(spec.finetune_fraction * len(manifest) + 1e-9))
        chosen = seeded_order(manifest.records, spec.seed, "split")[:total]
        have = {label: 0 for label in groups}
        for r in chosen:
            have[r.condition_label] += 1
        starved = [label for label, c in have.items() if c < spec.min_per_class]
        if starved:
            raise InsufficientClassSize(f"unstratified split left classes {starved} below min_per_class")
    picked = {r.relative_path for r in chosen}
    finetune = manifest.subset(r for r in manifest.records if r.relative_path in picked)
    evaluation = manifest.subset(r for r in manifest.records if r.relative_path not in picked)
    return finetune, evaluation


__all__ = [
    "RealDatasetSource",
    "SplitSpec",
    "PreprocessConfig",
    "ingest_real",
    "remove_logo",
    "harmonic_fill",
    "preprocess",
    "load_image",
    "load_arrays",
    "split_real",
    "seeded_order",

]
