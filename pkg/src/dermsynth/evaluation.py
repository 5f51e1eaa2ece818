"""Accuracy, confusion matrices, multi-run aggregates and Grad-CAM saliency."""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .data import PreprocessConfig, load_arrays, load_image, preprocess as preprocess_image
from .errors import ConfigError, LabelMismatch, UnknownClass
from .manifest import DatasetManifest, ImageRecord
from .training import TrainedModel

STD_NOTE = "± is the sample standard deviation (n-1 denominator) over runs"


def confusion_counts(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return counts


def normalize_confusion(counts) -> np.ndarray:
    """Divide each row by its sum; all-zero rows stay zero."""
    counts = np.asarray(counts)
    if (counts < 0).any():
        raise ValueError("confusion counts must be non-negative")
    sums = counts.sum(axis=1, keepdims=True).astype(np.float64)
    out = np.zeros(counts.shape, dtype=np.float64)
    np.divide(counts, sums, out=out, where=sums > 0)
    return out


@dataclass
class EvalReport:
    accuracy: float
    confusion_counts: np.ndarray
    confusion_normalized: np.ndarray
    per_class_recall: list[float]
    n_samples: int
    label_order: list[str]
    empty_rows: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, y_true, y_pred, label_order: Sequence[str], meta: dict | None = None) -> "EvalReport":
        counts = confusion_counts(y_true, y_pred, len(label_order))
        n = int(counts.sum())
        if n == 0:
            raise ConfigError("cannot evaluate on zero samples")
        norm = normalize_confusion(counts)
        row_sums = counts.sum(axis=1)
        return cls(
            accuracy=float(np.trace(counts)) / n,
            confusion_counts=counts,
            confusion_normalized=norm,
            per_class_recall=[float(norm[i, i]) for i in range(len(label_order))],
            n_samples=n,
            label_order=list(label_order),
            empty_rows=[label for label, s in zip(label_order, row_sums) if s == 0],
            meta=dict(meta or {}),
        )

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "confusion_counts": self.confusion_counts.tolist(),
            "confusion_normalized": self.confusion_normalized.tolist(),
            "per_class_recall": self.per_class_recall,
            "n_samples": self.n_samples,
            "label_order": self.label_order,
            "empty_rows": self.empty_rows,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            accuracy=d["accuracy"],
            confusion_counts=np.asarray(d["confusion_counts"], dtype=np.int64),
            confusion_normalized=np.asarray(d["confusion_normalized"], dtype=np.float64),
            per_class_recall=list(d["per_class_recall"]),
            n_samples=d["n_samples"],
            label_order=list(d["label_order"]),
            empty_rows=list(d.get("empty_rows", [])),
            meta=dict(d.get("meta", {})),
        )

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        path.with_suffix(".md").write_text(self.render())
        return path

    @classmethod
    def read(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def render(self) -> str:
        return f"Accuracy: {100 * self.accuracy:.1f}% (n={self.n_samples})\n\n" + render_confusion(
            self.confusion_normalized, self.label_order
        )


def render_confusion(normalized: np.ndarray, label_order: Sequence[str]) -> str:
    """Markdown table, rows = ground truth, two decimals."""
    header = "| Ground truth \\ Prediction | " + " | ".join(label_order) + " |"
    sep = "|" + "---|" * (len(label_order) + 1)
    rows = [f"| {label} | " + " | ".join(f"{v:.2f}" for v in normalized[i]) + " |" for i, label in enumerate(label_order)]
    return "\n".join([header, sep, *rows]) + "\n"


def evaluate(model: TrainedModel, manifest: DatasetManifest, preprocess: PreprocessConfig, *, arrays=None) -> EvalReport:
    """Single argmax pass over ``manifest``; indices follow the model's label order."""
    if len(manifest) == 0:
        raise ConfigError("evaluation manifest is empty")
    unknown = {r.condition_label for r in manifest.records} - set(model.label_order)
    if unknown:
        raise LabelMismatch(f"labels {sorted(unknown)} are not known to the model")
    X, y = arrays if arrays is not None else load_arrays(manifest, preprocess, model.label_order)
    pred = model.predict(X)
    return EvalReport.from_predictions(y, pred, model.label_order, {"manifest": manifest.checksum(), "model": model.checksum()})


@dataclass(frozen=True)
class RunAggregate:
    values: tuple[float, ...]
    mean: float
    std: float
    n_runs: int

    def format(self, scale: float = 1.0) -> str:
        if self.n_runs == 1:
            return f"{scale * self.mean:.1f}"
        return f"{scale * self.mean:.1f} ± {scale * self.std:.1f}"

    def to_dict(self) -> dict:
        return {"values": list(self.values), "mean": self.mean, "std": self.std, "n_runs": self.n_runs}


def aggregate_runs(values: Sequence[float]) -> RunAggregate:
    values = tuple(float(v) for v in values)
    if not values:
        raise ValueError("aggregate_runs needs at least one value")
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return RunAggregate(values, statistics.fmean(values), std, len(values))


# ---------------------------------------------------------------------------
# Grad-CAM

@dataclass
class CamMap:
    heatmap: np.ndarray  # (H, W) in [0, 1]
    target_class: str
    channel_weights: np.ndarray | None = None
    input_ref: ImageRecord | None = None


def cam_from_maps(activations, gradients) -> tuple[np.ndarray, np.ndarray]:
    """Channel weights (spatial mean of gradients) and the rectified weighted sum, both unnormalised.

    ``activations`` and ``gradients`` have shape (C, h, w).
    """
    acts = torch.as_tensor(activations, dtype=torch.float64)
    grads = torch.as_tensor(gradients, dtype=torch.float64)
    weights = grads.mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * acts).sum(dim=0))
    return weights.numpy(), cam.numpy()


def upsample_and_normalize(cam: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``size`` = (H, W), then divide by the max; zero maps stay zero."""
    t = torch.as_tensor(cam, dtype=torch.float64)[None, None]
    up = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].clamp_min(0.0).numpy()
    peak = up.max()
    return up / peak if peak > 0 else np.zeros_like(up)


def feature_gradients(model: TrainedModel, x: torch.Tensor, class_index: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Last-stage feature maps of one image and d(class score)/d(maps)."""
    module = model.module
    module.eval()
    with torch.enable_grad():
        feats = module.features(x.unsqueeze(0)).detach().requires_grad_(True)
        score = module.head(feats)[0, class_index]
        (grads,) = torch.autograd.grad(score, feats, allow_unused=True)
    if grads is None:
        grads = torch.zeros_like(feats)
    return feats[0].detach(), grads[0]


def grad_cam(
    model: TrainedModel,
    image,
    preprocess: PreprocessConfig,
    target_class: str | None = None,
    input_ref: ImageRecord | None = None,
) -> CamMap:
    """Grad-CAM heatmap at the preprocessed input's spatial size.

    ``image`` may be a PIL image, an HxWx3 uint8 array, a path, or an already
    preprocessed (3, H, W) float array. ``target_class`` defaults to the predicted class.
    """
    if isinstance(image, np.ndarray) and image.ndim == 3 and image.shape[0] == 3 and image.dtype != np.uint8:
        x = torch.as_tensor(image)
    else:
        x = torch.as_tensor(preprocess_image(image, preprocess))
    if target_class is None:
        with torch.no_grad():
            idx = int(np.argmax(model.module(x.unsqueeze(0))[0].numpy()))
    else:
        if target_class not in model.label_order:
            raise UnknownClass(f"class {target_class!r} not in model labels {list(model.label_order)}")
        idx = model.label_order.index(target_class)
    acts, grads = feature_gradients(model, x.to(next(model.module.parameters()).dtype), idx)
    weights, cam = cam_from_maps(acts, grads)
    heat = upsample_and_normalize(cam, tuple(x.shape[1:]))
    return CamMap(heat, model.label_order[idx], weights, input_ref)


# ---------------------------------------------------------------------------
# rendering

def _colormap(values: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return colormaps["jet"](values)[..., :3] * 255.0


def overlay(cam: CamMap, original_image, alpha: float = 0.5) -> Image.Image:
    """Blend a jet-coloured heatmap over the image, weighting each pixel by alpha * heat."""
    base = original_image if isinstance(original_image, Image.Image) else Image.fromarray(np.asarray(original_image))
    base = base.convert("RGB")
    heat = cam.heatmap.astype(np.float32)
    if heat.shape != (base.height, base.width):
        heat = np.asarray(Image.fromarray(heat, mode="F").resize(base.size, Image.BILINEAR))
    heat = np.clip(heat, 0.0, 1.0).astype(np.float64)[..., None]
    orig = np.asarray(base, dtype=np.float64)
    blended = orig * (1.0 - alpha * heat) + _colormap(heat[..., 0]) * (alpha * heat)
    return Image.fromarray(np.clip(np.rint(blended), 0, 255).astype(np.uint8))


def cam_filename(record: ImageRecord | str, class_label: str) -> str:
    stem = Path(record.relative_path if isinstance(record, ImageRecord) else record).stem
    return f"{stem}__cam_{class_label}.png"


def cam_panel(original, overlays: Sequence[Image.Image], gap: int = 4) -> Image.Image:
    """Side-by-side strip: original first, then one overlay per protocol."""
    tiles = [original.convert("RGB")] + [o.convert("RGB") for o in overlays]
    h = max(t.height for t in tiles)
    w = sum(t.width for t in tiles) + gap * (len(tiles) - 1)
    panel = Image.new("RGB", (w, h), (255, 255, 255))
    x = 0
    for t in tiles:
        panel.paste(t, (x, 0))
        x += t.width + gap
    return panel


def original_for_display(record: ImageRecord, manifest: DatasetManifest, config: PreprocessConfig) -> Image.Image:
    """The record's image resized to the classifier input size, for side-by-side panels."""
    return load_image(manifest.resolve(record)).resize(config.target_size, Image.BILINEAR)


__all__ = [
    "EvalReport",
    "RunAggregate",
    "CamMap",
    "confusion_counts",
    "normalize_confusion",
    "aggregate_runs",
    "evaluate",
    "cam_from_maps",
    "upsample_and_normalize",
    "feature_gradients",
    "grad_cam",
    "overlay",
    "cam_panel",
    "cam_filename",
    "render_confusion",
    "STD_NOTE",
]
