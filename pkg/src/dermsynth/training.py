"""Synthetic-phase training, logit-layer finetuning and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import pickle
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import PreprocessConfig, load_arrays, seeded_order
from .errors import ConfigError, IncompatibleCheckpoint, IoError, LabelMismatch, ManifestMismatch
from .manifest import DatasetManifest
from .models import ARCHITECTURES, FINAL_LAYER, Classifier, build_model, fresh_linear

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dermsynth-checkpoint"
CHECKPOINT_VERSION = 1
OPTIMIZERS = {"adam": torch.optim.Adam, "sgd": torch.optim.SGD}
LOSSES = {"cross_entropy": nn.CrossEntropyLoss}


@dataclass(frozen=True)
class TrainConfig:
    num_classes: int
    architecture: str = "resnet50"
    pretrained: bool = True
    epochs: int = 50
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    loss: str = "cross_entropy"
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        _check_choices(self.architecture, self.optimizer, self.loss)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class FinetuneConfig:
    per_class_count: int = 10
    epochs: int = 50
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    loss: str = "cross_entropy"
    batch_size: int = 32
    seed: int = 0
    scope: str = "final_layer"

    def __post_init__(self):
        if self.per_class_count < 1:
            raise ConfigError("per_class_count must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        # zero is allowed: it is the no-op finetune
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.scope != "final_layer":
            raise ConfigError("only final_layer finetuning is supported")
        _check_choices(None, self.optimizer, self.loss)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_choices(architecture, optimizer, loss):
    if architecture is not None and architecture not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {architecture!r}")
    if optimizer not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    if loss not in LOSSES:
        raise ConfigError(f"unknown loss {loss!r}")


def set_deterministic(enabled: bool = True) -> None:
    """Bitwise-reproducible CPU kernels at the cost of throughput."""
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)


@dataclass
class TrainedModel:
    architecture: str
    label_order: tuple[str, ...]
    module: Classifier
    config: dict
    history: list[dict] = field(default_factory=list)
    lineage: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.label_order = tuple(self.label_order)
        self.module.eval()

    @property
    def num_classes(self) -> int:
        return len(self.label_order)

    @torch.no_grad()
    def logits(self, X, batch_size: int = 64) -> np.ndarray:
        self.module.eval()
        X = torch.as_tensor(X)
        out = [self.module(X[i : i + batch_size]) for i in range(0, len(X), batch_size)]
        return torch.cat(out).numpy() if out else np.zeros((0, self.num_classes), np.float32)

    def predict(self, X) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return np.argmax(self.logits(X), axis=1)

    def layer_checksums(self) -> dict[str, str]:
        """sha256 per parameter/buffer tensor, keyed by state-dict name."""
        return {
            name: hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()
            for name, t in self.module.state_dict().items()
        }

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, digest in sorted(self.layer_checksums().items()):
            h.update(f"{name}:{digest}".encode())
        return h.hexdigest()


def _optimizer(name, params, lr):
    return OPTIMIZERS[name](params, lr=lr)


def _check_manifest(manifest: DatasetManifest, num_classes: int):
    if len(manifest) == 0:
        raise ConfigError("training manifest is empty")
    if len(manifest.class_labels) != num_classes:
        raise ManifestMismatch(f"config expects {num_classes} classes, manifest has {len(manifest.class_labels)}")


def _run_epochs(forward, X, y, epochs, batch_size, optimizer, loss_fn, seed):
    g = torch.Generator().manual_seed(seed)
    history = []
    n = len(X)
    for epoch in range(epochs):
        order = torch.randperm(n, generator=g)
        total, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb, yb = X[idx], y[idx]
            optimizer.zero_grad(set_to_none=True)
            out = forward(xb)
            loss = loss_fn(out, yb)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            correct += (out.argmax(1) == yb).sum().item()
        history.append({"epoch": epoch + 1, "loss": total / n, "train_accuracy": correct / n})
        log.debug("epoch %d loss %.4f acc %.3f", epoch + 1, total / n, correct / n)
    return history


def train(manifest: DatasetManifest, preprocess: PreprocessConfig, config: TrainConfig, *, arrays=None) -> TrainedModel:
    """Minibatch training of every parameter for exactly ``config.epochs`` epochs.

    ``arrays`` may pass pre-loaded ``(X, y)`` to skip image decoding.
    """
    _check_manifest(manifest, config.num_classes)
    labels = manifest.class_labels
    X, y = arrays if arrays is not None else load_arrays(manifest, preprocess, labels)
    X, y = torch.as_tensor(X), torch.as_tensor(y)
    module = build_model(config.architecture, config.num_classes, config.pretrained, config.seed)
    module.train()
    opt = _optimizer(config.optimizer, module.parameters(), config.learning_rate)
    history = _run_epochs(module, X, y, config.epochs, config.batch_size, opt, LOSSES[config.loss](), config.seed)
    module.eval()
    lineage = [{"stage": "train", "manifest": manifest.checksum(), "seed": config.seed, "config": config.digest()}]
    return TrainedModel(config.architecture, labels, module, {"train": config.to_dict(), "preprocess": preprocess.to_dict()}, history, lineage)


def base_model(
    architecture: str, label_order: Sequence[str], pretrained: bool, seed: int, head_seed: int | None = None
) -> TrainedModel:
    """Untrained classifier: the backbone ``train`` would start from, plus a fresh K-class logit layer.

    ``seed`` initialises the backbone exactly as ``TrainConfig(seed=seed)`` does;
    ``head_seed`` (default ``seed + 1``) initialises the replacement logit layer.
    """
    head_seed = seed + 1 if head_seed is None else head_seed
    module = build_model(architecture, len(label_order), pretrained, seed)
    module.fc = fresh_linear(module.fc.in_features, len(label_order), head_seed)
    module.eval()
    cfg = {"base": {"architecture": architecture, "pretrained": pretrained, "seed": seed, "head_seed": head_seed}}
    return TrainedModel(architecture, tuple(label_order), module, cfg, [], [{"stage": "base", "seed": seed, "head_seed": head_seed}])


def select_finetune_subset(manifest: DatasetManifest, per_class_count: int, seed: int) -> DatasetManifest:
    """Seeded choice of ``min(per_class_count, class size)`` records per class."""
    if per_class_count < 1:
        raise ConfigError("per_class_count must be >= 1")
    chosen = []
    for label, recs in manifest.by_class().items():
        if not recs:
            raise ConfigError(f"class {label!r} has no records to select from")
        chosen += seeded_order(recs, seed, "finetune-subset")[:per_class_count]
    return manifest.subset(chosen)


def finetune_logits(
    model: TrainedModel, subset: DatasetManifest, preprocess: PreprocessConfig, config: FinetuneConfig, *, arrays=None
) -> TrainedModel:
    """Train only the final linear layer on ``subset``; the input model is left untouched.

    The trunk runs in eval mode, so batch-norm statistics stay frozen as well.
    """
    unknown = set(subset.class_labels) - set(model.label_order)
    present = {r.condition_label for r in subset.records}
    if unknown:
        raise LabelMismatch(f"subset labels {sorted(unknown)} are unknown to the model")
    missing = set(model.label_order) - present
    if missing:
        raise LabelMismatch(f"finetune subset has no samples for {sorted(missing)}")

    module = copy.deepcopy(model.module)
    module.eval()
    for p in module.features.parameters():
        p.requires_grad_(False)
    X, y = arrays if arrays is not None else load_arrays(subset, preprocess, model.label_order)
    with torch.no_grad():
        pooled = torch.cat([module.pool(module.features(torch.as_tensor(X[i : i + 64]))) for i in range(0, len(X), 64)])
    fc = module.fc
    opt = _optimizer(config.optimizer, fc.parameters(), config.learning_rate)
    fc.train()
    history = _run_epochs(fc, pooled, torch.as_tensor(y), config.epochs, config.batch_size, opt, LOSSES[config.loss](), config.seed)
    for p in module.features.parameters():
        p.requires_grad_(True)
    cfg = dict(model.config)
    cfg["finetune"] = config.to_dict()
    lineage = model.lineage + [{"stage": "finetune", "manifest": subset.checksum(), "seed": config.seed}]
    return TrainedModel(model.architecture, model.label_order, module, cfg, model.history + [dict(h, phase="finetune") for h in history], lineage)


# ---------------------------------------------------------------------------
# checkpoints

def save_model(model: TrainedModel, path) -> Path:
    """Write the checkpoint and a ``<name>.history.json`` next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "architecture": model.architecture,
        "label_order": list(model.label_order),
        "config": json.dumps(model.config, sort_keys=True),
        "history": json.dumps(model.history),
        "lineage": json.dumps(model.lineage),
        "state_dict": model.module.state_dict(),
    }
    try:
        torch.save(payload, path)
        path.with_suffix(".history.json").write_text(json.dumps(model.history, indent=1))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_model(path, architecture: str | None = None) -> TrainedModel:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile) as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise IncompatibleCheckpoint(f"{path} is not a dermsynth checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint version {payload.get('format_version')}")
    arch = payload["architecture"]
    if architecture is not None and arch != architecture:
        raise IncompatibleCheckpoint(f"checkpoint holds {arch!r}, expected {architecture!r}")
    if arch not in ARCHITECTURES:
        raise IncompatibleCheckpoint(f"unknown architecture {arch!r} in {path}")
    labels = tuple(payload["label_order"])
    module = build_model(arch, len(labels), pretrained=False, seed=0)
    try:
        module.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as exc:
        raise IncompatibleCheckpoint(f"parameters in {path} do not fit {arch!r}: {exc}") from exc
    return TrainedModel(
        arch,
        labels,
        module,
        json.loads(payload["config"]),
        json.loads(payload["history"]),
        json.loads(payload.get("lineage", "[]")),
    )
