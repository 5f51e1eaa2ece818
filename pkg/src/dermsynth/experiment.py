"""End-to-end protocols: synthetic-only, real-finetune-only, and synthetic followed by real finetuning.

``P1_pretrained_lti``           backbone trained on synthetic images, evaluated on real eval split
``P2_pretrained_finetune``      untrained backbone + fresh logit layer, logit-only finetune on real subset
``P3_pretrained_lti_finetune``  the P1 model, logit-only finetune on the same real subset

One invocation trains the synthetic model once (cached by manifest checksum and train
config digest); every run then draws its own real split, finetune subset and head
initialisation from ``base_seed + run_index``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .data import PreprocessConfig, SplitSpec, ingest_real, load_arrays, load_image, split_real
from .errors import ConfigError, LabelMismatch, PipelineError, StageError
from .evaluation import (
    STD_NOTE,
    EvalReport,
    aggregate_runs,
    cam_filename,
    cam_panel,
    evaluate,
    grad_cam,
    overlay,
    render_confusion,
)
from .generation import build_synthetic_dataset, make_backend
from .manifest import DatasetManifest
from .prompts import parse_spec_file, stable_hash64
from .training import (
    FinetuneConfig,
    TrainConfig,
    TrainedModel,
    base_model,
    finetune_logits,
    save_model,
    select_finetune_subset,
    set_deterministic,
    train,
)

log = logging.getLogger(__name__)

P1 = "P1_pretrained_lti"
P2 = "P2_pretrained_finetune"
P3 = "P3_pretrained_lti_finetune"
PROTOCOLS = (P1, P2, P3)
PROTOCOL_TITLES = {P1: "ImageNet + LTI", P2: "ImageNet + Finetune", P3: "ImageNet + LTI + Finetune"}
# saliency panel column order, after the original image
PANEL_ORDER = (P2, P1, P3)


def derive_seed(seed: int, stage: str) -> int:
    return stable_hash64(seed, "stage", stage) & 0x7FFFFFFF


@dataclass
class ExperimentConfig:
    spec_file: Path
    real_root: Path
    out_dir: Path
    backend: dict = field(default_factory=lambda: {"kind": "mock", "params": {"class_signal_strength": 1.0}})
    per_class: int = 1000
    image_size: tuple[int, int] = (256, 256)
    generation_retries: int = 3
    synthetic_manifest: Path | None = None
    split: dict = field(default_factory=dict)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    protocols: tuple[str, ...] = PROTOCOLS
    n_runs: int = 5
    base_seed: int = 0
    deterministic: bool = False
    cam_per_class: int = 8
    cam_runs: tuple[int, ...] = (0,)
    skip_unreadable: bool = False

    def __post_init__(self):
        self.spec_file = Path(self.spec_file)
        self.real_root = Path(self.real_root)
        self.out_dir = Path(self.out_dir)
        if self.synthetic_manifest is not None:
            self.synthetic_manifest = Path(self.synthetic_manifest)
        if isinstance(self.preprocess, dict):
            self.preprocess = PreprocessConfig.from_dict(self.preprocess)
        self.protocols = tuple(self.protocols)
        self.image_size = tuple(self.image_size)
        self.cam_runs = tuple(self.cam_runs)
        unknown = set(self.protocols) - set(PROTOCOLS)
        if unknown or not self.protocols:
            raise ConfigError(f"protocols must be a non-empty subset of {PROTOCOLS}, got {self.protocols}")
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        if self.per_class < 1:
            raise ConfigError("per_class must be >= 1")
        SplitSpec(**self.split)  # validates
        FinetuneConfig(**self.finetune)
        bad = set(self.train) - {f for f in TrainConfig.__dataclass_fields__ if f not in ("num_classes", "seed")}
        if bad:
            raise ConfigError(f"unknown train settings {sorted(bad)}")

    def validate_paths(self) -> None:
        if not self.spec_file.is_file():
            raise ConfigError(f"spec file {self.spec_file} does not exist")
        if not self.real_root.is_dir():
            raise ConfigError(f"real dataset root {self.real_root} does not exist")
        if self.synthetic_manifest is not None and not self.synthetic_manifest.is_file():
            raise ConfigError(f"synthetic manifest {self.synthetic_manifest} does not exist")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown experiment config keys {sorted(extra)}")
        for key in ("spec_file", "real_root", "out_dir", "synthetic_manifest"):
            if d.get(key) is not None and base_dir is not None and not Path(d[key]).is_absolute():
                d[key] = base_dir / d[key]
        missing = {"spec_file", "real_root", "out_dir"} - set(d)
        if missing:
            raise ConfigError(f"experiment config lacks {sorted(missing)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        return cls.from_dict(doc, path.parent.resolve())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["preprocess"] = self.preprocess.to_dict()
        for k, v in d.items():
            if isinstance(v, Path):
                d[k] = str(v)
            elif isinstance(v, tuple):
                d[k] = list(v)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class ProtocolResult:
    protocol: str
    run_index: int
    report: EvalReport
    report_path: Path
    model: TrainedModel


class Experiment:
    """State shared by the runs of one invocation: data, caches and the output directory."""

    def __init__(self, config: ExperimentConfig, out_dir: Path | None = None):
        config.validate_paths()
        self.config = config
        self.out = Path(out_dir) if out_dir is not None else _fresh_dir(config)
        self.out.mkdir(parents=True, exist_ok=True)
        self.specs = parse_spec_file(config.spec_file)
        self.labels = tuple(s.label for s in self.specs)
        self._synthetic: DatasetManifest | None = None
        self._real: DatasetManifest | None = None
        self._model_cache: dict[tuple[str, str], tuple[TrainedModel, Path]] = {}
        self._arrays: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._splits: dict[int, dict[str, Any]] = {}

    # -- data -----------------------------------------------------------------

    @property
    def generation_seed(self) -> int:
        return derive_seed(self.config.base_seed, "generate")

    @property
    def train_seed(self) -> int:
        return derive_seed(self.config.base_seed, "train")

    def run_seeds(self, run_index: int) -> dict[str, int]:
        run_seed = self.config.base_seed + run_index
        return {
            "base_seed": self.config.base_seed,
            "run_seed": run_seed,
            "split": derive_seed(run_seed, "split"),
            "subset": derive_seed(run_seed, "subset"),
            "head": derive_seed(run_seed, "head"),
            "finetune": derive_seed(run_seed, "finetune"),
            "train": self.train_seed,
            "generate": self.generation_seed,
        }

    def synthetic_manifest(self) -> DatasetManifest:
        if self._synthetic is None:
            cfg = self.config
            with _stage("generate"):
                if cfg.synthetic_manifest is not None:
                    m = DatasetManifest.read(cfg.synthetic_manifest)
                else:
                    kind = cfg.backend.get("kind", "mock")
                    params = dict(cfg.backend.get("params", {}))
                    if kind == "mock":
                        params.setdefault("class_labels", list(self.labels))
                    backend = make_backend(kind, params)
                    m = build_synthetic_dataset(
                        self.specs,
                        cfg.per_class,
                        backend,
                        self.out / "synthetic",
                        self.generation_seed,
                        width=cfg.image_size[0],
                        height=cfg.image_size[1],
                        retries=cfg.generation_retries,
                    )
                if tuple(m.class_labels) != self.labels:
                    raise LabelMismatch(f"synthetic labels {m.class_labels} differ from spec labels {self.labels}")
            self._synthetic = m
        return self._synthetic

    def real_manifest(self) -> DatasetManifest:
        if self._real is None:
            with _stage("ingest"):
                from .data import RealDatasetSource

                m = ingest_real(RealDatasetSource(self.config.real_root, self.config.skip_unreadable))
                if set(m.class_labels) != set(self.labels):
                    raise LabelMismatch(f"real class folders {m.class_labels} differ from spec labels {self.labels}")
                m.write(self.out / "manifests" / "real.jsonl")
            self._real = m
        return self._real

    def split(self, run_index: int) -> dict[str, Any]:
        if run_index not in self._splits:
            seeds = self.run_seeds(run_index)
            with _stage("split"):
                spec = SplitSpec(**{**self.config.split, "seed": seeds["split"]})
                finetune_pool, eval_set = split_real(self.real_manifest(), spec)
                subset = select_finetune_subset(
                    finetune_pool, FinetuneConfig(**self.config.finetune).per_class_count, seeds["subset"]
                )
            run_dir = self._run_dir(run_index)
            finetune_pool.write(run_dir / "finetune_pool.jsonl")
            subset.write(run_dir / "finetune_subset.jsonl")
            eval_set.write(run_dir / "eval.jsonl")
            self._splits[run_index] = {"subset": subset, "eval": eval_set}
        return self._splits[run_index]

    def arrays(self, manifest: DatasetManifest, label_order) -> tuple[np.ndarray, np.ndarray]:
        key = manifest.checksum() + "|" + ",".join(label_order)
        if key not in self._arrays:
            self._arrays[key] = load_arrays(manifest, self.config.preprocess, label_order)
        return self._arrays[key]

    # -- models ---------------------------------------------------------------

    def train_config(self) -> TrainConfig:
        return TrainConfig(num_classes=len(self.labels), seed=self.train_seed, **self.config.train)

    def synthetic_model(self) -> tuple[TrainedModel, Path]:
        manifest = self.synthetic_manifest()
        tc = self.train_config()
        key = (manifest.checksum(), tc.digest())
        if key not in self._model_cache:
            with _stage("train"):
                model = train(manifest, self.config.preprocess, tc, arrays=self.arrays(manifest, self.labels))
                path = save_model(model, self.out / "synthetic_model.pt")
            log.info("synthetic model trained: final train accuracy %.3f", model.history[-1]["train_accuracy"])
            self._model_cache[key] = (model, path)
        return self._model_cache[key]

    def finetune_config(self, run_index: int) -> FinetuneConfig:
        return FinetuneConfig(**{**self.config.finetune, "seed": self.run_seeds(run_index)["finetune"]})

    # -- protocols ------------------------------------------------------------

    def run_protocol(self, protocol: str, run_index: int) -> ProtocolResult:
        if protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {protocol!r}")
        seeds = self.run_seeds(run_index)
        split = self.split(run_index)
        eval_set: DatasetManifest = split["eval"]
        inputs: dict[str, Any] = {"eval_manifest": eval_set.checksum(), "synthetic_manifest": None, "finetune_subset": None}
        synthetic_ckpt = None
        pre = self.config.preprocess

        if protocol in (P1, P3):
            model, path = self.synthetic_model()
            inputs["synthetic_manifest"] = self.synthetic_manifest().checksum()
            synthetic_ckpt = {"path": str(path.relative_to(self.out)), "checksum": model.checksum()}
        else:
            tc = self.train_config()
            model = base_model(tc.architecture, self.labels, tc.pretrained, tc.seed, head_seed=seeds["head"])
            model.config["preprocess"] = pre.to_dict()
        if protocol in (P2, P3):
            subset: DatasetManifest = split["subset"]
            inputs["finetune_subset"] = subset.checksum()
            with _stage("finetune"):
                model = finetune_logits(model, subset, pre, self.finetune_config(run_index), arrays=self.arrays(subset, self.labels))

        with _stage("evaluate"):
            report = evaluate(model, eval_set, pre, arrays=self.arrays(eval_set, self.labels))
        report.meta.update(
            {
                "protocol": protocol,
                "run_index": run_index,
                "seeds": seeds,
                "inputs": inputs,
                "synthetic_checkpoint": synthetic_ckpt,
                "model_checksum": model.checksum(),
                "lineage": model.lineage,
            }
        )
        pdir = self._run_dir(run_index) / protocol
        if protocol != P1:
            save_model(model, pdir / "model.pt")
        report_path = report.write(pdir / "report.json")
        if run_index in self.config.cam_runs and self.config.cam_per_class > 0:
            with _stage("cam"):
                self.write_cams(model, eval_set, pdir / "cams")
        return ProtocolResult(protocol, run_index, report, report_path, model)

    def cam_sample(self, eval_set: DatasetManifest):
        out = []
        for label, recs in eval_set.by_class().items():
            out += recs[: self.config.cam_per_class]
        return out

    def write_cams(self, model: TrainedModel, eval_set: DatasetManifest, out_dir: Path) -> list[Path]:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        pre = self.config.preprocess
        for rec in self.cam_sample(eval_set):
            image = load_image(eval_set.resolve(rec))
            cam = grad_cam(model, image, pre, target_class=rec.condition_label, input_ref=rec)
            shown = image.resize(pre.target_size)
            path = out_dir / cam_filename(rec, rec.condition_label)
            overlay(cam, shown).save(path)
            written.append(path)
        return written

    def write_panels(self, run_index: int) -> list[Path]:
        """original | P2 | P1 | P3 strips for every CAM sample of a run that has all protocols."""
        run_dir = self._run_dir(run_index)
        present = [p for p in PANEL_ORDER if (run_dir / p / "cams").is_dir()]
        if not present:
            return []
        eval_set = self.split(run_index)["eval"]
        out_dir = run_dir / "panels"
        out_dir.mkdir(exist_ok=True)
        written = []
        for rec in self.cam_sample(eval_set):
            name = cam_filename(rec, rec.condition_label)
            original = load_image(eval_set.resolve(rec)).resize(self.config.preprocess.target_size)
            from PIL import Image

            tiles = [Image.open(run_dir / p / "cams" / name) for p in present]
            path = out_dir / name.replace("__cam_", "__panel_")
            cam_panel(original, tiles).save(path)
            written.append(path)
        (out_dir / "columns.txt").write_text(" | ".join(["original"] + [PROTOCOL_TITLES[p] for p in present]) + "\n")
        return written

    def _run_dir(self, run_index: int) -> Path:
        d = self.out / "runs" / f"run_{run_index:02d}"
        d.mkdir(parents=True, exist_ok=True)
        return d


class _stage:
    """Context manager that re-raises pipeline errors tagged with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, PipelineError) and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _fresh_dir(config: ExperimentConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = config.out_dir / f"{stamp}-{config.digest()[:8]}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    return path


# ---------------------------------------------------------------------------
# comparison report

def comparison_from_reports(reports: list[EvalReport], protocols) -> dict:
    """Per-protocol accuracy aggregates (percent) and the synthetic-only confusion matrix from stored runs."""
    by_protocol: dict[str, list[EvalReport]] = {}
    for r in reports:
        by_protocol.setdefault(r.meta["protocol"], []).append(r)
    table = {}
    for p in protocols:
        runs = sorted(by_protocol.get(p, []), key=lambda r: r.meta["run_index"])
        if not runs:
            continue
        agg = aggregate_runs([100.0 * r.accuracy for r in runs])
        table[p] = {
            "title": PROTOCOL_TITLES[p],
            "run_indices": [r.meta["run_index"] for r in runs],
            **agg.to_dict(),
            "formatted": agg.format(),
        }
    confusion = None
    if by_protocol.get(P1):
        first = min(by_protocol[P1], key=lambda r: r.meta["run_index"])
        confusion = {
            "run_index": first.meta["run_index"],
            "label_order": first.label_order,
            "counts": first.confusion_counts.tolist(),
            "normalized": first.confusion_normalized.tolist(),
        }
    return {"protocols": table, "p1_confusion": confusion, "std_note": STD_NOTE}


def render_comparison(comparison: dict) -> str:
    cols = list(comparison["protocols"].values())
    lines = [
        "| | " + " | ".join(c["title"] for c in cols) + " |",
        "|---|" + "---|" * len(cols),
        "| Accuracy (%) | " + " | ".join(c["formatted"] for c in cols) + " |",
        "",
        f"n_runs per column: {', '.join(str(c['n_runs']) for c in cols)}. {comparison['std_note']}.",
    ]
    conf = comparison.get("p1_confusion")
    if conf:
        lines += ["", f"Normalized confusion matrix, synthetic-only model (run {conf['run_index']}):", ""]
        lines.append(render_confusion(np.asarray(conf["normalized"]), conf["label_order"]))
    return "\n".join(lines) + "\n"


def load_run_reports(experiment_dir) -> list[EvalReport]:
    paths = sorted(Path(experiment_dir).glob("runs/run_*/*/report.json"))
    return [EvalReport.read(p) for p in paths]


def write_comparison(experiment_dir, protocols=PROTOCOLS) -> dict:
    experiment_dir = Path(experiment_dir)
    reports = load_run_reports(experiment_dir)
    if not reports:
        raise ConfigError(f"no run reports under {experiment_dir}")
    comparison = comparison_from_reports(reports, protocols)
    (experiment_dir / "comparison.json").write_text(json.dumps(comparison, indent=1))
    (experiment_dir / "comparison.md").write_text(render_comparison(comparison))
    return comparison


def verify_provenance(reports: list[EvalReport]) -> list[str]:
    """Isolation and caching checks over recorded inputs; returns a list of violations."""
    problems = []
    for r in reports:
        p, inputs = r.meta["protocol"], r.meta["inputs"]
        tag = f"{p} run {r.meta['run_index']}"
        if p == P1 and inputs.get("finetune_subset") is not None:
            problems.append(f"{tag} read the real finetune subset")
        if p == P2 and inputs.get("synthetic_manifest") is not None:
            problems.append(f"{tag} read the synthetic manifest")
        if p in (P1, P3) and not r.meta.get("synthetic_checkpoint"):
            problems.append(f"{tag} has no synthetic checkpoint recorded")
        if not r.meta.get("seeds"):
            problems.append(f"{tag} lacks its seed chain")
    ckpts = {r.meta["synthetic_checkpoint"]["checksum"] for r in reports if r.meta.get("synthetic_checkpoint")}
    if len(ckpts) > 1:
        problems.append(f"P1/P3 used {len(ckpts)} different synthetic checkpoints")
    return problems


@dataclass
class ExperimentResult:
    out_dir: Path
    comparison: dict
    results: list[ProtocolResult]
    failures: list[dict]


def run_experiment(config: ExperimentConfig, out_dir: Path | None = None) -> ExperimentResult:
    """Run every selected protocol ``n_runs`` times and write comparison tables, reports and CAM panels."""
    config.validate_paths()
    if config.deterministic:
        set_deterministic(True)
    exp = Experiment(config, out_dir)
    (exp.out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    log.info("experiment output: %s", exp.out)
    results, failures = [], []
    for run_index in range(config.n_runs):
        for protocol in [p for p in PROTOCOLS if p in config.protocols]:
            try:
                results.append(exp.run_protocol(protocol, run_index))
                log.info("%s run %d: accuracy %.3f", protocol, run_index, results[-1].report.accuracy)
            except StageError as exc:
                log.error("%s run %d failed: %s", protocol, run_index, exc)
                failures.append({"protocol": protocol, "run_index": run_index, "stage": exc.stage, "error": str(exc)})
        if run_index in config.cam_runs and config.cam_per_class > 0:
            exp.write_panels(run_index)
    if failures:
        (exp.out / "failures.json").write_text(json.dumps(failures, indent=1))
    comparison = write_comparison(exp.out, config.protocols) if results else {"protocols": {}, "p1_confusion": None}
    return ExperimentResult(exp.out, comparison, results, failures)


def replace_config(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **changes)


def make_mock_real_pool(specs, per_class, out_root, seed: int, *, strength: float = 1.0, size: int = 64) -> DatasetManifest:
    """Write a ``<root>/<label>/*.png`` tree from the mock backend to stand in for a real dataset.

    The pool draws from its own seed stream, so no image coincides with mock synthetic
    data built from an experiment seed.
    """
    out_root = Path(out_root)
    labels = [s.label for s in specs]
    backend = make_backend("mock", {"class_signal_strength": strength, "class_labels": labels})
    build_synthetic_dataset(specs, per_class, backend, out_root, derive_seed(seed, "mock-real-pool"), width=size, height=size)
    (out_root / "manifest.jsonl").unlink()
    return ingest_real(out_root)
