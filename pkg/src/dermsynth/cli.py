"""Command-line entry point.

Exit status: 0 on success, 1 for invalid input (bad config or spec files, missing
paths), 2 for failures while running a stage.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .data import PreprocessConfig, SplitSpec, ingest_real, load_image, split_real
from .errors import ConfigError, DuplicateLabel, EmptyPool, MalformedFile, MissingField, PipelineError, StageError
from .evaluation import cam_filename, evaluate, grad_cam, overlay
from .experiment import ExperimentConfig, run_experiment, write_comparison
from .generation import IncompleteDataset, build_synthetic_dataset, make_backend
from .manifest import DatasetManifest
from .prompts import compile_prompts, parse_spec_file
from .training import FinetuneConfig, TrainConfig, finetune_logits, load_model, save_model, set_deterministic, train

log = logging.getLogger("dermsynth")

VALIDATION_ERRORS = (ConfigError, MalformedFile, MissingField, DuplicateLabel, EmptyPool, FileNotFoundError)


def _section(args, name: str) -> dict:
    """A mapping from the --config YAML (empty when no config was given)."""
    if not args.config:
        return {}
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    doc = yaml.safe_load(path.read_text()) or {}
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    return value


def _preprocess(args) -> PreprocessConfig:
    pre = PreprocessConfig.from_dict(_section(args, "preprocess"))
    if getattr(args, "size", None):
        pre = PreprocessConfig.from_dict({**pre.to_dict(), "target_size": [args.size, args.size]})
    return pre


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _read_manifest(path) -> DatasetManifest:
    if not Path(path).is_file():
        raise ConfigError(f"manifest {path} does not exist")
    return DatasetManifest.read(path)


def _load_model(path):
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    return load_model(path)


def cmd_compile_prompts(args) -> int:
    specs = parse_spec_file(args.spec)
    insts = compile_prompts(specs, args.per_condition, _seed(args))
    lines = "".join(json.dumps(i.to_dict(), sort_keys=True) + "\n" for i in insts)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(lines)
    else:
        sys.stdout.write(lines)
    return 0


def cmd_generate(args) -> int:
    specs = parse_spec_file(args.spec)
    params = dict(_section(args, "backend").get("params", {}))
    kind = args.backend or _section(args, "backend").get("kind", "mock")
    if kind == "mock":
        if args.strength is not None:
            params["class_signal_strength"] = args.strength
        params.setdefault("class_labels", [s.label for s in specs])
    elif args.endpoint:
        params["endpoint"] = args.endpoint
    backend = make_backend(kind, params)
    try:
        m = build_synthetic_dataset(
            specs, args.per_class, backend, _out(args, "synthetic"), _seed(args), width=args.size, height=args.size, max_workers=args.workers
        )
    except IncompleteDataset as exc:
        log.error("%s", exc)
        return 2
    print(f"wrote {len(m)} images; manifest checksum {m.checksum()}")
    return 0


def cmd_ingest(args) -> int:
    from .data import RealDatasetSource

    m = ingest_real(RealDatasetSource(args.root, args.skip_unreadable))
    path = m.write(_out(args, "real.jsonl"))
    print(f"{len(m)} images in {len(m.class_labels)} classes -> {path}")
    return 0


def cmd_split(args) -> int:
    m = _read_manifest(args.manifest)
    settings = {**_section(args, "split"), "seed": _seed(args)}
    if args.fraction is not None:
        settings["finetune_fraction"] = args.fraction
    spec = SplitSpec(**settings)
    pool, held = split_real(m, spec)
    out = _out(args, "split")
    pool.write(out / "finetune_pool.jsonl")
    held.write(out / "eval.jsonl")
    print(f"finetune pool {dict(pool.class_counts())}; eval {dict(held.class_counts())}")
    return 0


def cmd_train(args) -> int:
    m = _read_manifest(args.manifest)
    settings = {**_section(args, "train")}
    for key in ("architecture", "epochs", "learning_rate", "batch_size"):
        if getattr(args, key) is not None:
            settings[key] = getattr(args, key)
    if args.no_pretrained:
        settings["pretrained"] = False
    cfg = TrainConfig(num_classes=len(m.class_labels), seed=_seed(args), **settings)
    model = train(m, _preprocess(args), cfg)
    path = save_model(model, _out(args, "model.pt"))
    print(f"trained {cfg.architecture} for {cfg.epochs} epochs; final loss {model.history[-1]['loss']:.4f} -> {path}")
    return 0


def _model_preprocess(model, args) -> PreprocessConfig:
    if args.config or getattr(args, "size", None) or "preprocess" not in model.config:
        return _preprocess(args)
    return PreprocessConfig.from_dict(model.config["preprocess"])


def cmd_finetune(args) -> int:
    model = _load_model(args.model)
    subset = _read_manifest(args.subset)
    settings = {**_section(args, "finetune")}
    for key in ("epochs", "learning_rate", "per_class_count"):
        if getattr(args, key) is not None:
            settings[key] = getattr(args, key)
    cfg = FinetuneConfig(seed=_seed(args), **settings)
    from .training import select_finetune_subset

    subset = select_finetune_subset(subset, cfg.per_class_count, cfg.seed)
    tuned = finetune_logits(model, subset, _model_preprocess(model, args), cfg)
    path = save_model(tuned, _out(args, "finetuned.pt"))
    print(f"finetuned on {len(subset)} images -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    m = _read_manifest(args.manifest)
    report = evaluate(model, m, _model_preprocess(model, args))
    path = report.write(_out(args, "report.json"))
    print(report.render())
    print(f"-> {path}")
    return 0


def cmd_cam(args) -> int:
    model = _load_model(args.model)
    m = _read_manifest(args.manifest)
    pre = _model_preprocess(model, args)
    out = _out(args, "cams")
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for label, recs in m.by_class().items():
        for rec in recs[: args.per_class]:
            image = load_image(m.resolve(rec))
            target = label if label in model.label_order else None
            cam = grad_cam(model, image, pre, target_class=target, input_ref=rec)
            overlay(cam, image.resize(pre.target_size)).save(out / cam_filename(rec, cam.target_class))
            n += 1
    print(f"wrote {n} overlays to {out}")
    return 0


def cmd_run(args) -> int:
    if not args.config:
        raise ConfigError("run needs --config <experiment.yaml>")
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["base_seed"] = args.seed
    if args.deterministic:
        changes["deterministic"] = True
    if args.n_runs is not None:
        changes["n_runs"] = args.n_runs
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    result = run_experiment(cfg, Path(args.out) if args.out else None)
    print((result.out_dir / "comparison.md").read_text() if result.results else "no protocol completed")
    print(f"results in {result.out_dir}")
    if result.failures:
        for f in result.failures:
            log.error("%s run %s failed in %s: %s", f["protocol"], f["run_index"], f["stage"], f["error"])
        return 2
    return 0


def cmd_report(args) -> int:
    d = Path(args.experiment_dir)
    if not d.is_dir():
        raise ConfigError(f"experiment directory {d} does not exist")
    write_comparison(d)
    print((d / "comparison.md").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config (experiment config for `run`; sections reused by other commands)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--deterministic", action="store_true", help="force deterministic torch kernels")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dermsynth", description="Synthetic dermatology images for skin-condition classifiers.")
    p.add_argument("--version", action="version", version=f"dermsynth {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("compile-prompts", parents=[common], help="expand condition specs into prompts (JSONL)")
    s.add_argument("spec")
    s.add_argument("-n", "--per-condition", type=int, default=10)
    s.set_defaults(func=cmd_compile_prompts)

    s = sub.add_parser("generate", parents=[common], help="build a synthetic image set")
    s.add_argument("spec")
    s.add_argument("--per-class", type=int, default=1000)
    s.add_argument("--backend", choices=["mock", "http"])
    s.add_argument("--strength", type=float, help="mock class-signal strength")
    s.add_argument("--endpoint", help="http backend URL")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("ingest", parents=[common], help="scan a <root>/<label>/ image tree into a manifest")
    s.add_argument("root")
    s.add_argument("--skip-unreadable", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", parents=[common], help="stratified finetune/eval split of a real manifest")
    s.add_argument("manifest")
    s.add_argument("--fraction", type=float)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", parents=[common], help="train a classifier on a manifest")
    s.add_argument("manifest")
    s.add_argument("--architecture")
    s.add_argument("--epochs", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--no-pretrained", action="store_true")
    s.add_argument("--size", type=int, help="square input size")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune", parents=[common], help="logit-only finetune of a checkpoint")
    s.add_argument("model")
    s.add_argument("subset", help="manifest to draw the per-class subset from")
    s.add_argument("--per-class-count", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", parents=[common], help="accuracy and confusion matrix")
    s.add_argument("model")
    s.add_argument("manifest")
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("cam", parents=[common], help="Grad-CAM overlays")
    s.add_argument("model")
    s.add_argument("manifest")
    s.add_argument("--per-class", type=int, default=4)
    s.add_argument("--size", type=int)
    s.set_defaults(func=cmd_cam)

    s = sub.add_parser("run", parents=[common], help="run the full protocol comparison")
    s.add_argument("--n-runs", type=int)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("report", parents=[common], help="rebuild comparison tables from stored run reports")
    s.add_argument("experiment_dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.deterministic:
        set_deterministic(True)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        if isinstance(exc.cause, VALIDATION_ERRORS):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
