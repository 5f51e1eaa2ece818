"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line with its runtime.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are printed in the
"acceptance criteria" section of the terminal summary.
"""

import math
import random
import time
from collections import Counter
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

from conftest import ACCEPTANCE_LINES, LABELS, make_specs
from dermsynth.data import PreprocessConfig, SplitSpec, finetune_count, load_arrays, split_real
from dermsynth.evaluation import (
    aggregate_runs,
    cam_from_maps,
    feature_gradients,
    grad_cam,
    normalize_confusion,
    upsample_and_normalize,
)
from dermsynth.experiment import (
    P1,
    P2,
    P3,
    ExperimentConfig,
    load_run_reports,
    make_mock_real_pool,
    run_experiment,
    verify_provenance,
)
from dermsynth.generation import MockBackend, build_synthetic_dataset
from dermsynth.manifest import DatasetManifest
from dermsynth.models import FINAL_LAYER
from dermsynth.prompts import (
    ConditionSpec,
    FitzpatrickGrade,
    SkinTone,
    enumerate_instantiations,
)
from dermsynth.training import FinetuneConfig, TrainConfig, finetune_logits, select_finetune_subset, train

REPO = Path(__file__).resolve().parents[1]


@contextmanager
def criterion(number: int, title: str, limit_s: float, already_s: float = 0.0):
    """``already_s`` counts work done in a fixture towards the runtime limit."""
    t0 = time.perf_counter() - already_s
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        within = elapsed <= limit_s
        status = "PASS" if ok and within else "FAIL"
        note = "" if within else f" (over the {limit_s:.0f} s limit)"
        line = f"criterion {number}: {status}  {title}  [{elapsed:.1f} s / {limit_s:.0f} s{note}]"
        ACCEPTANCE_LINES.append(line)
        print(line)
    assert within, f"criterion {number} took {elapsed:.1f} s, limit {limit_s} s"


# --- 1. prompt grammar ------------------------------------------------------

def _random_spec(rng: random.Random, i: int) -> ConditionSpec:
    words = ["red", "scaly", "raised", "round", "crusted", "itchy", "burning", "arm", "leg", "scalp", "dry", "moist"]

    def pool(k):
        return tuple(dict.fromkeys(" ".join(rng.sample(words, rng.randint(1, 3))) + f" {j}" for j in range(k)))

    grades = rng.sample(list(FitzpatrickGrade), rng.randint(1, 6))
    return ConditionSpec(
        label=f"cond_{i}",
        display_name=f"Condition {i}",
        visual_cues_pool=pool(rng.randint(1, 5)),
        sensation_pool=pool(rng.randint(0, 3)),
        location_pool=pool(rng.randint(1, 5)),
        tones=tuple(SkinTone(g, f"tone {g.value} skin") for g in grades),
    )


def test_criterion_1_prompt_grammar():
    with criterion(1, "prompt grammar over 1000 randomized cases", 10):
        rng = random.Random(20240101)
        for case in range(1000):
            spec = _random_spec(rng, case)
            n, seed = rng.randint(1, 40), rng.randint(0, 2**31)
            insts = enumerate_instantiations(spec, n, seed)
            assert len(insts) == n
            for inst in insts:
                s = inst.slots
                expected = [s.visual_cues] + ([s.sensation] if s.sensation else []) + [s.physical_location, s.skin_tone.descriptor]
                assert inst.rendered == ", ".join(expected)
                assert s.visual_cues in spec.visual_cues_pool and s.physical_location in spec.location_pool
                assert (s.sensation in spec.sensation_pool) if spec.sensation_pool else s.sensation == ""
                assert s.skin_tone in spec.tones
            counts = Counter(inst.slots.skin_tone.grade for inst in insts)
            per_tone = [counts.get(t.grade, 0) for t in spec.tones]
            assert max(per_tone) - min(per_tone) <= 1
            assert enumerate_instantiations(spec, n, seed) == insts


# --- 2. mock reproducibility ------------------------------------------------

def test_criterion_2_mock_reproducibility(tmp_path):
    with criterion(2, "mock backend reproducibility, 4 x 24 images twice", 30):
        runs = []
        for name in ("a", "b"):
            m = build_synthetic_dataset(make_specs(), 24, MockBackend(1.0, LABELS), tmp_path / name, seed=11)
            runs.append(m)
        a, b = runs
        assert len(a) == len(b) == 96
        assert a.class_counts() == {label: 24 for label in LABELS}
        assert a.checksum() == b.checksum()
        assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]
        for ra in a.records:
            assert (tmp_path / "a" / ra.relative_path).read_bytes() == (tmp_path / "b" / ra.relative_path).read_bytes()
        # manifest files differ only in their root hint
        la = (tmp_path / "a" / "manifest.jsonl").read_text().splitlines()
        lb = (tmp_path / "b" / "manifest.jsonl").read_text().splitlines()
        assert la[1:] == lb[1:]


# --- 3. split arithmetic ----------------------------------------------------

def _sized_manifest(sizes):
    from dermsynth.manifest import ImageRecord

    recs = [
        ImageRecord(f"{label}/{i:04d}.jpg", label, "real", checksum=f"{label}{i}")
        for label, n in sizes.items()
        for i in range(n)
    ]
    return DatasetManifest(tuple(recs), tuple(sizes)).sorted()


def test_criterion_3_split_arithmetic():
    with criterion(3, "split arithmetic (115, 55, 66, 131) -> (11, 5, 6, 13) over 100 seeds", 5):
        sizes = dict(zip(LABELS, (115, 55, 66, 131)))
        m = _sized_manifest(sizes)
        assert [finetune_count(n, SplitSpec(0.10)) for n in sizes.values()] == [11, 5, 6, 13]
        everything = {r.relative_path for r in m.records}
        seen = set()
        for seed in range(100):
            spec = SplitSpec(finetune_fraction=0.10, seed=seed)
            ft, ev = split_real(m, spec)
            assert [ft.class_counts()[label] for label in LABELS] == [11, 5, 6, 13]
            assert [ev.class_counts()[label] for label in LABELS] == [104, 50, 60, 118]
            a, b = {r.relative_path for r in ft.records}, {r.relative_path for r in ev.records}
            assert not a & b and a | b == everything
            again = split_real(m, spec)
            assert again[0] == ft and again[1] == ev
            seen.add(frozenset(a))
        assert len(seen) > 90


# --- 4. finetune scope ------------------------------------------------------

PRE32 = PreprocessConfig(target_size=(32, 32), channel_means=(0.5, 0.5, 0.5), channel_stds=(0.25, 0.25, 0.25))


def test_criterion_4_finetune_scope(tmp_path):
    with criterion(4, "finetune changes only the final layer; lr=0 is bit-identical", 120):
        m = build_synthetic_dataset(make_specs(), 12, MockBackend(1.0, LABELS), tmp_path, seed=5, width=32, height=32)
        arrays = load_arrays(m, PRE32, m.class_labels)
        cfg = TrainConfig(num_classes=4, architecture="small_cnn", pretrained=False, epochs=2, learning_rate=1e-3)
        model = train(m, PRE32, cfg, arrays=arrays)
        subset = select_finetune_subset(m, 3, seed=1)
        before = model.layer_checksums()
        tuned = finetune_logits(model, subset, PRE32, FinetuneConfig(epochs=5, learning_rate=1e-2))
        after = tuned.layer_checksums()
        changed = {k for k in before if before[k] != after[k]}
        assert changed == {f"{FINAL_LAYER}.weight", f"{FINAL_LAYER}.bias"}
        frozen = finetune_logits(model, subset, PRE32, FinetuneConfig(epochs=5, learning_rate=0.0))
        assert frozen.layer_checksums() == before
        for k, v in model.module.state_dict().items():
            assert torch.equal(v, frozen.module.state_dict()[k])


# --- 5. confusion / aggregate arithmetic ------------------------------------

def test_criterion_5_report_arithmetic():
    with criterion(5, "confusion normalisation and run aggregates", 5):
        assert normalize_confusion([[2, 0], [1, 1]]).tolist() == [[1.0, 0.0], [0.5, 0.5]]
        agg = aggregate_runs([63, 61, 65])
        assert (agg.mean, agg.std) == (63.0, 2.0) and agg.format() == "63.0 ± 2.0"
        rng = np.random.default_rng(5)
        for _ in range(1000):
            k = int(rng.integers(1, 12))
            counts = rng.integers(0, 50, size=(k, k)) * (rng.random((k, k)) < 0.7)
            counts[rng.random(k) < 0.15] = 0
            norm = normalize_confusion(counts)
            sums = norm.sum(axis=1)
            nz = counts.sum(axis=1) > 0
            assert np.all(np.abs(sums[nz] - 1.0) <= 1e-9)
            assert np.all(norm[~nz] == 0)


# --- 6. Grad-CAM ------------------------------------------------------------

def test_criterion_6_grad_cam():
    from test_evaluation import PRE, tiny_model

    from dermsynth.training import base_model

    with criterion(6, "Grad-CAM zero map, hand fixture, finite differences, invariants", 60):
        # zero gradient
        model = base_model("small_cnn", ("a", "b"), pretrained=False, seed=0)
        with torch.no_grad():
            model.module.fc.weight.zero_()
        img = np.random.default_rng(0).integers(0, 256, (20, 20, 3), dtype=np.uint8)
        assert (grad_cam(model, img, PRE, target_class="a").heatmap == 0).all()

        # hand-computed two-channel fixture
        acts = np.array([[[1.0, 2.0], [0.0, 1.0]], [[0.0, 1.0], [3.0, 0.0]]])
        grads = np.array([[[0.2, 0.2], [0.2, 0.2]], [[-0.1, -0.1], [-0.1, -0.1]]])
        weights, cam = cam_from_maps(acts, grads)
        np.testing.assert_allclose(weights, [0.2, -0.1], atol=1e-6)
        # 0.2*A0 - 0.1*A1 = [[0.2, 0.3], [-0.3, 0.2]] -> ReLU
        np.testing.assert_allclose(cam, [[0.2, 0.3], [0.0, 0.2]], atol=1e-6)
        np.testing.assert_allclose(upsample_and_normalize(cam, (2, 2)), [[2 / 3, 1.0], [0.0, 2 / 3]], atol=1e-6)

        # channel weights against finite differences
        tiny = tiny_model(seed=4)
        x = torch.randn(3, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(9))
        for cls in range(3):
            a, g = feature_gradients(tiny, x, cls)
            w, _ = cam_from_maps(a, g)
            c, h, wd = a.shape
            for k in range(c):
                bump = torch.zeros_like(a)
                bump[k] = 1e-6
                with torch.no_grad():
                    up = tiny.module.head((a + bump)[None])[0, cls].item()
                    down = tiny.module.head((a - bump)[None])[0, cls].item()
                fd = (up - down) / 2e-6 / (h * wd)
                assert abs(fd - w[k]) <= 1e-3 * max(abs(fd), 1e-8)

        # invariants over 100 random inputs
        rng = np.random.default_rng(6)
        model = base_model("small_cnn", ("a", "b", "c"), pretrained=False, seed=2)
        for _ in range(100):
            w_, h_ = (int(v) for v in rng.integers(8, 48, size=2))
            img = rng.integers(0, 256, (int(rng.integers(10, 60)), int(rng.integers(10, 60)), 3), dtype=np.uint8)
            heat = grad_cam(model, img, PreprocessConfig(target_size=(w_, h_)), target_class=str(rng.choice(["a", "b", "c"]))).heatmap
            assert heat.shape == (h_, w_)
            assert heat.min() >= 0.0 and heat.max() <= 1.0
            assert heat.max() == 0.0 or math.isclose(heat.max(), 1.0, abs_tol=1e-12)


# --- 7 and 8. end to end ----------------------------------------------------

def _acceptance_config(root: Path, out: str) -> ExperimentConfig:
    """The shipped mock experiment config, pointed at a temporary workspace."""
    cfg = ExperimentConfig.load(REPO / "configs" / "mock_experiment.yaml")
    return ExperimentConfig(**{**cfg.__dict__, "real_root": root / "real", "out_dir": root / out, "deterministic": True})


@pytest.fixture(scope="module")
def end_to_end(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cfg = _acceptance_config(root, "first")
    t0 = time.perf_counter()
    from dermsynth.prompts import parse_spec_file

    make_mock_real_pool(parse_spec_file(cfg.spec_file), 60, root / "real", seed=99)
    result = run_experiment(cfg)
    return root, cfg, result, time.perf_counter() - t0


def test_criterion_7_end_to_end(end_to_end):
    root, cfg, result, elapsed = end_to_end
    with criterion(7, "mock end-to-end: P1 >= 0.90 and mean(P3) >= mean(P2) over 5 runs", 20 * 60, elapsed):
        assert cfg.per_class == 200 and cfg.n_runs == 5
        assert cfg.train["epochs"] <= 10 and cfg.train["architecture"] == "small_cnn"
        assert cfg.backend == {"kind": "mock", "params": {"class_signal_strength": 1.0}}
        assert cfg.split["finetune_fraction"] == 0.10
        assert result.failures == []
        real = DatasetManifest.read(result.out_dir / "manifests" / "real.jsonl")
        assert real.class_counts() == {label: 60 for label in sorted(LABELS)}
        syn = DatasetManifest.read(result.out_dir / "synthetic" / "manifest.jsonl")
        assert not {r.checksum for r in real.records} & {r.checksum for r in syn.records}

        table = result.comparison["protocols"]
        for r in load_run_reports(result.out_dir):
            if r.meta["protocol"] == P1:
                assert r.accuracy >= 0.90, r.accuracy
        assert table[P3]["mean"] >= table[P2]["mean"], (table[P3]["mean"], table[P2]["mean"])
        print(
            "   P1 {} | P2 {} | P3 {}  (accuracy %, {} runs, setup + run {:.0f} s)".format(
                table[P1]["formatted"], table[P2]["formatted"], table[P3]["formatted"], cfg.n_runs, elapsed
            )
        )
        assert elapsed <= 20 * 60


def test_criterion_8_isolation_and_replay(end_to_end):
    root, cfg, result, _ = end_to_end
    with criterion(8, "protocol isolation and deterministic replay", 20 * 60):
        first = load_run_reports(result.out_dir)
        assert len(first) == 15
        assert verify_provenance(first) == []
        for r in first:
            inputs = r.meta["inputs"]
            if r.meta["protocol"] == P1:
                assert inputs["finetune_subset"] is None
            if r.meta["protocol"] == P2:
                assert inputs["synthetic_manifest"] is None
        snap = yaml.safe_load((result.out_dir / "config.yaml").read_text())
        assert snap["deterministic"] is True

        replay = run_experiment(_acceptance_config(root, "replay"))
        second = load_run_reports(replay.out_dir)

        def numbers(reports):
            return {
                (r.meta["protocol"], r.meta["run_index"]): (r.accuracy, r.confusion_counts.tolist(), r.meta["seeds"], r.meta["model_checksum"])
                for r in reports
            }

        assert numbers(first) == numbers(second)
        assert replay.comparison == result.comparison
