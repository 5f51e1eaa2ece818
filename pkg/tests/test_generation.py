import io
import json
import logging
from collections import Counter

import numpy as np
import pytest
from PIL import Image
from scipy import stats

from conftest import LABELS, make_specs, png_bytes
from dermsynth.errors import AuthError, BackendRejected, BackendUnavailable, ConfigError, DecodeError
from dermsynth.generation import (
    GenerationRequest,
    HttpBackend,
    IncompleteDataset,
    MockBackend,
    backend_generate,
    build_synthetic_dataset,
    derive_item_seed,
)
from dermsynth.manifest import DatasetManifest, sha256_file
from dermsynth.prompts import enumerate_instantiations

FITZ = ["I", "II", "III", "IV", "V", "VI"]


def _request(seed=1, label="warts", size=64, specs=None):
    spec = next(s for s in (specs or make_specs()) if s.label == label)
    inst = enumerate_instantiations(spec, 1, seed=0)[0]
    return GenerationRequest(inst, seed, size, size)


def test_mock_deterministic():
    b = MockBackend(0.7)
    assert backend_generate(b, _request(5)) == backend_generate(b, _request(5))


def test_mock_seed_changes_pixels():
    b = MockBackend(1.0)
    a = np.asarray(Image.open(io.BytesIO(backend_generate(b, _request(1)))))
    c = np.asarray(Image.open(io.BytesIO(backend_generate(b, _request(2)))))
    assert (a != c).any()


def test_mock_output_shape():
    data = backend_generate(MockBackend(0.5), GenerationRequest(_request().instantiation, 3, 48, 40))
    assert Image.open(io.BytesIO(data)).size == (48, 40)


def test_request_size_floor():
    with pytest.raises(ConfigError):
        GenerationRequest(_request().instantiation, 1, 16, 64)


def test_strength_zero_hides_class():
    b = MockBackend(0.0, LABELS)
    means = {}
    for k, label in enumerate(("urticaria_hives", "warts")):
        means[label] = [b.render(label, FITZ[i % 6], 10_000 * k + i, 48, 48).mean() for i in range(200)]
    assert stats.ks_2samp(means["urticaria_hives"], means["warts"]).pvalue > 0.01
    assert stats.ttest_ind(means["urticaria_hives"], means["warts"]).pvalue > 0.01


def _pixel_stats(img):
    img = img.astype(np.float64)
    return np.r_[img.mean(axis=(0, 1)), img.std(axis=(0, 1)), 1.0]


def test_strength_one_linear_probe():
    b = MockBackend(1.0, LABELS)
    X, y = [], []
    for k, label in enumerate(LABELS):
        for i in range(200):
            X.append(_pixel_stats(b.render(label, FITZ[i % 6], 7919 * k + i, 48, 48)))
            y.append(k)
    X, y = np.array(X), np.array(y)
    order = np.random.default_rng(0).permutation(len(y))
    train, hold = order[:560], order[560:]
    W = np.linalg.lstsq(X[train], np.eye(4)[y[train]], rcond=None)[0]
    assert (np.argmax(X[hold] @ W, axis=1) == y[hold]).mean() >= 0.9


def test_mock_rejects_bad_strength():
    with pytest.raises(ConfigError):
        MockBackend(1.5)


def test_derive_item_seed_stable():
    assert derive_item_seed(3, "warts", 7) == derive_item_seed(3, "warts", 7)
    assert derive_item_seed(3, "warts", 7) != derive_item_seed(3, "warts", 8)
    assert derive_item_seed(3, "warts", 7, 1) != derive_item_seed(3, "warts", 7, 0)


def test_build_dataset_balance(tmp_path, specs):
    m = build_synthetic_dataset(specs, 12, MockBackend(1.0, LABELS), tmp_path / "syn", seed=3, width=32, height=32)
    assert len(m) == 48
    assert set(m.class_counts().values()) == {12}
    assert Counter(m.tone_counts().values()) == Counter({2: 24})
    files = sorted(p for p in (tmp_path / "syn").rglob("*.png"))
    assert len(files) == 48
    on_disk = {str(p.relative_to(tmp_path / "syn")): sha256_file(p) for p in files}
    assert on_disk == {r.relative_path: r.checksum for r in m.records}
    reread = DatasetManifest.read(tmp_path / "syn" / "manifest.jsonl")
    assert reread.records == m.records and reread.complete


def test_build_dataset_reproducible(tmp_path, specs):
    args = (specs, 5, MockBackend(1.0, LABELS))
    a = build_synthetic_dataset(*args, tmp_path / "a", seed=11, width=32, height=32)
    b = build_synthetic_dataset(*args, tmp_path / "b", seed=11, width=32, height=32, max_workers=4)
    assert a.records == b.records
    lines_a = (tmp_path / "a" / "manifest.jsonl").read_text().splitlines()[1:]
    lines_b = (tmp_path / "b" / "manifest.jsonl").read_text().splitlines()[1:]
    assert lines_a == lines_b


def test_build_dataset_rejects_zero(tmp_path, specs):
    with pytest.raises(ConfigError):
        build_synthetic_dataset(specs, 0, MockBackend(), tmp_path, seed=1)


class Flaky:
    """Fails the first ``n`` calls for every distinct seed listed in ``bad``."""

    backend_id = "flaky"
    max_concurrency = 1

    def __init__(self, bad_seeds, exc=BackendUnavailable):
        self.inner = MockBackend(1.0)
        self.bad = set(bad_seeds)
        self.exc = exc
        self.calls = Counter()

    def generate(self, request):
        self.calls[request.seed] += 1
        if request.seed in self.bad:
            raise self.exc("scripted failure")
        return self.inner.generate(request)


def test_failed_item_regenerated_with_next_seed(tmp_path, specs):
    bad = derive_item_seed(9, "warts", 1)
    backend = Flaky({bad})
    m = build_synthetic_dataset(specs, 3, backend, tmp_path, seed=9, width=32, height=32, retries=2)
    assert backend.calls[bad] == 3
    rec = next(r for r in m.records if r.relative_path == "warts/warts_00001.png")
    assert rec.seed == derive_item_seed(9, "warts", 1, attempt=1)
    assert set(m.class_counts().values()) == {3}


def test_rejected_prompt_advances_seed_without_retry(tmp_path, specs):
    bad = derive_item_seed(9, "scabies", 0)
    backend = Flaky({bad}, exc=BackendRejected)
    build_synthetic_dataset(specs, 2, backend, tmp_path, seed=9, width=32, height=32, retries=3)
    assert backend.calls[bad] == 1


class Dead:
    backend_id = "dead"
    max_concurrency = 1

    def generate(self, request):
        raise BackendUnavailable("down")


def test_global_budget_saves_partial_manifest(tmp_path, specs):
    with pytest.raises(IncompleteDataset) as info:
        build_synthetic_dataset(specs, 2, Dead(), tmp_path, seed=1, width=32, height=32, retries=1, retry_budget=5)
    assert isinstance(info.value, BackendUnavailable)
    saved = DatasetManifest.read(tmp_path / "manifest.jsonl")
    assert not saved.complete
    assert len(saved) == 0


# --- HTTP backend -----------------------------------------------------------

def test_http_passthrough_checksum(stub_server, tmp_path, specs):
    png = png_bytes(32, 32)
    srv = stub_server([(200, "image/png", png)])
    backend = HttpBackend(srv.url, auth="s3cret", timeout=5, retries=0, backoff=0)
    m = build_synthetic_dataset(specs[:1], 1, backend, tmp_path, seed=4, width=32, height=32)
    import hashlib

    assert m.records[0].checksum == hashlib.sha256(png).hexdigest()
    body = srv.requests[0]["body"]
    assert set(body) == {"prompt", "seed", "width", "height"}
    assert body["prompt"] == m.records[0].prompt_rendered
    assert body["seed"] == m.records[0].seed
    assert srv.requests[0]["headers"]["Authorization"] == "Bearer s3cret"
    assert "s3cret" not in (tmp_path / "manifest.jsonl").read_text()


def test_http_retry_after_429(stub_server, caplog):
    srv = stub_server([(429, "application/json", b'{"error": "slow down"}'), (200, "image/png", png_bytes(64, 64))])
    backend = HttpBackend(srv.url, timeout=5, retries=2, backoff=0)
    with caplog.at_level(logging.WARNING, logger="dermsynth.generation"):
        backend_generate(backend, _request(size=64))
    assert len(srv.requests) == 2
    assert any("retry 1/2" in r.message for r in caplog.records)


def test_http_truncated_png(stub_server):
    srv = stub_server([(200, "image/png", png_bytes(64, 64)[:40])])
    with pytest.raises(DecodeError):
        backend_generate(HttpBackend(srv.url, timeout=5, retries=0, backoff=0), _request(size=64))


def test_http_rejection_and_auth(stub_server):
    srv = stub_server([(400, "application/json", json.dumps({"error": "unsafe prompt"}).encode())])
    with pytest.raises(BackendRejected, match="unsafe prompt"):
        HttpBackend(srv.url, timeout=5, retries=3, backoff=0).generate(_request())
    assert len(srv.requests) == 1
    srv = stub_server([(401, "application/json", b"{}")])
    with pytest.raises(AuthError):
        HttpBackend(srv.url, timeout=5, backoff=0).generate(_request())


def test_http_non_image_body(stub_server):
    srv = stub_server([(200, "application/json", b'{"error": "oops"}')])
    with pytest.raises(DecodeError):
        HttpBackend(srv.url, timeout=5, retries=0, backoff=0).generate(_request())


def test_http_unreachable_host():
    backend = HttpBackend("http://127.0.0.1:9/generate", timeout=0.5, retries=2, backoff=0)
    with pytest.raises(BackendUnavailable, match="after 2 retries"):
        backend.generate(_request())


def test_http_auth_from_env(monkeypatch):
    monkeypatch.setenv("MY_TTI_KEY", "abc")
    backend = HttpBackend("https://example.invalid/gen", auth_env="MY_TTI_KEY")
    assert "abc" not in repr(backend)
    assert backend._auth == "abc"


def test_http_bad_endpoint():
    with pytest.raises(ConfigError):
        HttpBackend("not a url")
