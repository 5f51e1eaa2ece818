"""Text-to-image backends and the synthetic dataset builder.

Backends turn a ``GenerationRequest`` into encoded image bytes. Two ship here:

* ``MockBackend``: offline procedural images with a tunable class signal, used by tests
  and the desk-scale experiment.
* ``HttpBackend``: a client for any service that implements the JSON wire contract
  below.

HTTP wire contract::

    POST <endpoint>
    Content-Type: application/json
    Authorization: Bearer <secret>          (only when a secret is configured)
    {"prompt": str, "seed": int, "width": int, "height": int, ...backend_params}

    200 with Content-Type image/*           -> the image bytes
    401 / 403                               -> AuthError
    408 / 429 / 5xx, connection errors      -> retried, then BackendUnavailable
    other 4xx                               -> BackendRejected
    error bodies may be JSON: {"error": "<message>"}
"""

from __future__ import annotations

import io
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol, Sequence

import numpy as np
import requests
from PIL import Image

from .errors import AuthError, BackendRejected, BackendUnavailable, ConfigError, DecodeError, PipelineError
from .manifest import DatasetManifest, ImageRecord, Source, sha256_bytes
from .prompts import ConditionSpec, FitzpatrickGrade, PromptInstantiation, enumerate_instantiations, stable_hash64

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class GenerationRequest:
    instantiation: PromptInstantiation
    seed: int
    width: int = 256
    height: int = 256
    backend_params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ConfigError(f"image size must be at least 32x32, got {self.width}x{self.height}")

    @property
    def prompt(self) -> str:
        return self.instantiation.rendered


class GenerationBackend(Protocol):
    backend_id: str
    max_concurrency: int

    def generate(self, request: GenerationRequest) -> bytes: ...


def decode_image(data: bytes) -> Image.Image:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:  # PIL raises a zoo of types for bad payloads
        raise DecodeError(f"backend returned undecodable image data ({len(data)} bytes): {exc}") from exc
    return img


def backend_generate(backend: GenerationBackend, request: GenerationRequest) -> bytes:
    """Run one request and check that the payload decodes at the requested size."""
    data = backend.generate(request)
    img = decode_image(data)
    if img.size != (request.width, request.height):
        raise DecodeError(f"expected {request.width}x{request.height} image, got {img.size[0]}x{img.size[1]}")
    return data


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# mock backend

# chroma plane orthogonal to the grey axis
_CHROMA_U = np.array([1.0, -1.0, 0.0]) / math.sqrt(2)
_CHROMA_V = np.array([1.0, 1.0, -2.0]) / math.sqrt(6)
_SKIN_RGB = np.array([1.0, 0.82, 0.68])
_LESION_RGB = np.array([14.0, -10.0, -8.0])


def tone_brightness(grade: FitzpatrickGrade | str | None) -> float:
    if grade is None:
        return 165.0
    return 225.0 - 30.0 * FitzpatrickGrade(grade).index


@dataclass(frozen=True)
class ClassSignature:
    tint: np.ndarray  # unit chroma direction
    frequency: float  # grating cycles across the image width
    angle: float

    @classmethod
    def for_label(cls, label: str, class_labels: Sequence[str] | None = None) -> "ClassSignature":
        """Signature for ``label``.

        With ``class_labels`` the K known classes get evenly spaced tints and orientations,
        which guarantees separability. Otherwise everything is keyed by a hash of the label
        and two labels can land close together.
        """
        if class_labels and label in class_labels:
            k, n = list(class_labels).index(label), len(class_labels)
            theta = 2 * math.pi * k / n
            freq = 3.0 + 4.0 * k / max(n - 1, 1)
            angle = math.pi * k / n
        else:
            h = stable_hash64(0, "mock-class-signature", label)
            theta = 2 * math.pi * ((h & 0xFFFF) / 65536.0)
            freq = 3.0 + 5.0 * (((h >> 16) & 0xFFFF) / 65536.0)
            angle = math.pi * (((h >> 32) & 0xFFFF) / 65536.0)
        return cls(math.cos(theta) * _CHROMA_U + math.sin(theta) * _CHROMA_V, freq, angle)


class MockBackend:
    """Procedural stand-in for a text-to-image model.

    Every image is a skin-coloured base whose brightness follows the Fitzpatrick grade,
    low- and high-frequency noise, and one soft circular lesion at a seed-dependent spot.
    Inside the lesion the class signature (a chroma tint plus an oriented grating, both
    keyed by the condition label) is added with amplitude ``class_signal_strength``.
    At strength 0 the label never touches the pixels. Pass ``class_labels`` to space the
    class signatures evenly instead of hashing each label.
    """

    max_concurrency = 8

    def __init__(
        self,
        class_signal_strength: float = 1.0,
        class_labels: Sequence[str] | None = None,
        tint_amplitude: float = 45.0,
        grating_amplitude: float = 30.0,
    ):
        if not 0.0 <= class_signal_strength <= 1.0:
            raise ConfigError(f"class_signal_strength must lie in [0, 1], got {class_signal_strength}")
        self.strength = float(class_signal_strength)
        self.tint_amplitude = tint_amplitude
        self.grating_amplitude = grating_amplitude
        self.class_labels = tuple(class_labels) if class_labels else None
        palette = f",classes={stable_hash64(0, *self.class_labels):016x}" if self.class_labels else ""
        self.backend_id = f"mock-v1(strength={self.strength:g}{palette})"

    def render(self, label: str, grade, seed: int, width: int, height: int) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(seed & MASK64))
        coarse = rng.normal(size=(height // 8 + 2, width // 8 + 2)).astype(np.float32)
        coarse = np.asarray(Image.fromarray(coarse, mode="F").resize((width, height), Image.BILINEAR), dtype=np.float64)
        fine = rng.normal(size=(height, width))
        cx, cy = rng.uniform(0.3, 0.7) * width, rng.uniform(0.3, 0.7) * height
        radius = rng.uniform(0.18, 0.28) * min(width, height)

        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        dist = np.hypot(xx - cx, yy - cy)
        lesion = 1.0 / (1.0 + np.exp((dist - radius) / (0.08 * radius)))

        img = tone_brightness(grade) * _SKIN_RGB + (12.0 * coarse + 5.0 * fine)[..., None]
        img = img + lesion[..., None] * _LESION_RGB
        if self.strength > 0:
            sig = ClassSignature.for_label(label, self.class_labels)
            phase = 2 * math.pi * sig.frequency * (xx * math.cos(sig.angle) + yy * math.sin(sig.angle)) / width
            grating = np.sin(phase)
            signal = self.tint_amplitude * sig.tint + (self.grating_amplitude * grating)[..., None]
            img = img + self.strength * lesion[..., None] * signal
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)

    def generate(self, request: GenerationRequest) -> bytes:
        inst = request.instantiation
        pixels = self.render(inst.condition_label, inst.slots.skin_tone.grade, request.seed, request.width, request.height)
        return encode_png(pixels)


def mock_backend(class_signal_strength: float = 1.0, class_labels: Sequence[str] | None = None) -> MockBackend:
    return MockBackend(class_signal_strength, class_labels)


# ---------------------------------------------------------------------------
# HTTP backend

class HttpBackend:
    max_concurrency = 1

    def __init__(
        self,
        endpoint: str,
        auth: str | None = None,
        timeout: float = 60.0,
        retries: int = 3,
        *,
        auth_env: str | None = None,
        backoff: float = 1.0,
        session: requests.Session | None = None,
        backend_id: str | None = None,
    ):
        parsed = requests.utils.urlparse(endpoint)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ConfigError(f"invalid backend endpoint {endpoint!r}")
        if auth is None and auth_env:
            auth = os.environ.get(auth_env)
        self.endpoint = endpoint
        self._auth = auth
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = session or requests.Session()
        self.backend_id = backend_id or f"http:{parsed.netloc}{parsed.path}"

    def __repr__(self):
        return f"HttpBackend({self.endpoint!r}, auth={'***' if self._auth else None})"

    @staticmethod
    def _error_message(resp: requests.Response) -> str:
        try:
            body = resp.json()
            if isinstance(body, dict) and "error" in body:
                return str(body["error"])
        except ValueError:
            pass
        return resp.text[:200]

    def generate(self, request: GenerationRequest) -> bytes:
        payload = {"prompt": request.prompt, "seed": int(request.seed), "width": request.width, "height": request.height}
        payload.update(request.backend_params)
        headers = {"Authorization": f"Bearer {self._auth}"} if self._auth else {}
        last = "no attempt made"
        for attempt in range(self.retries + 1):
            if attempt:
                log.warning("retry %d/%d for seed %d: %s", attempt, self.retries, request.seed, last)
                if self.backoff:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last = f"{type(exc).__name__}: {exc}"
                continue
            status = resp.status_code
            if status == 200:
                ctype = resp.headers.get("Content-Type", "")
                if not ctype.startswith("image/"):
                    raise DecodeError(f"expected an image content type, got {ctype!r}: {self._error_message(resp)}")
                return resp.content
            if status in (401, 403):
                raise AuthError(f"backend refused credentials (HTTP {status})")
            if status in (408, 429) or status >= 500:
                last = f"HTTP {status}: {self._error_message(resp)}"
                continue
            msg = self._error_message(resp)
            log.error("backend rejected prompt %r (HTTP %d): %s", request.prompt, status, msg)
            raise BackendRejected(f"HTTP {status}: {msg}")
        raise BackendUnavailable(f"{self.endpoint} unavailable after {self.retries} retries ({last})")


def http_backend(endpoint: str, auth: str | None = None, timeout: float = 60.0, retries: int = 3, **kw) -> HttpBackend:
    return HttpBackend(endpoint, auth, timeout, retries, **kw)


def make_backend(kind: str, params: Mapping[str, Any] | None = None) -> GenerationBackend:
    params = dict(params or {})
    if kind == "mock":
        return MockBackend(**params)
    if kind == "http":
        return HttpBackend(**params)
    raise ConfigError(f"unknown backend {kind!r} (expected 'mock' or 'http')")


# ---------------------------------------------------------------------------
# dataset builder

def derive_item_seed(seed: int, label: str, index: int, attempt: int = 0) -> int:
    return stable_hash64(seed, "item", label, index, attempt)


class _FailureBudget:
    def __init__(self, limit: int):
        self.limit = limit
        self.used = 0
        self._lock = threading.Lock()
        self.exhausted = threading.Event()

    def spend(self) -> None:
        with self._lock:
            self.used += 1
            if self.used > self.limit:
                self.exhausted.set()
                raise BackendUnavailable(f"global retry budget of {self.limit} failures exhausted")


class IncompleteDataset(BackendUnavailable):
    def __init__(self, message: str, manifest: DatasetManifest, manifest_path: Path):
        super().__init__(message)
        self.manifest = manifest
        self.manifest_path = manifest_path


def _generate_item(backend, inst, label, index, seed, width, height, retries, budget, backend_params):
    attempt = 0
    while True:
        item_seed = derive_item_seed(seed, label, index, attempt)
        request = GenerationRequest(inst, item_seed, width, height, backend_params)
        for _ in range(retries + 1):
            if budget.exhausted.is_set():
                raise BackendUnavailable("global retry budget exhausted")
            try:
                return item_seed, backend_generate(backend, request)
            except BackendUnavailable as exc:
                log.warning("%s item %d seed %d: %s", label, index, item_seed, exc)
                budget.spend()
            except (BackendRejected, DecodeError) as exc:
                log.warning("%s item %d seed %d: %s; advancing seed", label, index, item_seed, exc)
                budget.spend()
                break
        attempt += 1


def build_synthetic_dataset(
    specs: Sequence[ConditionSpec],
    per_class: int,
    backend: GenerationBackend,
    out_dir,
    seed: int,
    *,
    width: int = 256,
    height: int = 256,
    retries: int = 3,
    retry_budget: int | None = None,
    max_workers: int = 1,
    backend_params: Mapping[str, Any] | None = None,
) -> DatasetManifest:
    """Generate ``per_class`` images for every condition and write ``out_dir/manifest.jsonl``.

    Item ``i`` of condition ``label`` is requested with seed
    ``derive_item_seed(seed, label, i, attempt)``; ``attempt`` only advances when an item
    keeps failing, so completed manifests always hold exactly ``per_class`` records per class.
    """
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    if not specs:
        raise ConfigError("at least one condition spec is required")
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate condition labels: {labels}")
    if width < 32 or height < 32:
        raise ConfigError(f"image size must be at least 32x32, got {width}x{height}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    budget = _FailureBudget(retry_budget if retry_budget is not None else max(100, per_class * len(specs)))
    params = dict(backend_params or {})

    jobs = []
    for spec in specs:
        (out_dir / spec.label).mkdir(exist_ok=True)
        for i, inst in enumerate(enumerate_instantiations(spec, per_class, seed)):
            jobs.append((spec.label, i, inst))

    def run(job):
        label, i, inst = job
        item_seed, data = _generate_item(backend, inst, label, i, seed, width, height, retries, budget, params)
        rel = f"{label}/{label}_{i:05d}.png"
        (out_dir / rel).write_bytes(data)
        return ImageRecord(
            relative_path=rel,
            condition_label=label,
            source=Source.SYNTHETIC,
            checksum=sha256_bytes(data),
            prompt_rendered=inst.rendered,
            seed=item_seed,
            skin_tone=inst.slots.skin_tone.grade.value,
            location=inst.slots.physical_location,
            backend_id=backend.backend_id,
        )

    workers = max(1, min(max_workers, getattr(backend, "max_concurrency", 1)))
    records: list[ImageRecord] = []
    failure: PipelineError | None = None
    if workers == 1:
        for job in jobs:
            try:
                records.append(run(job))
            except BackendUnavailable as exc:
                failure = exc
                break
    else:
        with ThreadPoolExecutor(workers) as pool:
            futures = [pool.submit(run, job) for job in jobs]
            for fut in futures:
                try:
                    records.append(fut.result())
                except BackendUnavailable as exc:
                    failure = failure or exc

    manifest = DatasetManifest(tuple(records), tuple(labels), root_hint=str(out_dir.resolve()), complete=failure is None).sorted()
    path = manifest.write(out_dir / "manifest.jsonl")
    if failure is not None:
        raise IncompleteDataset(f"{failure}; partial manifest with {len(records)} records saved to {path}", manifest, path)
    log.info("wrote %d synthetic images to %s", len(records), out_dir)
    return manifest
