"""Image provenance records and the line-delimited manifest format.

File layout (UTF-8 JSON Lines)::

    {"class_labels": [...], "created_with": "dermsynth 0.1.0", "root_hint": "...", "complete": true}
    {"relative_path": "warts/warts_00000.png", "condition_label": "warts", "source": "synthetic", ...}
    ...

The first line is the header; every further line is one ``ImageRecord``, sorted
by ``(condition_label, relative_path)``.
"""

from __future__ import annotations

import enum
import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable

from . import __version__
from .errors import ConfigError, IoError

TOOL_VERSION = f"dermsynth {__version__}"


class Source(str, enum.Enum):
    SYNTHETIC = "synthetic"
    REAL = "real"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class ImageRecord:
    relative_path: str
    condition_label: str
    source: Source
    checksum: str
    prompt_rendered: str = ""
    seed: int | None = None
    skin_tone: str | None = None  # Fitzpatrick grade name; None when unknown
    location: str | None = None
    backend_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "source", Source(self.source))
        if self.source is Source.SYNTHETIC:
            if not self.prompt_rendered or self.seed is None or not self.backend_id:
                raise ValueError(f"synthetic record {self.relative_path} lacks prompt, seed or backend_id")
        elif self.prompt_rendered or self.seed is not None or self.backend_id:
            raise ValueError(f"real record {self.relative_path} carries generation provenance")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source"] = self.source.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        return cls(**{k: d.get(k) for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ImageRecord, ...]
    class_labels: tuple[str, ...]
    created_with: str = TOOL_VERSION
    root_hint: str = ""
    complete: bool = True

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_labels", tuple(self.class_labels))
        known = set(self.class_labels)
        if len(known) != len(self.class_labels):
            raise ValueError("duplicate class label in manifest header")
        paths = set()
        for r in self.records:
            if r.condition_label not in known:
                raise ValueError(f"record {r.relative_path} has label {r.condition_label!r} not in class_labels")
            if r.relative_path in paths:
                raise ValueError(f"duplicate relative_path {r.relative_path}")
            paths.add(r.relative_path)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def root(self) -> Path:
        return Path(self.root_hint)

    def resolve(self, record: ImageRecord) -> Path:
        return self.root / record.relative_path

    def sorted(self) -> "DatasetManifest":
        return replace(self, records=tuple(sorted(self.records, key=lambda r: (r.condition_label, r.relative_path))))

    def subset(self, records: Iterable[ImageRecord]) -> "DatasetManifest":
        return replace(self, records=tuple(records)).sorted()

    def class_counts(self) -> dict[str, int]:
        c = Counter(r.condition_label for r in self.records)
        return {label: c.get(label, 0) for label in self.class_labels}

    def tone_counts(self) -> dict[tuple[str, str | None], int]:
        return dict(sorted(Counter((r.condition_label, r.skin_tone) for r in self.records).items(), key=str))

    def by_class(self) -> dict[str, list[ImageRecord]]:
        out: dict[str, list[ImageRecord]] = {label: [] for label in self.class_labels}
        for r in self.records:
            out[r.condition_label].append(r)
        return out

    def checksum(self) -> str:
        """Content hash over header labels and records; independent of root_hint."""
        h = hashlib.sha256()
        h.update(json.dumps(list(self.class_labels)).encode())
        for r in self.sorted().records:
            h.update(json.dumps(r.to_dict(), sort_keys=True).encode())
        return h.hexdigest()

    def header(self) -> dict:
        return {
            "class_labels": list(self.class_labels),
            "created_with": self.created_with,
            "root_hint": self.root_hint,
            "complete": self.complete,
        }

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True, ensure_ascii=False) for r in self.sorted().records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        except OSError as exc:
            raise IoError(f"cannot read manifest {path}: {exc}") from exc
        if not lines:
            raise ConfigError(f"manifest {path} is empty")
        try:
            header = json.loads(lines[0])
            records = [ImageRecord.from_dict(json.loads(ln)) for ln in lines[1:]]
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ConfigError(f"manifest {path} is malformed: {exc}") from exc
        if "class_labels" not in header:
            raise ConfigError(f"manifest {path} lacks a header line")
        root = header.get("root_hint") or ""
        if not root or not Path(root).is_dir():
            root = str(path.parent.resolve())
        return cls(
            records=tuple(records),
            class_labels=tuple(header["class_labels"]),
            created_with=header.get("created_with", ""),
            root_hint=root,
            complete=bool(header.get("complete", True)),
        )


def union(*manifests: DatasetManifest) -> DatasetManifest:
    """Merge manifests sharing one root; labels keep first-seen order."""
    labels: list[str] = []
    for m in manifests:
        labels += [lbl for lbl in m.class_labels if lbl not in labels]
    records = [r for m in manifests for r in m.records]
    return DatasetManifest(tuple(records), tuple(labels), manifests[0].created_with, manifests[0].root_hint).sorted()


__all__ = ["ImageRecord", "DatasetManifest", "Source", "sha256_bytes", "sha256_file", "union", "TOOL_VERSION"]
