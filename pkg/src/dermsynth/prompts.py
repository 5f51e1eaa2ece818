"""Structured prompt templates for condition-specific image generation.

A prompt has four slots rendered in a fixed order::

    <visual cues>, <sensation>, <physical location>, <skin tone>

Condition spec files (YAML) provide a keyword pool for each slot; ``enumerate_instantiations``
picks one entry per slot for every generated item, balancing the Fitzpatrick skin tones.

Seeded choices do not depend on any library PRNG. Every draw is the first 8 bytes
(little endian) of ``blake2b("|".join(parts), digest_size=8)`` where ``parts`` are
the decimal seed followed by string keys, reduced modulo the pool size. The result
is identical across Python, numpy and OS versions.
"""

from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from .errors import DuplicateLabel, EmptyPool, MalformedFile, MissingField

SEPARATOR = ", "
LABEL_RE = re.compile(r"^[a-z0-9_]+$")


class FitzpatrickGrade(str, enum.Enum):
    I = "I"
    II = "II"
    III = "III"
    IV = "IV"
    V = "V"
    VI = "VI"

    @property
    def index(self) -> int:
        return list(FitzpatrickGrade).index(self)


DEFAULT_TONE_DESCRIPTORS = {
    FitzpatrickGrade.I: "pale white skin",
    FitzpatrickGrade.II: "fair skin",
    FitzpatrickGrade.III: "light brown skin",
    FitzpatrickGrade.IV: "olive brown skin",
    FitzpatrickGrade.V: "dark brown skin",
    FitzpatrickGrade.VI: "deeply pigmented black skin",
}


@dataclass(frozen=True)
class SkinTone:
    grade: FitzpatrickGrade
    descriptor: str

    def __post_init__(self):
        object.__setattr__(self, "grade", FitzpatrickGrade(self.grade))
        if not self.descriptor.strip():
            raise ValueError(f"empty descriptor for Fitzpatrick grade {self.grade.value}")

    @classmethod
    def default(cls, grade: str | FitzpatrickGrade) -> "SkinTone":
        g = FitzpatrickGrade(grade)
        return cls(g, DEFAULT_TONE_DESCRIPTORS[g])


def default_tones() -> tuple[SkinTone, ...]:
    return tuple(SkinTone.default(g) for g in FitzpatrickGrade)


@dataclass(frozen=True)
class PromptSlots:
    visual_cues: str
    sensation: str
    physical_location: str
    skin_tone: SkinTone

    def __post_init__(self):
        if not self.visual_cues.strip():
            raise ValueError("visual_cues must be non-empty")
        if not self.physical_location.strip():
            raise ValueError("physical_location must be non-empty")


def render_prompt(slots: PromptSlots) -> str:
    """Join the non-empty slots in fixed order with ``", "``."""
    parts = (slots.visual_cues, slots.sensation, slots.physical_location, slots.skin_tone.descriptor)
    return SEPARATOR.join(p.strip() for p in parts if p.strip())


def _check_pool(name: str, pool: Sequence[str]) -> tuple[str, ...]:
    out = []
    for entry in pool:
        if not isinstance(entry, str):
            raise ValueError(f"{name}: entries must be strings, got {entry!r}")
        if "\n" in entry or "\r" in entry:
            raise ValueError(f"{name}: entry {entry!r} contains a newline")
        if not entry.strip() or entry != entry.strip():
            raise ValueError(f"{name}: entry {entry!r} must be non-empty and trimmed")
        out.append(entry)
    return tuple(out)


@dataclass(frozen=True)
class ConditionSpec:
    label: str
    display_name: str
    visual_cues_pool: tuple[str, ...]
    sensation_pool: tuple[str, ...]
    location_pool: tuple[str, ...]
    tones: tuple[SkinTone, ...] = field(default_factory=default_tones)

    def __post_init__(self):
        if not LABEL_RE.match(self.label):
            raise ValueError(f"label {self.label!r} must match [a-z0-9_]+")
        if not self.visual_cues_pool:
            raise EmptyPool("visual_cues", self.label)
        if not self.location_pool:
            raise EmptyPool("locations", self.label)
        for name in ("visual_cues_pool", "sensation_pool", "location_pool"):
            object.__setattr__(self, name, _check_pool(name, getattr(self, name)))
        tones = tuple(sorted(self.tones, key=lambda t: t.grade.index))
        if not tones:
            raise ValueError(f"condition {self.label!r} has no skin tones")
        if len({t.grade for t in tones}) != len(tones):
            raise ValueError(f"condition {self.label!r} lists a Fitzpatrick grade twice")
        object.__setattr__(self, "tones", tones)


@dataclass(frozen=True)
class PromptInstantiation:
    condition_label: str
    slots: PromptSlots
    rendered: str
    # indices into (visual_cues_pool, sensation_pool, location_pool); sensation is None when the pool is empty
    slot_indices: tuple[int, int | None, int]

    def to_dict(self) -> dict:
        return {
            "condition_label": self.condition_label,
            "visual_cues": self.slots.visual_cues,
            "sensation": self.slots.sensation,
            "physical_location": self.slots.physical_location,
            "skin_tone": self.slots.skin_tone.grade.value,
            "skin_tone_descriptor": self.slots.skin_tone.descriptor,
            "rendered": self.rendered,
            "slot_indices": list(self.slot_indices),
        }


def stable_hash64(seed: int, *keys) -> int:
    """Deterministic 64-bit hash of a seed and string-able keys."""
    payload = "|".join([str(int(seed))] + [str(k) for k in keys]).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def enumerate_instantiations(spec: ConditionSpec, per_condition: int, seed: int) -> list[PromptInstantiation]:
    """Draw ``per_condition`` prompt instantiations with tone counts balanced to within one.

    Tones are visited round-robin in a seed-dependent order, so the first
    ``per_condition % len(tones)`` tones of that order get one extra item.
    """
    if per_condition < 1:
        raise ValueError(f"per_condition must be >= 1, got {per_condition}")
    order = sorted(spec.tones, key=lambda t: (stable_hash64(seed, spec.label, "tone-order", t.grade.value), t.grade.index))
    out = []
    for i in range(per_condition):
        tone = order[i % len(order)]
        vi = stable_hash64(seed, spec.label, i, "visual_cues") % len(spec.visual_cues_pool)
        li = stable_hash64(seed, spec.label, i, "location") % len(spec.location_pool)
        si = None
        sensation = ""
        if spec.sensation_pool:
            si = stable_hash64(seed, spec.label, i, "sensation") % len(spec.sensation_pool)
            sensation = spec.sensation_pool[si]
        slots = PromptSlots(spec.visual_cues_pool[vi], sensation, spec.location_pool[li], tone)
        out.append(PromptInstantiation(spec.label, slots, render_prompt(slots), (vi, si, li)))
    return out


# ---------------------------------------------------------------------------
# spec file parsing

def _as_pool(raw, field_name: str, label: str, line: int | None) -> list[str]:
    if raw is None:
        return []
    if isinstance(raw, str):
        raw = [raw]
    if not isinstance(raw, list):
        raise MalformedFile(f"{field_name!r} of condition {label!r} must be a list", line)
    out = []
    for entry in raw:
        if not isinstance(entry, str):
            raise MalformedFile(f"{field_name!r} of condition {label!r} holds a non-string {entry!r}", line)
        entry = entry.strip()
        if "\n" in entry or "\r" in entry:
            raise MalformedFile(f"{field_name!r} of condition {label!r} has a multi-line entry", line)
        if entry:
            out.append(entry)
    return out


class _LineLoader(yaml.SafeLoader):
    """SafeLoader that remembers the source line of every mapping."""

    def construct_mapping(self, node, deep=False):
        mapping = super().construct_mapping(node, deep=deep)
        mapping["__line__"] = node.start_mark.line + 1
        return mapping


def _parse_tone_descriptors(raw, line) -> dict[FitzpatrickGrade, str]:
    descriptors = dict(DEFAULT_TONE_DESCRIPTORS)
    if raw is None:
        return descriptors
    if not isinstance(raw, dict):
        raise MalformedFile("'tone_descriptors' must map grade names to descriptors", line)
    for key, value in raw.items():
        if key == "__line__":
            continue
        try:
            grade = FitzpatrickGrade(str(key))
        except ValueError:
            raise MalformedFile(f"unknown Fitzpatrick grade {key!r}", raw.get("__line__")) from None
        if not isinstance(value, str) or not value.strip() or "\n" in value.strip():
            raise MalformedFile(f"descriptor for grade {grade.value} must be a one-line non-empty string", raw.get("__line__"))
        descriptors[grade] = value.strip()
    return descriptors


def parse_spec_text(text: str, source: str = "<string>") -> list[ConditionSpec]:
    try:
        doc = yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        col = mark.column + 1 if mark is not None else None
        raise MalformedFile(f"{source}: {getattr(exc, 'problem', None) or exc}", line, col) from exc
    if not isinstance(doc, dict) or "conditions" not in doc:
        raise MalformedFile(f"{source}: top level must be a mapping with a 'conditions' list", 1)
    descriptors = _parse_tone_descriptors(doc.get("tone_descriptors"), doc.get("__line__"))
    conditions = doc["conditions"]
    if not isinstance(conditions, list):
        raise MalformedFile(f"{source}: 'conditions' must be a list", doc.get("__line__"))

    specs: list[ConditionSpec] = []
    seen: dict[str, int] = {}
    for i, entry in enumerate(conditions):
        if not isinstance(entry, dict):
            raise MalformedFile(f"{source}: condition #{i + 1} is not a mapping", doc.get("__line__"))
        line = entry.get("__line__")
        label = entry.get("label")
        if label is None:
            raise MissingField("label", f"#{i + 1}")
        label = str(label)
        if not LABEL_RE.match(label):
            raise MalformedFile(f"{source}: label {label!r} must match [a-z0-9_]+", line)
        if label in seen:
            raise DuplicateLabel(f"label {label!r} defined at lines {seen[label]} and {line}")
        seen[label] = line
        if "display_name" not in entry:
            raise MissingField("display_name", label)
        if "visual_cues" not in entry:
            raise MissingField("visual_cues", label)
        visual = _as_pool(entry.get("visual_cues"), "visual_cues", label, line)
        sensations = _as_pool(entry.get("sensations"), "sensations", label, line)
        locations = _as_pool(entry.get("locations"), "locations", label, line)
        if not visual:
            raise EmptyPool("visual_cues", label)
        if not locations:
            raise EmptyPool("locations", label)
        raw_tones = entry.get("tones")
        if raw_tones is None:
            grades = list(FitzpatrickGrade)
        else:
            if not isinstance(raw_tones, list) or not raw_tones:
                raise MalformedFile(f"{source}: 'tones' of {label!r} must be a non-empty list", line)
            try:
                grades = [FitzpatrickGrade(str(t)) for t in raw_tones]
            except ValueError as exc:
                raise MalformedFile(f"{source}: {exc} in condition {label!r}", line) from None
            if len(set(grades)) != len(grades):
                raise MalformedFile(f"{source}: duplicate tone in condition {label!r}", line)
        specs.append(
            ConditionSpec(
                label=label,
                display_name=str(entry["display_name"]).strip(),
                visual_cues_pool=tuple(visual),
                sensation_pool=tuple(sensations),
                location_pool=tuple(locations),
                tones=tuple(SkinTone(g, descriptors[g]) for g in grades),
            )
        )
    return specs


def parse_spec_file(path) -> list[ConditionSpec]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    except UnicodeDecodeError as exc:
        raise MalformedFile(f"{path}: not UTF-8 text ({exc.reason})", None, exc.start) from exc
    return parse_spec_text(text, str(path))


def compile_prompts(specs: Iterable[ConditionSpec], per_condition: int, seed: int) -> list[PromptInstantiation]:
    out = []
    for spec in specs:
        out.extend(enumerate_instantiations(spec, per_condition, seed))
    return out
