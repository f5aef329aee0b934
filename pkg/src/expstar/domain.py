"""Core data model: step records, the tagged-commentary codec, and dataset file I/O.

A commentary is rendered as tagged text, e.g.::

    <Procedure> Add the acid dropwise <Safety> Wear goggles when handling acids

Section order is always Procedure, Principle, Safety. All types here are
immutable values; every function is pure, so they are safe to share across
workers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CommentaryParseError, ValidationError
from .fileio import read_jsonl, write_jsonl

PROCEDURE_TAG = "<Procedure>"
PRINCIPLE_TAG = "<Principle>"
SAFETY_TAG = "<Safety>"

_SECTION_TAGS = (PROCEDURE_TAG, PRINCIPLE_TAG, SAFETY_TAG)
_TAG_RE = re.compile(r"<([A-Za-z][A-Za-z ]*)>")

DATASET_REQUIRED_KEYS = frozenset(
    {
        "video_id",
        "clip_id",
        "step_index",
        "title",
        "subject",
        "discipline",
        "start_time",
        "end_time",
        "procedure",
    }
)
DATASET_OPTIONAL_KEYS = frozenset({"principle", "safety"})
COMMENTARY_FILE_KEYS = frozenset({"clip_id", "procedure"})
COMMENTARY_FILE_OPTIONAL_KEYS = frozenset({"principle", "safety"})


class Discipline(Enum):
    SCIENCE = "science"
    HEALTHCARE = "healthcare"
    ENGINEERING = "engineering"


def _normalize_optional(text: str | None) -> str | None:
    # Absent and empty-string both mean "not present".
    if text is None:
        return None
    text = text.strip()
    return text or None


@dataclass(frozen=True)
class Commentary:
    """One step's narration: a procedure plus optional principle and safety sections."""

    procedure: str
    principle: str | None = None
    safety: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "procedure", self.procedure.strip())
        object.__setattr__(self, "principle", _normalize_optional(self.principle))
        object.__setattr__(self, "safety", _normalize_optional(self.safety))
        if not self.procedure:
            raise ValidationError("commentary procedure must be non-empty")

    @property
    def has_knowledge_sections(self) -> bool:
        return self.principle is not None or self.safety is not None


@dataclass(frozen=True)
class StepRecord:
    """One experiment step: clip timing plus its commentary fields."""

    video_id: str
    clip_id: str
    step_index: int
    title: str
    subject: str
    discipline: Discipline
    start_time: float
    end_time: float
    procedure: str
    principle: str | None = None
    safety: str | None = None

    def __post_init__(self) -> None:
        # Times carry millisecond precision.
        object.__setattr__(self, "start_time", round(float(self.start_time), 3))
        object.__setattr__(self, "end_time", round(float(self.end_time), 3))
        object.__setattr__(self, "principle", _normalize_optional(self.principle))
        object.__setattr__(self, "safety", _normalize_optional(self.safety))
        if self.step_index < 1:
            raise ValidationError(f"clip {self.clip_id}: step_index must be >= 1")
        if self.start_time < 0:
            raise ValidationError(f"clip {self.clip_id}: start_time must be non-negative")
        if self.end_time <= self.start_time:
            raise ValidationError(f"clip {self.clip_id}: end_time must exceed start_time")
        if not self.procedure.strip():
            raise ValidationError(f"clip {self.clip_id}: procedure must be non-empty")

    @property
    def duration(self) -> float:
        return round(self.end_time - self.start_time, 3)

    @property
    def commentary(self) -> Commentary:
        return Commentary(self.procedure, self.principle, self.safety)

    @property
    def has_knowledge_sections(self) -> bool:
        return self.principle is not None or self.safety is not None


@dataclass(frozen=True)
class ClipEmbeddingSet:
    """Precomputed embeddings for one clip: per-frame vectors plus text vectors."""

    clip_id: str
    frame_embeddings: tuple[tuple[float, ...], ...]
    title_embedding: tuple[float, ...]
    procedure_embedding: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "frame_embeddings", tuple(tuple(float(x) for x in v) for v in self.frame_embeddings)
        )
        object.__setattr__(self, "title_embedding", tuple(float(x) for x in self.title_embedding))
        if self.procedure_embedding is not None:
            object.__setattr__(
                self, "procedure_embedding", tuple(float(x) for x in self.procedure_embedding)
            )
        if not self.frame_embeddings:
            raise ValidationError(f"clip {self.clip_id}: frame_embeddings must be non-empty")
        dim = len(self.title_embedding)
        if dim < 1:
            raise ValidationError(f"clip {self.clip_id}: embedding dimension must be >= 1")
        vectors: list[tuple[float, ...]] = [*self.frame_embeddings]
        if self.procedure_embedding is not None:
            vectors.append(self.procedure_embedding)
        for vec in vectors:
            if len(vec) != dim:
                raise ValidationError(
                    f"clip {self.clip_id}: all embeddings must share dimension {dim}, got {len(vec)}"
                )

    @property
    def dimension(self) -> int:
        return len(self.title_embedding)


@dataclass(frozen=True)
class GenerationContext:
    """Everything the generator sees for one step."""

    clip_ref: str
    title: str
    preceding: tuple[Commentary, ...] = ()
    partial: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "preceding", tuple(self.preceding))
        object.__setattr__(self, "partial", tuple(self.partial))

    def with_partial(self, *segments: str) -> "GenerationContext":
        return replace(self, partial=self.partial + segments)


def render_commentary(commentary: Commentary) -> str:
    """Render a commentary to tagged text: Procedure, then Principle, then Safety."""
    parts = [f"{PROCEDURE_TAG} {commentary.procedure}"]
    if commentary.principle is not None:
        parts.append(f"{PRINCIPLE_TAG} {commentary.principle}")
    if commentary.safety is not None:
        parts.append(f"{SAFETY_TAG} {commentary.safety}")
    return " ".join(parts)


def render_sections(principle: str | None, safety: str | None) -> str:
    """Render only the knowledge sections, in canonical order."""
    parts = []
    if _normalize_optional(principle) is not None:
        parts.append(f"{PRINCIPLE_TAG} {principle.strip()}")
    if _normalize_optional(safety) is not None:
        parts.append(f"{SAFETY_TAG} {safety.strip()}")
    return " ".join(parts)


def parse_commentary(text: str) -> Commentary:
    """Parse tagged commentary text; inverse of render_commentary on its image.

    Raises CommentaryParseError on a missing Procedure tag, a duplicated tag,
    an unknown tag, or stray text before the first tag.
    """
    matches = list(_TAG_RE.finditer(text))
    known = []
    for match in matches:
        tag = f"<{match.group(1)}>"
        if tag not in _SECTION_TAGS:
            raise CommentaryParseError(f"unknown tag {tag!r} in commentary text")
        known.append((tag, match))
    if not known:
        raise CommentaryParseError(f"missing {PROCEDURE_TAG} tag in commentary text")
    prefix = text[: known[0][1].start()].strip()
    if prefix:
        raise CommentaryParseError(f"unexpected text before first tag: {prefix!r}")

    sections: dict[str, str] = {}
    for i, (tag, match) in enumerate(known):
        if tag in sections:
            raise CommentaryParseError(f"duplicate tag {tag!r} in commentary text")
        end = known[i + 1][1].start() if i + 1 < len(known) else len(text)
        sections[tag] = text[match.end() : end].strip()

    if PROCEDURE_TAG not in sections:
        raise CommentaryParseError(f"missing {PROCEDURE_TAG} tag in commentary text")
    if not sections[PROCEDURE_TAG]:
        raise CommentaryParseError("empty procedure section")
    return Commentary(
        procedure=sections[PROCEDURE_TAG],
        principle=sections.get(PRINCIPLE_TAG),
        safety=sections.get(SAFETY_TAG),
    )


def strip_tags(commentary: Commentary) -> str:
    """Plain evaluation text: sections concatenated in canonical order, tags dropped."""
    parts = [commentary.procedure]
    if commentary.principle is not None:
        parts.append(commentary.principle)
    if commentary.safety is not None:
        parts.append(commentary.safety)
    return " ".join(parts)


def _record_from_obj(obj: object, lineno: int, path: str | Path) -> StepRecord:
    if not isinstance(obj, dict):
        raise ValidationError(f"{path}: line {lineno}: expected an object")
    keys = set(obj)
    unknown = keys - DATASET_REQUIRED_KEYS - DATASET_OPTIONAL_KEYS
    if unknown:
        raise ValidationError(f"{path}: line {lineno}: unknown keys {sorted(unknown)}")
    missing = DATASET_REQUIRED_KEYS - keys
    if missing:
        raise ValidationError(f"{path}: line {lineno}: missing keys {sorted(missing)}")
    try:
        discipline = Discipline(obj["discipline"])
    except ValueError as exc:
        raise ValidationError(
            f"{path}: line {lineno}: clip {obj.get('clip_id')}: bad discipline {obj['discipline']!r}"
        ) from exc
    try:
        return StepRecord(
            video_id=str(obj["video_id"]),
            clip_id=str(obj["clip_id"]),
            step_index=int(obj["step_index"]),
            title=str(obj["title"]),
            subject=str(obj["subject"]),
            discipline=discipline,
            start_time=float(obj["start_time"]),
            end_time=float(obj["end_time"]),
            procedure=str(obj["procedure"]),
            principle=obj.get("principle"),
            safety=obj.get("safety"),
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
    except ValidationError as exc:
        raise ValidationError(f"{path}: line {lineno}: {exc}") from exc


def record_to_obj(record: StepRecord) -> dict:
    obj = {
        "video_id": record.video_id,
        "clip_id": record.clip_id,
        "step_index": record.step_index,
        "title": record.title,
        "subject": record.subject,
        "discipline": record.discipline.value,
        "start_time": record.start_time,
        "end_time": record.end_time,
        "procedure": record.procedure,
    }
    if record.principle is not None:
        obj["principle"] = record.principle
    if record.safety is not None:
        obj["safety"] = record.safety
    return obj


def load_dataset(path: str | Path) -> list[StepRecord]:
    """Load and validate a line-delimited dataset file, preserving order."""
    records = [_record_from_obj(obj, lineno, path) for lineno, obj in read_jsonl(path)]
    _check_step_contiguity(records, path)
    return records


def _check_step_contiguity(records: Sequence[StepRecord], path: str | Path) -> None:
    by_video: dict[str, list[int]] = {}
    for record in records:
        by_video.setdefault(record.video_id, []).append(record.step_index)
    for video_id, indices in by_video.items():
        expected = list(range(1, len(indices) + 1))
        if sorted(indices) != expected:
            raise ValidationError(
                f"{path}: video {video_id}: step_index values {sorted(indices)} "
                f"are not a contiguous 1..{len(indices)} sequence"
            )


def save_dataset(path: str | Path, records: Iterable[StepRecord]) -> None:
    write_jsonl(path, (record_to_obj(r) for r in records))


def load_commentary_file(path: str | Path) -> dict[str, Commentary]:
    """Load a prediction/reference file: {clip_id, procedure, principle?, safety?} per line."""
    out: dict[str, Commentary] = {}
    for lineno, obj in read_jsonl(path):
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: line {lineno}: expected an object")
        unknown = set(obj) - COMMENTARY_FILE_KEYS - COMMENTARY_FILE_OPTIONAL_KEYS
        if unknown:
            raise ValidationError(f"{path}: line {lineno}: unknown keys {sorted(unknown)}")
        missing = COMMENTARY_FILE_KEYS - set(obj)
        if missing:
            raise ValidationError(f"{path}: line {lineno}: missing keys {sorted(missing)}")
        clip_id = str(obj["clip_id"])
        if clip_id in out:
            raise ValidationError(f"{path}: line {lineno}: duplicate clip_id {clip_id!r}")
        try:
            out[clip_id] = Commentary(
                procedure=str(obj["procedure"]),
                principle=obj.get("principle"),
                safety=obj.get("safety"),
            )
        except ValidationError as exc:
            raise ValidationError(f"{path}: line {lineno}: clip {clip_id}: {exc}") from exc
    return out


def save_commentary_file(path: str | Path, rows: Iterable[tuple[str, Commentary]]) -> None:
    def to_obj(clip_id: str, c: Commentary) -> dict:
        obj: dict = {"clip_id": clip_id, "procedure": c.procedure}
        if c.principle is not None:
            obj["principle"] = c.principle
        if c.safety is not None:
            obj["safety"] = c.safety
        return obj

    write_jsonl(path, (to_obj(clip_id, c) for clip_id, c in rows))


@dataclass(frozen=True)
class VideoValidationReport:
    video_id: str
    missing_steps: tuple[int, ...] = ()
    overlaps: tuple[tuple[str, str], ...] = ()
    empty_procedures: tuple[str, ...] = ()

    @property
    def is_clean(self) -> bool:
        return not (self.missing_steps or self.overlaps or self.empty_procedures)


def validate_video(records: Sequence[StepRecord]) -> VideoValidationReport:
    """Check one video's records for step gaps, clip time overlap, and empty procedures."""
    if not records:
        raise ValidationError("validate_video requires at least one record")
    video_ids = {r.video_id for r in records}
    if len(video_ids) > 1:
        raise ValidationError(f"validate_video got mixed video_ids: {sorted(video_ids)}")

    ordered = sorted(records, key=lambda r: r.step_index)
    present = {r.step_index for r in ordered}
    missing = tuple(i for i in range(1, max(present) + 1) if i not in present)
    overlaps = tuple(
        (a.clip_id, b.clip_id)
        for a, b in zip(ordered, ordered[1:])
        if b.start_time < a.end_time
    )
    empty = tuple(r.clip_id for r in ordered if not r.procedure.strip())
    return VideoValidationReport(
        video_id=records[0].video_id,
        missing_steps=missing,
        overlaps=overlaps,
        empty_procedures=empty,
    )


def group_by_video(records: Sequence[StepRecord]) -> dict[str, list[StepRecord]]:
    """Group records by video, each group sorted by step_index, video order preserved."""
    groups: dict[str, list[StepRecord]] = {}
    for record in records:
        groups.setdefault(record.video_id, []).append(record)
    for video_records in groups.values():
        video_records.sort(key=lambda r: r.step_index)
    return groups
