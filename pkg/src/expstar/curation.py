"""Turn timestamp-aligned ASR transcripts into validated step-level records.

Stages run in order per video: transcript correction, step segmentation,
principle/safety annotation, then record assembly. Every judge reply is
validated against hard invariants (unchanged ids/timestamps, consecutive
fragment ids, no cross-step reuse) with one retry before rejection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

from . import prompts
from .domain import Discipline, StepRecord
from .errors import ProtocolError, TransportError, ValidationError
from .fileio import read_jsonl
from .judging import JudgeClient

NEAR_EMPTY_PROCEDURE_WORDS = 3
# A safety string repeated on more than this share of safety-bearing steps
# is flagged as boilerplate over-caution.
SAFETY_DUPLICATION_SHARE = 0.5


@dataclass(frozen=True)
class AsrSegment:
    id: int
    start_time: float
    end_time: float
    text: str

    def __post_init__(self) -> None:
        if self.id < 1:
            raise ValidationError(f"ASR segment id must be positive, got {self.id}")
        if self.end_time <= self.start_time:
            raise ValidationError(f"ASR segment {self.id}: end_time must exceed start_time")


@dataclass(frozen=True)
class StepPlan:
    step: int
    procedure: str
    asr_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "asr_ids", tuple(int(i) for i in self.asr_ids))
        if self.step < 1:
            raise ValidationError(f"step number must be positive, got {self.step}")
        if not self.procedure.strip():
            raise ValidationError(f"step {self.step}: procedure must be non-empty")
        if not self.asr_ids:
            raise ValidationError(f"step {self.step}: asr_ids must be non-empty")
        for a, b in zip(self.asr_ids, self.asr_ids[1:]):
            if b != a + 1:
                raise ValidationError(
                    f"step {self.step}: asr_ids {list(self.asr_ids)} are not "
                    f"strictly consecutive"
                )


@dataclass(frozen=True)
class AnnotatedStep:
    plan: StepPlan
    principle: str | None = None
    safety: str | None = None


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    title: str
    subject: str
    discipline: Discipline


def load_asr(path: str | Path) -> list[AsrSegment]:
    """Load a line-delimited {id, startTime, endTime, text} transcript."""
    segments: list[AsrSegment] = []
    seen: set[int] = set()
    for lineno, obj in read_jsonl(path):
        if not isinstance(obj, dict) or set(obj) != {"id", "startTime", "endTime", "text"}:
            raise ValidationError(
                f"{path}: line {lineno}: expected keys id, startTime, endTime, text"
            )
        try:
            segment = AsrSegment(
                id=int(obj["id"]),
                start_time=float(obj["startTime"]),
                end_time=float(obj["endTime"]),
                text=str(obj["text"]),
            )
        except (TypeError, ValueError, ValidationError) as exc:
            raise ValidationError(f"{path}: line {lineno}: {exc}") from exc
        if segment.id in seen:
            raise ValidationError(f"{path}: line {lineno}: duplicate segment id {segment.id}")
        seen.add(segment.id)
        segments.append(segment)
    return segments


def _segment_payload(segments: Sequence[AsrSegment]) -> str:
    return json.dumps(
        [
            {"id": s.id, "startTime": s.start_time, "endTime": s.end_time, "text": s.text}
            for s in segments
        ],
        sort_keys=True,
        ensure_ascii=False,
    )


def _judge_json(
    judge: JudgeClient, template_id: str, prompt: str, context: str
) -> tuple[object, str]:
    try:
        reply = judge.complete(template_id, prompt)
    except TransportError as exc:
        raise TransportError(f"{context}: {exc}") from exc
    try:
        return json.loads(reply), reply
    except json.JSONDecodeError:
        return None, reply


def correct_transcript(
    segments: Sequence[AsrSegment], judge: JudgeClient, subject: str
) -> list[AsrSegment]:
    """Send the batch through the correction prompt; only text may change.

    Translation of multilingual transcripts rides on this same call: the
    judge returns corrected English text in the text field.
    """
    if not segments:
        return []
    prompt = prompts.build_batch_prompt(
        prompts.ASR_CORRECTION, subject, _segment_payload(segments)
    )
    ids = [s.id for s in segments]
    context = f"correcting segments {ids}"

    last_reply = ""
    for _ in range(2):
        parsed, last_reply = _judge_json(judge, prompts.ASR_CORRECTION, prompt, context)
        corrected = _validate_correction(parsed, segments)
        if corrected is not None:
            return corrected
    raise ProtocolError(
        f"{context}: judge reply mutates non-text fields or is malformed",
        raw_reply=last_reply,
    )


def _validate_correction(
    parsed: object, segments: Sequence[AsrSegment]
) -> list[AsrSegment] | None:
    if not isinstance(parsed, list) or len(parsed) != len(segments):
        return None
    corrected = []
    for item, original in zip(parsed, segments):
        if not isinstance(item, dict) or set(item) != {"id", "startTime", "endTime", "text"}:
            return None
        if (
            item["id"] != original.id
            or item["startTime"] != original.start_time
            or item["endTime"] != original.end_time
        ):
            return None
        corrected.append(
            AsrSegment(original.id, original.start_time, original.end_time, str(item["text"]))
        )
    return corrected


def segment_steps(
    segments: Sequence[AsrSegment], judge: JudgeClient, subject: str
) -> list[StepPlan]:
    """Ask the judge to group fragments into steps, enforcing plan invariants."""
    if not segments:
        raise ValidationError("segment_steps requires at least one ASR segment")
    prompt = prompts.build_batch_prompt(
        prompts.STEP_SEGMENTATION, subject, _segment_payload(segments)
    )
    context = f"segmenting {len(segments)} fragments"
    known_ids = sorted(s.id for s in segments)

    last_reply = ""
    last_error = "malformed reply"
    for _ in range(2):
        parsed, last_reply = _judge_json(judge, prompts.STEP_SEGMENTATION, prompt, context)
        try:
            return _validate_plan(parsed, known_ids)
        except ValidationError as exc:
            last_error = str(exc)
    raise ProtocolError(f"{context}: {last_error}", raw_reply=last_reply)


def _validate_plan(parsed: object, known_ids: list[int]) -> list[StepPlan]:
    if not isinstance(parsed, dict) or not isinstance(parsed.get("steps"), list):
        raise ValidationError("reply must be an object with a 'steps' array")
    raw_steps = parsed["steps"]
    if not raw_steps:
        raise ValidationError("plan has no steps")
    plans: list[StepPlan] = []
    for item in raw_steps:
        if not isinstance(item, dict):
            raise ValidationError("each step must be an object")
        try:
            plans.append(
                StepPlan(
                    step=int(item["step"]),
                    procedure=str(item["procedure"]),
                    asr_ids=tuple(int(x) for x in item["ASR_id"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad step object: {exc}") from exc
    plans.sort(key=lambda p: p.step)
    if [p.step for p in plans] != list(range(1, len(plans) + 1)):
        raise ValidationError("step numbers must be 1..n without gaps")
    used: set[int] = set()
    for plan in plans:
        repeated = used & set(plan.asr_ids)
        if repeated:
            raise ValidationError(
                f"step {plan.step}: fragment ids {sorted(repeated)} already used by an "
                f"earlier step"
            )
        used.update(plan.asr_ids)
    for earlier, later in zip(plans, plans[1:]):
        if later.asr_ids[0] <= earlier.asr_ids[-1]:
            raise ValidationError("steps must be ordered by ascending fragment id")
    covered = sorted(used)
    if covered != list(range(covered[0], covered[-1] + 1)) or covered != known_ids:
        raise ValidationError(
            f"plan covers ids {covered} but must cover all of {known_ids} contiguously"
        )
    return plans


def annotate_principle_safety(
    plans: Sequence[StepPlan],
    segments: Sequence[AsrSegment],
    judge: JudgeClient,
    subject: str,
) -> list[AnnotatedStep]:
    """Attach optional principle/safety fields; existing fields must survive untouched."""
    if not plans:
        return []
    by_id = {s.id: s for s in segments}
    payload_items = []
    for plan in plans:
        first, last = by_id[plan.asr_ids[0]], by_id[plan.asr_ids[-1]]
        payload_items.append(
            {
                "id": plan.step,
                "startTime": first.start_time,
                "endTime": last.end_time,
                "text": plan.procedure,
            }
        )
    payload = json.dumps(payload_items, sort_keys=True, ensure_ascii=False)
    prompt = prompts.build_batch_prompt(prompts.ANNOTATION, subject, payload)
    context = f"annotating {len(plans)} steps"

    last_reply = ""
    for _ in range(2):
        parsed, last_reply = _judge_json(judge, prompts.ANNOTATION, prompt, context)
        annotated = _validate_annotation(parsed, payload_items, plans)
        if annotated is not None:
            return annotated
    raise ProtocolError(
        f"{context}: judge reply modified existing fields or is malformed",
        raw_reply=last_reply,
    )


def _validate_annotation(
    parsed: object, payload_items: list[dict], plans: Sequence[StepPlan]
) -> list[AnnotatedStep] | None:
    if not isinstance(parsed, list) or len(parsed) != len(payload_items):
        return None
    annotated = []
    for item, original, plan in zip(parsed, payload_items, plans):
        if not isinstance(item, dict):
            return None
        if set(item) - {"id", "startTime", "endTime", "text", "safety", "principle"}:
            return None
        if any(item.get(key) != original[key] for key in ("id", "startTime", "endTime", "text")):
            return None
        principle = item.get("principle")
        safety = item.get("safety")
        annotated.append(
            AnnotatedStep(
                plan=plan,
                principle=str(principle) if principle else None,
                safety=str(safety) if safety else None,
            )
        )
    return annotated


def clip_records(
    steps: Sequence[Union[StepPlan, AnnotatedStep]],
    segments: Sequence[AsrSegment],
    video: VideoMeta,
) -> list[StepRecord]:
    """Assemble StepRecords: clip bounds come from each step's first/last fragment."""
    by_id = {s.id: s for s in segments}
    records: list[StepRecord] = []
    for index, entry in enumerate(steps, start=1):
        annotated = entry if isinstance(entry, AnnotatedStep) else AnnotatedStep(plan=entry)
        plan = annotated.plan
        dangling = [i for i in plan.asr_ids if i not in by_id]
        if dangling:
            raise ValidationError(
                f"video {video.video_id} step {plan.step}: unknown fragment ids {dangling}"
            )
        first, last = by_id[plan.asr_ids[0]], by_id[plan.asr_ids[-1]]
        records.append(
            StepRecord(
                video_id=video.video_id,
                clip_id=f"{video.video_id}_s{index:02d}",
                step_index=index,
                title=video.title,
                subject=video.subject,
                discipline=video.discipline,
                start_time=first.start_time,
                end_time=last.end_time,
                procedure=plan.procedure,
                principle=annotated.principle,
                safety=annotated.safety,
            )
        )
    return records


def curate_video(
    segments: Sequence[AsrSegment],
    judge: JudgeClient,
    subject: str,
    video: VideoMeta,
) -> list[StepRecord]:
    """Full per-video pipeline: correct, segment, annotate, assemble."""
    corrected = correct_transcript(segments, judge, subject)
    plans = segment_steps(corrected, judge, subject)
    annotated = annotate_principle_safety(plans, corrected, judge, subject)
    return clip_records(annotated, corrected, video)


@dataclass(frozen=True)
class StatsBlock:
    clip_count: int
    mean_duration: float
    steps_per_video: float
    mean_text_length: float
    mean_procedure_length: float
    mean_principle_length: float
    mean_safety_length: float
    principle_rate: float
    safety_rate: float

    def to_obj(self) -> dict:
        return {
            "clip_count": self.clip_count,
            "mean_duration": self.mean_duration,
            "steps_per_video": self.steps_per_video,
            "mean_text_length": self.mean_text_length,
            "mean_procedure_length": self.mean_procedure_length,
            "mean_principle_length": self.mean_principle_length,
            "mean_safety_length": self.mean_safety_length,
            "principle_rate": self.principle_rate,
            "safety_rate": self.safety_rate,
        }


@dataclass(frozen=True)
class DatasetStats:
    overall: StatsBlock
    by_discipline: dict[str, StatsBlock]

    def to_obj(self) -> dict:
        return {
            "overall": self.overall.to_obj(),
            "by_discipline": {d: b.to_obj() for d, b in sorted(self.by_discipline.items())},
        }


def _words(text: str | None) -> int:
    return len(text.split()) if text else 0


def _stats_block(records: Sequence[StepRecord]) -> StatsBlock:
    n = len(records)
    videos = len({r.video_id for r in records})
    with_principle = [r for r in records if r.principle is not None]
    with_safety = [r for r in records if r.safety is not None]
    total_words = [
        _words(r.procedure) + _words(r.principle) + _words(r.safety) for r in records
    ]

    def mean(values: Sequence[float]) -> float:
        return sum(values) / len(values) if values else 0.0

    return StatsBlock(
        clip_count=n,
        mean_duration=mean([r.duration for r in records]),
        steps_per_video=n / videos,
        mean_text_length=mean(total_words),
        mean_procedure_length=mean([_words(r.procedure) for r in records]),
        mean_principle_length=mean([_words(r.principle) for r in with_principle]),
        mean_safety_length=mean([_words(r.safety) for r in with_safety]),
        principle_rate=len(with_principle) / n,
        safety_rate=len(with_safety) / n,
    )


def dataset_stats(records: Sequence[StepRecord]) -> DatasetStats:
    """Computed with whitespace word counts; section means cover records carrying
    that section, rates cover all records. Invariant under record reordering."""
    if not records:
        raise ValidationError("dataset_stats requires at least one record")
    by_discipline: dict[str, StatsBlock] = {}
    for discipline in sorted({r.discipline for r in records}, key=lambda d: d.value):
        subset = [r for r in records if r.discipline is discipline]
        by_discipline[discipline.value] = _stats_block(subset)
    return DatasetStats(overall=_stats_block(records), by_discipline=by_discipline)


@dataclass(frozen=True)
class QualityReport:
    overlaps: tuple[tuple[str, str, str], ...]  # (video_id, clip_a, clip_b)
    near_empty_procedures: tuple[str, ...]
    boilerplate_safety: tuple[tuple[str, int], ...]  # (safety text, repetition count)

    @property
    def is_clean(self) -> bool:
        return not (self.overlaps or self.near_empty_procedures or self.boilerplate_safety)

    def to_obj(self) -> dict:
        return {
            "overlaps": [list(o) for o in self.overlaps],
            "near_empty_procedures": list(self.near_empty_procedures),
            "boilerplate_safety": [[text, count] for text, count in self.boilerplate_safety],
        }


def quality_checks(records: Sequence[StepRecord]) -> QualityReport:
    """Flag misaligned clips, near-empty procedures, and boilerplate safety text."""
    overlaps: list[tuple[str, str, str]] = []
    by_video: dict[str, list[StepRecord]] = {}
    for record in records:
        by_video.setdefault(record.video_id, []).append(record)
    for video_id, video_records in by_video.items():
        ordered = sorted(video_records, key=lambda r: r.step_index)
        for a, b in zip(ordered, ordered[1:]):
            if b.start_time < a.end_time:
                overlaps.append((video_id, a.clip_id, b.clip_id))

    near_empty = tuple(
        r.clip_id for r in records if _words(r.procedure) < NEAR_EMPTY_PROCEDURE_WORDS
    )

    safety_counts: dict[str, int] = {}
    for record in records:
        if record.safety is not None:
            safety_counts[record.safety] = safety_counts.get(record.safety, 0) + 1
    total_safety = sum(safety_counts.values())
    boilerplate = tuple(
        (text, count)
        for text, count in sorted(safety_counts.items())
        if count >= 2 and total_safety and count / total_safety > SAFETY_DUPLICATION_SHARE
    )
    return QualityReport(
        overlaps=tuple(overlaps),
        near_empty_procedures=near_empty,
        boilerplate_safety=boilerplate,
    )
