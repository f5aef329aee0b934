"""Construct the control-token SFT training mixture.

Every step yields either one retrieval-free sequence ending in <NOT RET>, or
one sequence per retrieved passage: ``... procedure <RET> passage
<REL|NOT REL> target-sections``, where the relevance control reproduces the
judge's thresholded 1-5 score (>= 3 is relevant). Supervision lands on the
procedure text, the control tokens, and the target sections only; video,
title, preceding commentary, and passages are context.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import prompts
from .domain import (
    ClipEmbeddingSet,
    Commentary,
    StepRecord,
    group_by_video,
    render_commentary,
    render_sections,
)
from .errors import ProtocolError, ValidationError
from .fileio import read_jsonl, write_jsonl
from .judging import JudgeClient
from .knowledge import FusionMode, KnowledgeIndex, Passage, fuse_query, search

RELEVANCE_THRESHOLD = 3


class ControlToken(Enum):
    RET = "<RET>"
    NOT_RET = "<NOT RET>"
    REL = "<REL>"
    NOT_REL = "<NOT REL>"


class SegmentKind(Enum):
    VIDEO_REF = "video_ref"
    TEXT = "text"
    CONTROL = "control"
    PASSAGE = "passage"


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    value: str
    supervised: bool

    def __post_init__(self) -> None:
        if self.kind in (SegmentKind.VIDEO_REF, SegmentKind.PASSAGE) and self.supervised:
            raise ValidationError(f"{self.kind.value} segments are never supervised")
        if self.kind is SegmentKind.CONTROL:
            if not self.supervised:
                raise ValidationError("control segments are always supervised")
            if self.value not in {t.value for t in ControlToken}:
                raise ValidationError(f"unknown control token {self.value!r}")


@dataclass(frozen=True)
class ControlledSequence:
    clip_id: str
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        validate_sequence(self)


@dataclass(frozen=True)
class RelevanceLabel:
    passage_id: str
    score: int
    relevant: bool

    def __post_init__(self) -> None:
        if not 1 <= self.score <= 5:
            raise ValidationError(f"relevance score must be 1..5, got {self.score}")
        if self.relevant != (self.score >= RELEVANCE_THRESHOLD):
            raise ValidationError(
                f"label inconsistent: score {self.score} implies relevant="
                f"{self.score >= RELEVANCE_THRESHOLD}"
            )

    @classmethod
    def from_score(cls, passage_id: str, score: int) -> "RelevanceLabel":
        return cls(passage_id=passage_id, score=score, relevant=score >= RELEVANCE_THRESHOLD)


def validate_sequence(seq: ControlledSequence) -> None:
    """Machine-check every structural invariant of a training sequence."""
    segs = seq.segments
    if len(segs) < 5:
        raise ValidationError(f"sequence for {seq.clip_id}: too short ({len(segs)} segments)")
    head = [
        (SegmentKind.VIDEO_REF, False, "video reference"),
        (SegmentKind.TEXT, False, "title"),
        (SegmentKind.TEXT, False, "preceding commentary"),
        (SegmentKind.TEXT, True, "procedure"),
    ]
    for i, (kind, supervised, name) in enumerate(head):
        if segs[i].kind is not kind or segs[i].supervised is not supervised:
            raise ValidationError(
                f"sequence for {seq.clip_id}: segment {i} must be the {name} "
                f"({kind.value}, supervised={supervised})"
            )
    decision = segs[4]
    if decision.kind is not SegmentKind.CONTROL or decision.value not in (
        ControlToken.RET.value,
        ControlToken.NOT_RET.value,
    ):
        raise ValidationError(
            f"sequence for {seq.clip_id}: segment 4 must be the <RET>/<NOT RET> decision"
        )
    rest = segs[5:]
    if decision.value == ControlToken.NOT_RET.value:
        if rest:
            raise ValidationError(
                f"sequence for {seq.clip_id}: <NOT RET> must terminate the sequence"
            )
        return
    if len(rest) != 3:
        raise ValidationError(
            f"sequence for {seq.clip_id}: <RET> sequence needs passage, relevance "
            f"control, and target sections"
        )
    passage, relevance, target = rest
    if passage.kind is not SegmentKind.PASSAGE:
        raise ValidationError(f"sequence for {seq.clip_id}: segment 5 must be a passage")
    if relevance.kind is not SegmentKind.CONTROL or relevance.value not in (
        ControlToken.REL.value,
        ControlToken.NOT_REL.value,
    ):
        raise ValidationError(
            f"sequence for {seq.clip_id}: passage must be followed by <REL>/<NOT REL>"
        )
    if target.kind is not SegmentKind.TEXT or not target.supervised:
        raise ValidationError(
            f"sequence for {seq.clip_id}: sequence must end with supervised target text"
        )


def supervision_mask(seq: ControlledSequence) -> list[bool]:
    """Per-segment loss mask; True marks tokens that incur training loss."""
    validate_sequence(seq)
    return [segment.supervised for segment in seq.segments]


def _parse_score(reply: str) -> int | None:
    try:
        score = int(reply.strip())
    except (TypeError, ValueError):
        return None
    return score if 1 <= score <= 5 else None


def label_relevance(
    step: StepRecord, passages: Sequence[Passage], judge: JudgeClient
) -> list[RelevanceLabel]:
    """Score each passage against the step's ground-truth commentary.

    The judge sees the title plus the rendered commentary as the query and
    the passage as the document, and must answer with a single integer 1-5;
    one retry is allowed before the reply is rejected.
    """
    if not step.has_knowledge_sections:
        raise ValidationError(
            f"clip {step.clip_id}: relevance labeling needs a principle or safety section"
        )
    if not passages:
        raise ValidationError(f"clip {step.clip_id}: no passages to label")
    query = f"{step.title}. {render_commentary(step.commentary)}"
    labels: list[RelevanceLabel] = []
    for passage in passages:
        prompt = prompts.build_relevance_prompt(query, f"{passage.title}. {passage.text}")
        score = _parse_score(judge.complete(prompts.RELEVANCE, prompt))
        if score is None:
            retry = judge.complete(prompts.RELEVANCE, prompt)
            score = _parse_score(retry)
            if score is None:
                raise ProtocolError(
                    f"clip {step.clip_id}: judge reply for passage "
                    f"{passage.passage_id!r} is not an integer 1-5",
                    raw_reply=retry,
                )
        labels.append(RelevanceLabel.from_score(passage.passage_id, score))
    return labels


def _context_segments(step: StepRecord, preceding: Sequence[Commentary]) -> list[Segment]:
    preceding_text = " ".join(render_commentary(c) for c in preceding)
    return [
        Segment(SegmentKind.VIDEO_REF, step.clip_id, supervised=False),
        Segment(SegmentKind.TEXT, step.title, supervised=False),
        Segment(SegmentKind.TEXT, preceding_text, supervised=False),
        Segment(SegmentKind.TEXT, step.procedure, supervised=True),
    ]


def build_step_sequences(
    step: StepRecord,
    preceding: Sequence[Commentary],
    index: KnowledgeIndex,
    clip_emb: ClipEmbeddingSet,
    judge: JudgeClient,
    k: int,
    fusion: FusionMode = FusionMode.VT,
    title_share: float = 0.5,
) -> list[ControlledSequence]:
    """Emit the training sequences for one step.

    Retrieval-free steps yield one <NOT RET> sequence. Knowledge-bearing
    steps retrieve top-k passages and yield one sequence per passage, each
    carrying the judged relevance control and the supervised target
    sections; <NOT REL> sequences still supervise the targets so the model
    learns to recover from unhelpful passages.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    context = _context_segments(step, preceding)
    if not step.has_knowledge_sections:
        segments = context + [Segment(SegmentKind.CONTROL, ControlToken.NOT_RET.value, True)]
        return [ControlledSequence(step.clip_id, tuple(segments))]

    try:
        query = fuse_query(clip_emb, fusion, title_share)
    except ValidationError as exc:
        raise ValidationError(f"clip {step.clip_id}: {exc}") from exc
    results = search(index, query, k)
    passages = [index.get(r.passage_id) for r in results]
    labels = label_relevance(step, passages, judge)
    target = render_sections(step.principle, step.safety)

    sequences: list[ControlledSequence] = []
    for passage, label in zip(passages, labels):
        control = ControlToken.REL if label.relevant else ControlToken.NOT_REL
        segments = context + [
            Segment(SegmentKind.CONTROL, ControlToken.RET.value, True),
            Segment(SegmentKind.PASSAGE, f"{passage.title}. {passage.text}", False),
            Segment(SegmentKind.CONTROL, control.value, True),
            Segment(SegmentKind.TEXT, target, supervised=True),
        ]
        sequences.append(ControlledSequence(step.clip_id, tuple(segments)))
    return sequences


@dataclass(frozen=True)
class CorpusManifest:
    counts: dict[str, int]
    k: int
    fusion_mode: str
    judge_id: str
    index_checksum: str

    def to_obj(self) -> dict:
        return {
            "counts": dict(self.counts),
            "k": self.k,
            "fusion_mode": self.fusion_mode,
            "judge_id": self.judge_id,
            "index_checksum": self.index_checksum,
        }


def build_corpus(
    records: Sequence[StepRecord],
    index: KnowledgeIndex,
    embeddings: Mapping[str, ClipEmbeddingSet],
    judge: JudgeClient,
    k: int,
    fusion: FusionMode = FusionMode.VT,
    title_share: float = 0.5,
) -> tuple[list[ControlledSequence], CorpusManifest]:
    """Run build_step_sequences over a dataset in video order.

    Preceding commentary is the ground truth of earlier steps (teacher
    forcing). The manifest counts sequences by kind.
    """
    missing = sorted({r.clip_id for r in records} - set(embeddings))
    if missing:
        raise ValidationError(f"missing clip embeddings for: {missing}")

    sequences: list[ControlledSequence] = []
    counts = {"not_ret": 0, "ret_rel": 0, "ret_not_rel": 0}
    for video_records in group_by_video(records).values():
        preceding: list[Commentary] = []
        for step in video_records:
            step_seqs = build_step_sequences(
                step, preceding, index, embeddings[step.clip_id], judge, k, fusion, title_share
            )
            for seq in step_seqs:
                decision = seq.segments[4].value
                if decision == ControlToken.NOT_RET.value:
                    counts["not_ret"] += 1
                elif seq.segments[6].value == ControlToken.REL.value:
                    counts["ret_rel"] += 1
                else:
                    counts["ret_not_rel"] += 1
            sequences.extend(step_seqs)
            preceding.append(step.commentary)
    manifest = CorpusManifest(
        counts=counts,
        k=k,
        fusion_mode=fusion.value,
        judge_id=judge.judge_id,
        index_checksum=index.checksum(),
    )
    return sequences, manifest


def sequence_to_obj(seq: ControlledSequence) -> dict:
    return {
        "clip_id": seq.clip_id,
        "segments": [
            {"kind": s.kind.value, "value": s.value, "supervised": s.supervised}
            for s in seq.segments
        ],
    }


def sequence_from_obj(obj: dict) -> ControlledSequence:
    try:
        segments = tuple(
            Segment(SegmentKind(s["kind"]), str(s["value"]), bool(s["supervised"]))
            for s in obj["segments"]
        )
        return ControlledSequence(clip_id=str(obj["clip_id"]), segments=segments)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed sequence object: {exc}") from exc


def write_corpus(path: str | Path, sequences: Iterable[ControlledSequence]) -> None:
    write_jsonl(path, (sequence_to_obj(s) for s in sequences))


def read_corpus(path: str | Path) -> list[ControlledSequence]:
    return [sequence_from_obj(obj) for _, obj in read_jsonl(path)]
