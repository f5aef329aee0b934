from __future__ import annotations

import random

import pytest

from expstar.domain import ClipEmbeddingSet, Discipline, StepRecord
from expstar.embeddings import synthetic_vector
from expstar.knowledge import Passage, build_index


def make_record(
    clip_id: str = "vid1_s01",
    video_id: str = "vid1",
    step_index: int = 1,
    procedure: str = "Pour the solution into the beaker",
    principle: str | None = None,
    safety: str | None = None,
    start_time: float = 0.0,
    end_time: float = 10.0,
    title: str = "Acid base titration",
    subject: str = "chemistry",
    discipline: Discipline = Discipline.SCIENCE,
) -> StepRecord:
    return StepRecord(
        video_id=video_id,
        clip_id=clip_id,
        step_index=step_index,
        title=title,
        subject=subject,
        discipline=discipline,
        start_time=start_time,
        end_time=end_time,
        procedure=procedure,
        principle=principle,
        safety=safety,
    )


def make_video(
    video_id: str,
    sections: list[tuple[str | None, str | None]],
    title: str = "Acid base titration",
    discipline: Discipline = Discipline.SCIENCE,
) -> list[StepRecord]:
    """One record per (principle, safety) entry, contiguous steps and timings."""
    records = []
    for i, (principle, safety) in enumerate(sections, start=1):
        records.append(
            make_record(
                clip_id=f"{video_id}_s{i:02d}",
                video_id=video_id,
                step_index=i,
                procedure=f"Step {i}: transfer sample {i} into vessel {i}",
                principle=principle,
                safety=safety,
                start_time=(i - 1) * 10.0,
                end_time=i * 10.0,
                title=title,
                discipline=discipline,
            )
        )
    return records


def make_clip_embeddings(clip_id: str, dim: int = 8, frames: int = 3) -> ClipEmbeddingSet:
    return ClipEmbeddingSet(
        clip_id=clip_id,
        frame_embeddings=tuple(
            synthetic_vector(f"{clip_id}/frame{i}", dim) for i in range(frames)
        ),
        title_embedding=synthetic_vector(f"{clip_id}/title", dim),
        procedure_embedding=synthetic_vector(f"{clip_id}/procedure", dim),
    )


def make_passages(count: int, dim: int = 8, rng: random.Random | None = None) -> list[Passage]:
    rng = rng or random.Random(7)
    passages = []
    for i in range(count):
        vec = tuple(rng.gauss(0, 1) for _ in range(dim))
        passages.append(
            Passage(
                passage_id=f"p{i:04d}",
                title=f"Topic {i}",
                text=f"Reference text number {i} describing concept {i} in detail.",
                embedding=vec,
            )
        )
    return passages


@pytest.fixture
def small_index():
    return build_index(make_passages(6, dim=8))
