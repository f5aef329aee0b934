"""Staged control-token inference.

Per step: generate the procedure, elicit the <RET>/<NOT RET> decision, and
on <RET> retrieve top-k passages, elicit one <REL>/<NOT REL> verdict per
passage in rank order, then generate the knowledge sections conditioned on
the relevant subset (which may be empty; the decision token is
authoritative). Across a video, each step sees the *generated* commentary of
earlier steps, not the ground truth.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

from .domain import (
    ClipEmbeddingSet,
    Commentary,
    GenerationContext,
    PROCEDURE_TAG,
    parse_commentary,
    render_commentary,
)
from .errors import (
    CommentaryParseError,
    ContextOverflowError,
    ExpstarError,
    GenerationFormatError,
    ProtocolError,
    ValidationError,
)
from .fileio import write_jsonl
from .generation import (
    GeneratorClient,
    GeneratorRequest,
    PHASE_DECIDE,
    PHASE_FINAL,
    PHASE_JUDGE,
    PHASE_PROCEDURE,
    expect_control,
    expect_text,
)
from .knowledge import FusionMode, KnowledgeIndex, fuse_query, search
from .sequences import ControlToken

# Tokenizer-agnostic budget estimate: whitespace words times this factor.
DEFAULT_TOKENS_PER_WORD = 1.3


@dataclass(frozen=True)
class StepTrace:
    clip_id: str
    procedure: str
    decision: ControlToken
    candidates: tuple[tuple[str, ControlToken], ...]
    used_passages: tuple[str, ...]
    output: Commentary
    timings: dict[str, float]

    def __post_init__(self) -> None:
        if self.decision is ControlToken.NOT_RET:
            if self.candidates:
                raise ValidationError("NOT_RET trace must have no candidates")
            if self.output.has_knowledge_sections:
                raise ValidationError("NOT_RET trace output must be procedure-only")
        rel_ids = tuple(pid for pid, c in self.candidates if c is ControlToken.REL)
        if self.used_passages != rel_ids:
            raise ValidationError("used_passages must equal the REL subset in rank order")


class VideoAbortError(ExpstarError):
    """A step failed mid-video; carries the traces completed so far."""

    def __init__(self, step_index: int, traces: Sequence[StepTrace], cause: Exception):
        super().__init__(f"video aborted at step {step_index}: {cause}")
        self.step_index = step_index
        self.traces = tuple(traces)
        self.cause = cause


def _rendered_preceding(ctx: GenerationContext) -> tuple[str, ...]:
    return tuple(render_commentary(c) for c in ctx.preceding)


def _request(ctx: GenerationContext, phase: str, **kwargs) -> GeneratorRequest:
    return GeneratorRequest(
        phase=phase,
        clip_ref=ctx.clip_ref,
        title=ctx.title,
        preceding=_rendered_preceding(ctx),
        partial=ctx.partial,
        **kwargs,
    )


def format_passage_block(passages: Sequence[str]) -> str:
    """Rank-ordered passage block for the final prompt: 'Passage j: ...' lines."""
    return "\n".join(f"Passage {j}: {text}" for j, text in enumerate(passages, start=1))


def run_step(
    ctx: GenerationContext,
    generator: GeneratorClient,
    index: KnowledgeIndex,
    clip_emb: ClipEmbeddingSet,
    k: int,
    fusion: FusionMode = FusionMode.VT,
    title_share: float = 0.5,
) -> tuple[Commentary, StepTrace]:
    """Drive the full control-flow for one step and return its trace."""
    if ctx.partial:
        raise ValidationError("run_step requires a context with empty partial output")
    timings: dict[str, float] = {}

    start = time.perf_counter()
    procedure = expect_text(
        generator.respond(_request(ctx, PHASE_PROCEDURE)), PHASE_PROCEDURE
    ).strip()
    timings[PHASE_PROCEDURE] = time.perf_counter() - start
    if not procedure:
        raise GenerationFormatError("generator returned an empty procedure", raw_reply=procedure)
    ctx = ctx.with_partial(procedure)

    start = time.perf_counter()
    decision_value = expect_control(
        generator.respond(_request(ctx, PHASE_DECIDE)),
        PHASE_DECIDE,
        (ControlToken.RET.value, ControlToken.NOT_RET.value),
    )
    timings[PHASE_DECIDE] = time.perf_counter() - start
    decision = ControlToken(decision_value)
    ctx = ctx.with_partial(decision_value)

    if decision is ControlToken.NOT_RET:
        output = _parse_output(procedure, "")
        if output.has_knowledge_sections:
            raise ProtocolError(
                "generator emitted principle/safety content after <NOT RET>",
                raw_reply=procedure,
            )
        trace = StepTrace(
            clip_id=ctx.clip_ref,
            procedure=procedure,
            decision=decision,
            candidates=(),
            used_passages=(),
            output=output,
            timings=timings,
        )
        return output, trace

    start = time.perf_counter()
    query = fuse_query(clip_emb, fusion, title_share)
    results = search(index, query, k)
    timings["retrieve"] = time.perf_counter() - start

    candidates: list[tuple[str, ControlToken]] = []
    used_ids: list[str] = []
    used_texts: list[str] = []
    start = time.perf_counter()
    for result in results:
        passage = index.get(result.passage_id)
        passage_text = f"{passage.title}. {passage.text}"
        verdict_value = expect_control(
            generator.respond(_request(ctx, PHASE_JUDGE, passage=passage_text)),
            PHASE_JUDGE,
            (ControlToken.REL.value, ControlToken.NOT_REL.value),
        )
        verdict = ControlToken(verdict_value)
        candidates.append((result.passage_id, verdict))
        if verdict is ControlToken.REL:
            used_ids.append(result.passage_id)
            used_texts.append(passage_text)
    timings[PHASE_JUDGE] = time.perf_counter() - start

    start = time.perf_counter()
    final_text = expect_text(
        generator.respond(
            _request(ctx, PHASE_FINAL, passage=format_passage_block(used_texts))
        ),
        PHASE_FINAL,
    ).strip()
    timings[PHASE_FINAL] = time.perf_counter() - start

    output = _parse_output(procedure, final_text)
    trace = StepTrace(
        clip_id=ctx.clip_ref,
        procedure=procedure,
        decision=decision,
        candidates=tuple(candidates),
        used_passages=tuple(used_ids),
        output=output,
        timings=timings,
    )
    return output, trace


def _parse_output(procedure: str, sections_text: str) -> Commentary:
    full = f"{PROCEDURE_TAG} {procedure}"
    if sections_text:
        full = f"{full} {sections_text}"
    try:
        return parse_commentary(full)
    except CommentaryParseError as exc:
        raise GenerationFormatError(
            f"generated commentary failed parsing: {exc}", raw_reply=full
        ) from exc


def run_video(
    title: str,
    clip_ids: Sequence[str],
    generator: GeneratorClient,
    index: KnowledgeIndex,
    embeddings: Mapping[str, ClipEmbeddingSet],
    k: int,
    fusion: FusionMode = FusionMode.VT,
    title_share: float = 0.5,
) -> list[tuple[Commentary, StepTrace]]:
    """Run steps in order, threading each step's *generated* commentary forward."""
    missing = sorted(set(clip_ids) - set(embeddings))
    if missing:
        raise ValidationError(f"missing clip embeddings for: {missing}")
    outputs: list[tuple[Commentary, StepTrace]] = []
    preceding: list[Commentary] = []
    for step_index, clip_id in enumerate(clip_ids, start=1):
        ctx = GenerationContext(clip_ref=clip_id, title=title, preceding=tuple(preceding))
        try:
            commentary, trace = run_step(
                ctx, generator, index, embeddings[clip_id], k, fusion, title_share
            )
        except ExpstarError as exc:
            raise VideoAbortError(step_index, [t for _, t in outputs], exc) from exc
        outputs.append((commentary, trace))
        preceding.append(commentary)
    return outputs


def estimate_tokens(ctx: GenerationContext, tokens_per_word: float = DEFAULT_TOKENS_PER_WORD) -> int:
    words = len(ctx.title.split())
    words += sum(len(render_commentary(c).split()) for c in ctx.preceding)
    words += sum(len(part.split()) for part in ctx.partial)
    return math.ceil(words * tokens_per_word)


def truncate_context(
    ctx: GenerationContext,
    budget: int,
    tokens_per_word: float = DEFAULT_TOKENS_PER_WORD,
) -> GenerationContext:
    """Drop whole oldest preceding commentaries until the estimate fits.

    Current-step fields are never dropped; if they alone exceed the budget,
    that is a context overflow.
    """
    scaffold = replace(ctx, preceding=())
    if estimate_tokens(scaffold, tokens_per_word) > budget:
        raise ContextOverflowError(
            f"step scaffolding alone exceeds the {budget}-token budget"
        )
    trimmed = ctx
    while estimate_tokens(trimmed, tokens_per_word) > budget and trimmed.preceding:
        trimmed = replace(trimmed, preceding=trimmed.preceding[1:])
    return trimmed


def trace_to_obj(trace: StepTrace, include_timings: bool = False) -> dict:
    output: dict = {"procedure": trace.output.procedure}
    if trace.output.principle is not None:
        output["principle"] = trace.output.principle
    if trace.output.safety is not None:
        output["safety"] = trace.output.safety
    obj: dict = {
        "clip_id": trace.clip_id,
        "procedure": trace.procedure,
        "decision": trace.decision.value,
        "candidates": [
            {"passage_id": pid, "control": verdict.value} for pid, verdict in trace.candidates
        ],
        "used_passages": list(trace.used_passages),
        "output": output,
    }
    if include_timings:
        obj["timings"] = {k: round(v, 6) for k, v in sorted(trace.timings.items())}
    return obj


def write_traces(path: str | Path, traces: Sequence[StepTrace], include_timings: bool = False) -> None:
    write_jsonl(path, (trace_to_obj(t, include_timings) for t in traces))
