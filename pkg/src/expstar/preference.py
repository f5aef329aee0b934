"""Safety preference pairs: sample candidate commentaries, gate them with the
rule-based safety check, and emit (chosen, rejected) pairs for preference
training.

The safety check compares a candidate's <Safety> section against the ground
truth with token-level longest-common-subsequence F1; candidates with no
section fail as "absent", below-threshold ones as "incorrect", unparseable
ones as "malformed". Malformed candidates count as failures but are never
paired, since both sides of a pair must parse.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .domain import GenerationContext, StepRecord, group_by_video, parse_commentary, render_commentary
from .errors import CommentaryParseError, ProtocolError, TransportError, ValidationError
from .fileio import json_line, sha256_text, write_jsonl
from .generation import GeneratorClient, GeneratorRequest, PHASE_SAMPLE, expect_candidates

DEFAULT_SIM_THRESHOLD = 0.3
DEFAULT_PAIR_CAP = 4

REASON_ABSENT = "safety_present_vs_absent"
REASON_INCORRECT = "safety_correct_vs_incorrect"

_WORD_RE = re.compile(r"[\w]+", re.UNICODE)


def _tokenize(text: str) -> list[str]:
    return [t.lower() for t in _WORD_RE.findall(text)]


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[len(b)]


def lcs_f1(candidate: str, reference: str) -> float:
    """Token-level LCS F1 between two strings."""
    cand = _tokenize(candidate)
    ref = _tokenize(reference)
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class SafetyRuleResult:
    passed: bool
    reason: str | None  # None when passed; "absent" | "incorrect" | "malformed" otherwise
    f1: float | None  # None for malformed candidates


def safety_rule(
    candidate: str, gt: StepRecord, sim_threshold: float = DEFAULT_SIM_THRESHOLD
) -> SafetyRuleResult:
    """PASS iff the candidate carries a safety section close enough to the ground truth."""
    if gt.safety is None:
        raise ValidationError(f"clip {gt.clip_id}: ground truth has no safety annotation")
    try:
        parsed = parse_commentary(candidate)
    except CommentaryParseError:
        return SafetyRuleResult(passed=False, reason="malformed", f1=None)
    if parsed.safety is None:
        return SafetyRuleResult(passed=False, reason="absent", f1=0.0)
    score = lcs_f1(parsed.safety, gt.safety)
    if score >= sim_threshold:
        return SafetyRuleResult(passed=True, reason=None, f1=score)
    return SafetyRuleResult(passed=False, reason="incorrect", f1=score)


@dataclass(frozen=True)
class CandidateSet:
    clip_id: str
    context_fingerprint: str
    candidates: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if len(self.candidates) < 2:
            raise ValidationError(
                f"clip {self.clip_id}: candidate set needs at least 2 candidates"
            )


@dataclass(frozen=True)
class PreferencePair:
    clip_id: str
    prompt: str
    chosen: str
    rejected: str
    reason: str
    f1_chosen: float
    f1_rejected: float

    def __post_init__(self) -> None:
        if self.reason not in (REASON_ABSENT, REASON_INCORRECT):
            raise ValidationError(f"unknown pair reason {self.reason!r}")

    def to_obj(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "prompt": self.prompt,
            "chosen": self.chosen,
            "rejected": self.rejected,
            "reason": self.reason,
            "f1_chosen": self.f1_chosen,
            "f1_rejected": self.f1_rejected,
        }


@dataclass(frozen=True)
class PairBuildStats:
    safety_steps: int
    sampled_steps: int
    no_contrast: tuple[str, ...]
    sampling_failures: tuple[str, ...]
    malformed_candidates: int

    def to_obj(self) -> dict:
        return {
            "safety_steps": self.safety_steps,
            "sampled_steps": self.sampled_steps,
            "no_contrast": list(self.no_contrast),
            "sampling_failures": list(self.sampling_failures),
            "malformed_candidates": self.malformed_candidates,
        }


def _context_prompt(ctx: GenerationContext) -> str:
    # Same shape as a final-phase request; passages stay empty because pair
    # sampling runs without retrieval.
    return json_line(
        {
            "clip_ref": ctx.clip_ref,
            "title": ctx.title,
            "preceding": list(render_commentary(c) for c in ctx.preceding),
            "passage": "",
        }
    )


def sample_candidates(
    step: StepRecord,
    ctx: GenerationContext,
    generator: GeneratorClient,
    L: int,
    top_p: float,
) -> CandidateSet:
    request = GeneratorRequest(
        phase=PHASE_SAMPLE,
        clip_ref=ctx.clip_ref,
        title=ctx.title,
        preceding=tuple(render_commentary(c) for c in ctx.preceding),
        partial=ctx.partial,
        top_p=top_p,
        count=L,
    )
    candidates = expect_candidates(generator.respond(request), L)
    return CandidateSet(
        clip_id=step.clip_id,
        context_fingerprint=sha256_text(_context_prompt(ctx)),
        candidates=candidates,
    )


def pairs_from_candidates(
    step: StepRecord,
    candidate_set: CandidateSet,
    prompt: str,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    cap: int = DEFAULT_PAIR_CAP,
) -> tuple[list[PreferencePair], int]:
    """Cross passing against failing candidates, capped; returns (pairs, malformed count)."""
    verdicts = [safety_rule(c, step, sim_threshold) for c in candidate_set.candidates]
    passes = [
        (c, v) for c, v in zip(candidate_set.candidates, verdicts) if v.passed
    ]
    fails = [
        (c, v)
        for c, v in zip(candidate_set.candidates, verdicts)
        if not v.passed and v.reason != "malformed"
    ]
    malformed = sum(1 for v in verdicts if v.reason == "malformed")

    passes.sort(key=lambda item: -(item[1].f1 or 0.0))  # stable: ties keep sample order
    fails.sort(key=lambda item: 0 if item[1].reason == "absent" else 1)

    pairs: list[PreferencePair] = []
    for chosen, chosen_verdict in passes:
        for rejected, rejected_verdict in fails:
            if len(pairs) >= cap:
                return pairs, malformed
            reason = (
                REASON_ABSENT if rejected_verdict.reason == "absent" else REASON_INCORRECT
            )
            pairs.append(
                PreferencePair(
                    clip_id=step.clip_id,
                    prompt=prompt,
                    chosen=chosen,
                    rejected=rejected,
                    reason=reason,
                    f1_chosen=chosen_verdict.f1 or 0.0,
                    f1_rejected=rejected_verdict.f1 or 0.0,
                )
            )
    return pairs, malformed


def build_pairs(
    records: Sequence[StepRecord],
    generator: GeneratorClient,
    L: int,
    top_p: float,
    sim_threshold: float = DEFAULT_SIM_THRESHOLD,
    cap: int = DEFAULT_PAIR_CAP,
) -> tuple[list[PreferencePair], PairBuildStats]:
    """Sample L candidates per safety-bearing step and emit preference pairs.

    Steps whose samples all pass or all fail contribute no pairs; sampling
    failures skip the step. Output is sorted by clip_id for order-insensitive
    aggregation.
    """
    if not 0.0 < top_p <= 1.0:
        raise ValidationError(f"top_p must be in (0, 1], got {top_p}")
    if L < 2:
        raise ValidationError(f"L must be >= 2, got {L}")

    pairs: list[PreferencePair] = []
    no_contrast: list[str] = []
    failures: list[str] = []
    malformed_total = 0
    safety_steps = 0
    sampled_steps = 0
    for video_records in group_by_video(records).values():
        preceding = []
        for step in video_records:
            if step.safety is None:
                preceding.append(step.commentary)
                continue
            safety_steps += 1
            ctx = GenerationContext(
                clip_ref=step.clip_id, title=step.title, preceding=tuple(preceding)
            )
            try:
                candidate_set = sample_candidates(step, ctx, generator, L, top_p)
            except (TransportError, ProtocolError):
                failures.append(step.clip_id)
                preceding.append(step.commentary)
                continue
            sampled_steps += 1
            step_pairs, malformed = pairs_from_candidates(
                step, candidate_set, _context_prompt(ctx), sim_threshold, cap
            )
            malformed_total += malformed
            if step_pairs:
                pairs.extend(step_pairs)
            else:
                no_contrast.append(step.clip_id)
            preceding.append(step.commentary)

    pairs.sort(key=lambda p: p.clip_id)
    stats = PairBuildStats(
        safety_steps=safety_steps,
        sampled_steps=sampled_steps,
        no_contrast=tuple(sorted(no_contrast)),
        sampling_failures=tuple(sorted(failures)),
        malformed_candidates=malformed_total,
    )
    return pairs, stats


def pair_report(pairs: Sequence[PreferencePair], records: Sequence[StepRecord]) -> dict:
    """Summarize pair yield over the safety-bearing portion of the dataset."""
    safety_clips = [r.clip_id for r in records if r.safety is not None]
    clips_with_pairs = {p.clip_id for p in pairs}
    by_reason = {REASON_ABSENT: 0, REASON_INCORRECT: 0}
    for pair in pairs:
        by_reason[pair.reason] += 1
    coverage = len(clips_with_pairs & set(safety_clips)) / len(safety_clips) if safety_clips else 0.0
    return {
        "pairs_total": len(pairs),
        "by_reason": by_reason,
        "safety_steps": len(safety_clips),
        "steps_with_pairs": len(clips_with_pairs & set(safety_clips)),
        "no_contrast_steps": sorted(set(safety_clips) - clips_with_pairs),
        "coverage": coverage,
    }


def write_pairs(path: str | Path, pairs: Sequence[PreferencePair]) -> None:
    write_jsonl(path, (p.to_obj() for p in pairs))
