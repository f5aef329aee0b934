"""Captioning metric suite plus safety-coverage statistics.

Native implementations of corpus BLEU-1..4, ROUGE-L, and CIDEr run over
tag-stripped commentary text. Tokenization is fixed and echoed in the
report: lowercase, split at any non-alphanumeric run. METEOR and BERTScore
are delegated to an external scorer endpoint when configured and omitted
otherwise.
"""

from __future__ import annotations

import json
import math
import re
import urllib.error
import urllib.request
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence, runtime_checkable

from .domain import Commentary, load_commentary_file, strip_tags
from .errors import TransportError, ValidationError

_WORD_RE = re.compile(r"[\w]+", re.UNICODE)

ROUGE_BETA = 1.2
CIDER_MAX_N = 4
CIDER_SCALE = 10.0
BLEU_MAX_N = 4

NATIVE_METRICS = ("bleu", "rouge", "cider", "safety")
EXTERNAL_METRICS = ("meteor", "bertscore")

TOKENIZER_SPEC = "lowercase; tokens are maximal runs of alphanumerics/underscore"


def tokenize(text: str) -> list[str]:
    return [t.lower() for t in _WORD_RE.findall(text)]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(preds: Sequence[str], refs: Sequence[str], n_max: int = BLEU_MAX_N) -> list[float]:
    """Corpus BLEU-1..n_max: modified n-gram precision, brevity penalty, no smoothing.

    Scores are scaled to [0, 100]; any zero precision zeroes the affected orders.
    """
    if len(preds) != len(refs):
        raise ValidationError("bleu: prediction and reference counts differ")
    if not preds:
        raise ValidationError("bleu is undefined on an empty corpus")
    matches = [0] * n_max
    totals = [0] * n_max
    cand_len = 0
    ref_len = 0
    for pred, ref in zip(preds, refs):
        cand = tokenize(pred)
        reference = tokenize(ref)
        cand_len += len(cand)
        ref_len += len(reference)
        for n in range(1, n_max + 1):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(reference, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            totals[n - 1] += max(0, len(cand) - n + 1)

    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if cand_len == 0:
        return [0.0] * n_max
    brevity = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)

    scores = []
    for n in range(1, n_max + 1):
        window = precisions[:n]
        if any(p == 0.0 for p in window):
            scores.append(0.0)
            continue
        log_avg = sum(math.log(p) for p in window) / n
        scores.append(100.0 * brevity * math.exp(log_avg))
    return scores


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
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


def rouge_l(preds: Sequence[str], refs: Sequence[str], beta: float = ROUGE_BETA) -> float:
    """Corpus mean of per-pair LCS F-measure (beta weights recall), scaled to [0, 100]."""
    if len(preds) != len(refs):
        raise ValidationError("rouge_l: prediction and reference counts differ")
    if not preds:
        raise ValidationError("rouge_l is undefined on an empty corpus")
    total = 0.0
    for pred, ref in zip(preds, refs):
        cand = tokenize(pred)
        reference = tokenize(ref)
        lcs = _lcs_length(cand, reference)
        if lcs == 0 or not cand or not reference:
            continue
        precision = lcs / len(cand)
        recall = lcs / len(reference)
        denom = recall + (beta**2) * precision
        if denom > 0:
            total += ((1 + beta**2) * precision * recall) / denom
    return 100.0 * total / len(preds)


def cider(preds: Sequence[str], refs: Sequence[str], n_max: int = CIDER_MAX_N) -> float:
    """TF-IDF weighted n-gram cosine averaged over n=1..4, scaled by 10.

    IDF comes from the reference corpus, so at least two pairs are required.
    """
    if len(preds) != len(refs):
        raise ValidationError("cider: prediction and reference counts differ")
    if len(preds) < 2:
        raise ValidationError(
            "cider needs at least 2 pairs: inverse document frequency degenerates "
            "on a single-document corpus"
        )
    ref_tokens = [tokenize(r) for r in refs]
    pred_tokens = [tokenize(p) for p in preds]

    doc_freq: list[Counter] = [Counter() for _ in range(n_max)]
    for tokens in ref_tokens:
        for n in range(1, n_max + 1):
            for gram in set(_ngrams(tokens, n)):
                doc_freq[n - 1][gram] += 1
    log_corpus = math.log(len(refs))

    def tfidf_vector(tokens: Sequence[str], n: int) -> tuple[dict, float]:
        vec = {}
        for gram, count in _ngrams(tokens, n).items():
            idf = log_corpus - math.log(max(1.0, doc_freq[n - 1][gram]))
            vec[gram] = count * idf
        norm = math.sqrt(sum(v * v for v in vec.values()))
        return vec, norm

    total = 0.0
    for cand, reference in zip(pred_tokens, ref_tokens):
        pair_score = 0.0
        for n in range(1, n_max + 1):
            vec_c, norm_c = tfidf_vector(cand, n)
            vec_r, norm_r = tfidf_vector(reference, n)
            if norm_c == 0.0 or norm_r == 0.0:
                continue
            dot = sum(value * vec_r.get(gram, 0.0) for gram, value in vec_c.items())
            pair_score += dot / (norm_c * norm_r)
        total += CIDER_SCALE * pair_score / n_max
    return total / len(preds)


def safety_stats(
    preds: Sequence[Commentary], refs: Sequence[Commentary]
) -> tuple[float, float]:
    """(precision, frequency) of safety-section presence.

    Precision is agreement with the reference on whether a safety section is
    present; frequency is how often predictions carry one.
    """
    if len(preds) != len(refs):
        raise ValidationError("safety_stats: prediction and reference counts differ")
    if not preds:
        return 1.0, 0.0
    agree = sum(
        1 for p, r in zip(preds, refs) if (p.safety is not None) == (r.safety is not None)
    )
    present = sum(1 for p in preds if p.safety is not None)
    return agree / len(preds), present / len(preds)


HUMAN_CRITERIA = ("flu", "ins", "sci")


def aggregate_human(
    samples: Sequence[Sequence[Mapping[str, float]]],
) -> dict[str, dict[str, float]]:
    """Aggregate 0-2 scale annotator scores: mean over annotators, then samples.

    Returns {criterion: {mean, sd}}; sd is the population deviation of the
    per-sample means.
    """
    if not samples:
        raise ValidationError("aggregate_human needs at least one sample")
    per_sample: dict[str, list[float]] = {c: [] for c in HUMAN_CRITERIA}
    for i, annotators in enumerate(samples):
        if not annotators:
            raise ValidationError(f"sample {i}: needs at least one annotator")
        for c in HUMAN_CRITERIA:
            values = []
            for j, scores in enumerate(annotators):
                if c not in scores:
                    raise ValidationError(f"sample {i}, annotator {j}: missing criterion {c!r}")
                value = float(scores[c])
                if not 0.0 <= value <= 2.0:
                    raise ValidationError(
                        f"sample {i}, annotator {j}: criterion {c!r} score {value} "
                        f"outside [0, 2]"
                    )
                values.append(value)
            per_sample[c].append(sum(values) / len(values))
    result = {}
    for c in HUMAN_CRITERIA:
        means = per_sample[c]
        mean = sum(means) / len(means)
        sd = math.sqrt(sum((x - mean) ** 2 for x in means) / len(means))
        result[c] = {"mean": mean, "sd": sd}
    return result


@dataclass(frozen=True)
class EvalPair:
    clip_id: str
    prediction: Commentary
    reference: Commentary


@runtime_checkable
class ExternalScorer(Protocol):
    scorer_id: str

    def score(self, candidates: Sequence[str], references: Sequence[str]) -> float: ...


class RemoteScorer:
    """HTTP scorer: POST {candidates, references}, expect {score}."""

    def __init__(self, endpoint: str, scorer_id: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint
        self.scorer_id = scorer_id or f"remote:{endpoint}"
        self.timeout = timeout

    def score(self, candidates: Sequence[str], references: Sequence[str]) -> float:
        body = json.dumps(
            {"candidates": list(candidates), "references": list(references)}
        ).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TransportError(f"scorer endpoint {self.endpoint}: {exc}") from exc
        if not isinstance(payload, dict) or "score" not in payload:
            raise TransportError(f"scorer endpoint {self.endpoint}: response lacks 'score'")
        return float(payload["score"])


@dataclass(frozen=True)
class MetricReport:
    n: int
    bleu1: float | None = None
    bleu2: float | None = None
    bleu3: float | None = None
    bleu4: float | None = None
    rougeL: float | None = None
    cider: float | None = None
    meteor: float | None = None
    bertscore: float | None = None
    safety_precision: float | None = None
    safety_frequency: float | None = None
    config: dict = field(default_factory=dict)

    def to_obj(self) -> dict:
        obj: dict = {"n": self.n, "config": dict(self.config)}
        for key in (
            "bleu1",
            "bleu2",
            "bleu3",
            "bleu4",
            "rougeL",
            "cider",
            "meteor",
            "bertscore",
            "safety_precision",
            "safety_frequency",
        ):
            value = getattr(self, key)
            if value is not None:
                obj[key] = value
        return obj


def evaluate_pairs(
    preds: Mapping[str, Commentary],
    refs: Mapping[str, Commentary],
    metrics: Sequence[str] = NATIVE_METRICS,
    scorers: Mapping[str, ExternalScorer] | None = None,
) -> MetricReport:
    """Score aligned predictions against references on the configured metrics."""
    unknown = set(metrics) - set(NATIVE_METRICS) - set(EXTERNAL_METRICS)
    if unknown:
        raise ValidationError(f"unknown metrics: {sorted(unknown)}")
    missing = sorted(set(refs) - set(preds))
    extra = sorted(set(preds) - set(refs))
    if missing or extra:
        raise ValidationError(
            f"prediction/reference clip_ids differ; missing from predictions: "
            f"{missing}, unmatched predictions: {extra}"
        )
    scorers = scorers or {}
    pairs = [EvalPair(clip_id, preds[clip_id], refs[clip_id]) for clip_id in refs]
    pred_list = [p.prediction for p in pairs]
    ref_list = [p.reference for p in pairs]
    pred_texts = [strip_tags(c) for c in pred_list]
    ref_texts = [strip_tags(c) for c in ref_list]

    values: dict[str, float] = {}
    if "bleu" in metrics:
        b = bleu(pred_texts, ref_texts)
        values.update(bleu1=b[0], bleu2=b[1], bleu3=b[2], bleu4=b[3])
    if "rouge" in metrics:
        values["rougeL"] = rouge_l(pred_texts, ref_texts)
    if "cider" in metrics:
        values["cider"] = cider(pred_texts, ref_texts)
    if "safety" in metrics:
        precision, frequency = safety_stats(pred_list, ref_list)
        values["safety_precision"] = precision
        values["safety_frequency"] = frequency
    for name in EXTERNAL_METRICS:
        if name in metrics and name in scorers:
            values[name] = scorers[name].score(pred_texts, ref_texts)

    config = {
        "tokenizer": TOKENIZER_SPEC,
        "metrics": sorted(metrics),
        "rouge_beta": ROUGE_BETA,
        "cider_max_n": CIDER_MAX_N,
        "cider_scale": CIDER_SCALE,
        "bleu_max_n": BLEU_MAX_N,
        "external_scorers": {m: scorers[m].scorer_id for m in scorers},
    }
    return MetricReport(n=len(pairs), config=config, **values)


def evaluate(
    pred_path: str | Path,
    ref_path: str | Path,
    metrics: Sequence[str] = NATIVE_METRICS,
    scorers: Mapping[str, ExternalScorer] | None = None,
) -> MetricReport:
    preds = load_commentary_file(pred_path)
    refs = load_commentary_file(ref_path)
    return evaluate_pairs(preds, refs, metrics, scorers)
