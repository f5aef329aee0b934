"""Matplotlib figure rendering for the report paths.

The stats and evaluate subcommands write these PNGs next to their delimited
outputs. PNG metadata is pinned so reruns stay byte-identical.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from matplotlib.figure import Figure

from .curation import DatasetStats
from .domain import StepRecord
from .evaluation import MetricReport

_PNG_METADATA = {"Software": "expstar"}

_DISCIPLINE_COLORS = {"science": "#4C72B0", "healthcare": "#DD8452", "engineering": "#55A868"}


def _save(fig: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    return path


def save_stats_figures(
    records: Sequence[StepRecord], stats: DatasetStats, outdir: str | Path
) -> list[Path]:
    outdir = Path(outdir)
    written: list[Path] = []

    fig = Figure(figsize=(5, 3.2), constrained_layout=True)
    ax = fig.add_subplot()
    ax.hist([r.duration for r in records], bins=12, color="#4C72B0", edgecolor="white")
    ax.set_xlabel("Clip duration (s)")
    ax.set_ylabel("Clips")
    ax.set_title("Clip duration distribution")
    written.append(_save(fig, outdir / "clip_durations.png"))

    fig = Figure(figsize=(5, 3.2), constrained_layout=True)
    ax = fig.add_subplot()
    names = list(stats.by_discipline)
    counts = [stats.by_discipline[d].clip_count for d in names]
    ax.bar(names, counts, color=[_DISCIPLINE_COLORS.get(d, "#8172B3") for d in names])
    ax.set_ylabel("Clips")
    ax.set_title("Clips per discipline")
    written.append(_save(fig, outdir / "discipline_counts.png"))

    fig = Figure(figsize=(5, 3.2), constrained_layout=True)
    ax = fig.add_subplot()
    sections = ["procedure", "principle", "safety"]
    lengths = [
        stats.overall.mean_procedure_length,
        stats.overall.mean_principle_length,
        stats.overall.mean_safety_length,
    ]
    ax.bar(sections, lengths, color="#55A868")
    ax.set_ylabel("Mean words")
    ax.set_title("Mean section length")
    written.append(_save(fig, outdir / "section_lengths.png"))

    fig = Figure(figsize=(5, 3.2), constrained_layout=True)
    ax = fig.add_subplot()
    ax.bar(
        ["principle", "safety"],
        [stats.overall.principle_rate, stats.overall.safety_rate],
        color=["#4C72B0", "#DD8452"],
    )
    ax.set_ylim(0, 1)
    ax.set_ylabel("Fraction of clips")
    ax.set_title("Annotation rates")
    written.append(_save(fig, outdir / "annotation_rates.png"))
    return written


def save_metric_figures(report: MetricReport, outdir: str | Path) -> list[Path]:
    outdir = Path(outdir)
    written: list[Path] = []

    scored = [
        (name, getattr(report, name))
        for name in ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider", "meteor", "bertscore")
        if getattr(report, name) is not None
    ]
    if scored:
        fig = Figure(figsize=(6, 3.2), constrained_layout=True)
        ax = fig.add_subplot()
        ax.bar([n for n, _ in scored], [v for _, v in scored], color="#4C72B0")
        ax.set_ylabel("Score")
        ax.set_title(f"Text metrics (n={report.n})")
        ax.tick_params(axis="x", rotation=30)
        written.append(_save(fig, outdir / "text_metrics.png"))

    if report.safety_precision is not None and report.safety_frequency is not None:
        fig = Figure(figsize=(4, 3.2), constrained_layout=True)
        ax = fig.add_subplot()
        ax.bar(
            ["precision", "frequency"],
            [report.safety_precision, report.safety_frequency],
            color=["#55A868", "#DD8452"],
        )
        ax.set_ylim(0, 1)
        ax.set_title("Safety-section statistics")
        written.append(_save(fig, outdir / "safety_stats.png"))
    return written
