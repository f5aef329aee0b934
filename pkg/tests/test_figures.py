from __future__ import annotations

from conftest import make_video
from expstar.curation import dataset_stats
from expstar.domain import Discipline
from expstar.evaluation import MetricReport
from expstar.figures import save_metric_figures, save_stats_figures


def records_fixture():
    return make_video(
        "vid1", [(None, None), ("law", "care"), (None, "care")], discipline=Discipline.SCIENCE
    ) + make_video("vid2", [("law", None)] * 2, discipline=Discipline.HEALTHCARE)


def test_stats_figures_written(tmp_path):
    records = records_fixture()
    written = save_stats_figures(records, dataset_stats(records), tmp_path)
    assert len(written) == 4
    for path in written:
        assert path.exists() and path.stat().st_size > 0
        assert path.suffix == ".png"


def test_metric_figures_written(tmp_path):
    report = MetricReport(
        n=4, bleu1=50.0, bleu2=40.0, bleu3=30.0, bleu4=20.0, rougeL=45.0, cider=3.3,
        safety_precision=0.75, safety_frequency=0.5,
    )
    written = save_metric_figures(report, tmp_path)
    assert {p.name for p in written} == {"text_metrics.png", "safety_stats.png"}


def test_metric_figures_skip_absent_sections(tmp_path):
    report = MetricReport(n=2, safety_precision=1.0, safety_frequency=0.0)
    written = save_metric_figures(report, tmp_path)
    assert {p.name for p in written} == {"safety_stats.png"}


def test_figures_are_deterministic(tmp_path):
    records = records_fixture()
    stats = dataset_stats(records)
    first = save_stats_figures(records, stats, tmp_path / "a")
    second = save_stats_figures(records, stats, tmp_path / "b")
    for p1, p2 in zip(first, second):
        assert p1.read_bytes() == p2.read_bytes()
