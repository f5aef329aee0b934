"""Single entry point: every pipeline stage as a subcommand.

Exit codes: 0 success, 1 validation error, 2 protocol/transport error,
64 usage. Logs are line-delimited JSON on stderr; artifacts are written
atomically and each output gets a ``<out>.manifest.json`` sidecar carrying
the resolved config and input/output checksums, so identical reruns are
byte-identical.

Parallel units per subcommand: curate and infer fan out per video (bounded
by the backend's declared concurrency); the other stages run serially.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .config import PipelineConfig, derive_seed, resolve_config
from .curation import VideoMeta, curate_video, dataset_stats, load_asr, quality_checks
from .domain import (
    Discipline,
    StepRecord,
    group_by_video,
    load_dataset,
    save_commentary_file,
    save_dataset,
)
from .embeddings import load_clip_embeddings
from .errors import ProtocolError, TransportError, ValidationError
from .evaluation import (
    EXTERNAL_METRICS,
    NATIVE_METRICS,
    RemoteScorer,
    evaluate,
)
from .fileio import json_line, sha256_file, write_json
from .generation import GeneratorClient, RemoteGenerator, ScriptedGenerator
from .inference import VideoAbortError, run_video, write_traces
from .judging import JudgeClient, RemoteJudge, RuleBasedJudge
from .knowledge import build_index, load_index, load_passages, save_index
from .preference import build_pairs, pair_report, write_pairs
from .sequences import build_corpus, write_corpus

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PROTOCOL = 2
EXIT_USAGE = 64

_CONFIG_FLAG_KEYS = (
    "k",
    "fusion",
    "title_share",
    "top_p",
    "L",
    "sim_threshold",
    "seed",
    "jobs",
    "judge",
    "generator",
    "meteor_scorer",
    "bertscore_scorer",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse hook: raise instead of exiting
        raise UsageError(f"{self.format_usage()}error: {message}")


def log_event(level: str, event: str, **fields) -> None:
    print(json_line({"level": level, "event": event, **fields}), file=sys.stderr)


def _add_config_flags(parser: argparse.ArgumentParser, *keys: str) -> None:
    if "k" in keys:
        parser.add_argument("--k", type=int, default=None, help="top-K passages (default 5)")
    if "fusion" in keys:
        parser.add_argument(
            "--fusion", choices=["v", "vt", "vtp"], default=None, help="query fusion mode"
        )
        parser.add_argument(
            "--title-share",
            dest="title_share",
            type=float,
            default=None,
            help="title weight inside the VTP text query (default 0.5)",
        )
    if "top_p" in keys:
        parser.add_argument("--top-p", dest="top_p", type=float, default=None)
    if "L" in keys:
        parser.add_argument("--L", dest="L", type=int, default=None, help="candidates per step")
    if "sim_threshold" in keys:
        parser.add_argument("--sim-threshold", dest="sim_threshold", type=float, default=None)
    if "judge" in keys:
        parser.add_argument("--judge", default=None, help="mock | remote:<url>")
    if "generator" in keys:
        parser.add_argument("--generator", default=None, help="mock:<script> | remote:<url>")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--jobs", type=int, default=None)
    parser.add_argument("--config", default=None, help="key = value config file")


def build_parser() -> _Parser:
    parser = _Parser(prog="expstar", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("curate", parents=[], help="ASR transcripts -> step-level dataset")
    p.add_argument("--asr", action="append", required=True, help="transcript file (repeatable)")
    p.add_argument("--subject", required=True)
    p.add_argument(
        "--discipline", choices=[d.value for d in Discipline], default=Discipline.SCIENCE.value
    )
    p.add_argument("--out", required=True)
    _add_config_flags(p, "judge")

    p = sub.add_parser("stats", help="dataset statistics and quality flags")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--figures", default=None, help="directory for rendered figures")
    _add_config_flags(p)

    p = sub.add_parser("build-index", help="build the passage knowledge index")
    p.add_argument("--passages", required=True)
    p.add_argument("--embeddings", required=True, help="parallel passage embedding file")
    p.add_argument("--out", required=True)
    _add_config_flags(p)

    p = sub.add_parser("prepare-sft", help="control-token training corpus")
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--embeddings", required=True, help="clip embedding file")
    p.add_argument("--out", required=True)
    _add_config_flags(p, "judge", "k", "fusion")

    p = sub.add_parser("prepare-dpo", help="safety preference pairs")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, "generator", "L", "top_p", "sim_threshold")

    p = sub.add_parser("infer", help="staged adaptive-retrieval inference")
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--embeddings", required=True, help="clip embedding file")
    p.add_argument("--out", required=True, help="trace output (jsonl)")
    p.add_argument("--pred-out", dest="pred_out", default=None, help="write predictions file")
    p.add_argument("--ref-out", dest="ref_out", default=None, help="write references file")
    p.add_argument("--timings", action="store_true", help="include wall-clock phase timings")
    _add_config_flags(p, "generator", "k", "fusion")

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument(
        "--metrics",
        default="bleu,rouge,cider,safety",
        help="comma list of bleu,rouge,cider,safety,meteor,bertscore",
    )
    p.add_argument("--out", required=True)
    p.add_argument("--figures", default=None, help="directory for rendered figures")
    p.add_argument("--meteor-scorer", dest="meteor_scorer", default=None)
    p.add_argument("--bertscore-scorer", dest="bertscore_scorer", default=None)
    _add_config_flags(p)

    return parser


def _resolve(args: argparse.Namespace) -> PipelineConfig:
    flags = {key: getattr(args, key, None) for key in _CONFIG_FLAG_KEYS}
    return resolve_config(flags=flags, env=os.environ, file_path=args.config)


def make_judge(spec: str) -> JudgeClient:
    if spec == "mock":
        return RuleBasedJudge()
    if spec.startswith("remote:"):
        return RemoteJudge(spec.removeprefix("remote:"))
    raise ValidationError(f"unknown judge spec {spec!r}; expected mock or remote:<url>")


def make_generator(spec: str) -> GeneratorClient:
    if spec.startswith("mock:"):
        return ScriptedGenerator.from_file(spec.removeprefix("mock:"))
    if spec.startswith("remote:"):
        return RemoteGenerator(spec.removeprefix("remote:"))
    raise ValidationError(
        f"unknown generator spec {spec!r}; expected mock:<script> or remote:<url>"
    )


def _write_manifest(
    out: str,
    stage: str,
    config: PipelineConfig,
    inputs: Mapping[str, str | Path],
    outputs: Mapping[str, str | Path],
    extra: Mapping | None = None,
) -> None:
    manifest = {
        "stage": stage,
        "config": config.to_obj(),
        "inputs": {
            name: {"path": str(path), "sha256": sha256_file(path)}
            for name, path in sorted(inputs.items())
        },
        "outputs": {
            name: {"path": str(path), "sha256": sha256_file(path)}
            for name, path in sorted(outputs.items())
        },
    }
    if extra:
        manifest.update(extra)
    write_json(f"{out}.manifest.json", manifest)


def _map_ordered(items: Sequence, fn: Callable, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, item) for item in items]
        return [future.result() for future in futures]


def _video_meta(path: str, subject: str, discipline: str) -> VideoMeta:
    stem = Path(path).stem
    return VideoMeta(
        video_id=stem,
        title=stem.replace("_", " ").replace("-", " "),
        subject=subject,
        discipline=Discipline(discipline),
    )


def cmd_curate(args: argparse.Namespace, config: PipelineConfig) -> None:
    judge = make_judge(config.judge)
    jobs = min(config.jobs, judge.concurrency)

    def one_video(path: str) -> list[StepRecord]:
        segments = load_asr(path)
        meta = _video_meta(path, args.subject, args.discipline)
        records = curate_video(segments, judge, args.subject, meta)
        log_event("info", "video-curated", video_id=meta.video_id, steps=len(records))
        return records

    all_records = [r for batch in _map_ordered(args.asr, one_video, jobs) for r in batch]
    save_dataset(args.out, all_records)
    _write_manifest(
        args.out,
        "curate",
        config,
        inputs={Path(p).name: p for p in args.asr},
        outputs={"dataset": args.out},
        extra={"videos": len(args.asr), "clips": len(all_records)},
    )


def cmd_stats(args: argparse.Namespace, config: PipelineConfig) -> None:
    records = load_dataset(args.dataset)
    stats = dataset_stats(records)
    quality = quality_checks(records)
    report = {"stats": stats.to_obj(), "quality": quality.to_obj(), "config": config.to_obj()}
    write_json(args.out, report)
    outputs: dict[str, str | Path] = {"report": args.out}
    if args.figures:
        from .figures import save_stats_figures

        for path in save_stats_figures(records, stats, args.figures):
            outputs[path.name] = path
    _write_manifest(
        args.out, "stats", config, inputs={"dataset": args.dataset}, outputs=outputs
    )


def cmd_build_index(args: argparse.Namespace, config: PipelineConfig) -> None:
    passages = load_passages(args.passages, args.embeddings)
    index = build_index(passages)
    save_index(index, args.out)
    _write_manifest(
        args.out,
        "build-index",
        config,
        inputs={"passages": args.passages, "embeddings": args.embeddings},
        outputs={"index": args.out},
        extra={"passage_count": len(index), "dimension": index.dimension},
    )


def cmd_prepare_sft(args: argparse.Namespace, config: PipelineConfig) -> None:
    records = load_dataset(args.dataset)
    index = load_index(args.index)
    embeddings = load_clip_embeddings(args.embeddings)
    judge = make_judge(config.judge)
    sequences, manifest = build_corpus(
        records,
        index,
        embeddings,
        judge,
        k=config.k,
        fusion=config.fusion,
        title_share=config.title_share,
    )
    write_corpus(args.out, sequences)
    log_event("info", "corpus-built", sequences=len(sequences), **manifest.counts)
    _write_manifest(
        args.out,
        "prepare-sft",
        config,
        inputs={
            "dataset": args.dataset,
            "index": args.index,
            "embeddings": args.embeddings,
        },
        outputs={"corpus": args.out},
        extra=manifest.to_obj(),
    )


def cmd_prepare_dpo(args: argparse.Namespace, config: PipelineConfig) -> None:
    if not config.generator:
        raise ValidationError("prepare-dpo needs --generator (or EXPSTAR_GENERATOR)")
    records = load_dataset(args.dataset)
    generator = make_generator(config.generator)
    pairs, build_stats = build_pairs(
        records,
        generator,
        L=config.L,
        top_p=config.top_p,
        sim_threshold=config.sim_threshold,
    )
    write_pairs(args.out, pairs)
    summary = pair_report(pairs, records)
    report_path = f"{args.out}.report.json"
    write_json(report_path, {"summary": summary, "build": build_stats.to_obj()})
    log_event("info", "pairs-built", pairs=len(pairs), coverage=summary["coverage"])
    _write_manifest(
        args.out,
        "prepare-dpo",
        config,
        inputs={"dataset": args.dataset},
        outputs={"pairs": args.out, "report": report_path},
        extra={"summary": summary},
    )


def cmd_infer(args: argparse.Namespace, config: PipelineConfig) -> None:
    if not config.generator:
        raise ValidationError("infer needs --generator (or EXPSTAR_GENERATOR)")
    records = load_dataset(args.dataset)
    index = load_index(args.index)
    embeddings = load_clip_embeddings(args.embeddings)
    generator = make_generator(config.generator)
    groups = group_by_video(records)
    jobs = max(1, min(config.jobs, generator.concurrency))

    completed: list[tuple[str, list]] = []
    failure: tuple[str, VideoAbortError] | None = None
    video_items = list(groups.items())

    def run_one(item: tuple[str, list[StepRecord]]):
        video_id, video_records = item
        outputs = run_video(
            title=video_records[0].title,
            clip_ids=[r.clip_id for r in video_records],
            generator=generator,
            index=index,
            embeddings=embeddings,
            k=config.k,
            fusion=config.fusion,
            title_share=config.title_share,
        )
        return video_id, outputs

    if jobs <= 1:
        for item in video_items:
            try:
                completed.append(run_one(item))
            except VideoAbortError as exc:
                failure = (item[0], exc)
                break
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [(item[0], pool.submit(run_one, item)) for item in video_items]
        for video_id, future in futures:
            try:
                completed.append(future.result())
            except VideoAbortError as exc:
                failure = (video_id, exc)
                break

    traces = [trace for _, outputs in completed for _, trace in outputs]
    if failure is not None:
        video_id, abort = failure
        traces.extend(abort.traces)
        write_traces(args.out, traces, include_timings=args.timings)
        log_event(
            "error",
            "video-aborted",
            video_id=video_id,
            step_index=abort.step_index,
            partial_traces=len(traces),
        )
        raise abort

    write_traces(args.out, traces, include_timings=args.timings)
    outputs_map: dict[str, str | Path] = {"traces": args.out}
    if args.pred_out:
        preds = [
            (trace.clip_id, commentary)
            for _, outputs in completed
            for commentary, trace in outputs
        ]
        save_commentary_file(args.pred_out, preds)
        outputs_map["predictions"] = args.pred_out
    if args.ref_out:
        refs = [
            (record.clip_id, record.commentary)
            for video_id, _ in completed
            for record in groups[video_id]
        ]
        save_commentary_file(args.ref_out, refs)
        outputs_map["references"] = args.ref_out
    log_event("info", "inference-complete", videos=len(completed), steps=len(traces))
    _write_manifest(
        args.out,
        "infer",
        config,
        inputs={
            "dataset": args.dataset,
            "index": args.index,
            "embeddings": args.embeddings,
        },
        outputs=outputs_map,
        extra={"videos": len(completed), "steps": len(traces)},
    )


def cmd_evaluate(args: argparse.Namespace, config: PipelineConfig) -> None:
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    unknown = set(metrics) - set(NATIVE_METRICS) - set(EXTERNAL_METRICS)
    if unknown:
        raise ValidationError(f"unknown metrics: {sorted(unknown)}")
    scorers = {}
    if config.meteor_scorer:
        scorers["meteor"] = RemoteScorer(config.meteor_scorer)
    if config.bertscore_scorer:
        scorers["bertscore"] = RemoteScorer(config.bertscore_scorer)
    report = evaluate(args.pred, args.ref, metrics, scorers)
    write_json(args.out, {**report.to_obj(), "pipeline_config": config.to_obj()})
    outputs: dict[str, str | Path] = {"report": args.out}
    if args.figures:
        from .figures import save_metric_figures

        for path in save_metric_figures(report, args.figures):
            outputs[path.name] = path
    log_event("info", "evaluation-complete", n=report.n)
    _write_manifest(
        args.out,
        "evaluate",
        config,
        inputs={"pred": args.pred, "ref": args.ref},
        outputs=outputs,
    )


_HANDLERS: dict[str, Callable[[argparse.Namespace, PipelineConfig], None]] = {
    "curate": cmd_curate,
    "stats": cmd_stats,
    "build-index": cmd_build_index,
    "prepare-sft": cmd_prepare_sft,
    "prepare-dpo": cmd_prepare_dpo,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
}


def dispatch(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    if not args.command:
        print(parser.format_usage(), file=sys.stderr)
        return EXIT_USAGE

    try:
        config = _resolve(args)
        log_event(
            "info",
            "stage-start",
            stage=args.command,
            config=config.to_obj(),
            stage_seed=derive_seed(config.seed, args.command),
        )
        _HANDLERS[args.command](args, config)
        return EXIT_OK
    except VideoAbortError as exc:
        code = (
            EXIT_PROTOCOL
            if isinstance(exc.cause, (ProtocolError, TransportError))
            else EXIT_VALIDATION
        )
        log_event("error", "stage-failed", stage=args.command, error=str(exc))
        return code
    except (ProtocolError, TransportError) as exc:
        log_event("error", "stage-failed", stage=args.command, error=str(exc))
        return EXIT_PROTOCOL
    except ValidationError as exc:
        log_event("error", "stage-failed", stage=args.command, error=str(exc))
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
