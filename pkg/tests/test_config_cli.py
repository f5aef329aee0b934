from __future__ import annotations

import json
from pathlib import Path

import pytest

from expstar.config import PipelineConfig, derive_seed, resolve_config
from expstar.cli import dispatch
from expstar.errors import ValidationError
from expstar.knowledge import FusionMode

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


class TestResolveConfig:
    def test_defaults(self):
        config = resolve_config()
        assert config.k == 5
        assert config.top_p == 0.9
        assert config.L == 8
        assert config.sim_threshold == 0.3
        assert config.fusion is FusionMode.VT

    def test_flag_beats_env(self):
        config = resolve_config(flags={"k": 8}, env={"EXPSTAR_K": "3"})
        assert config.k == 8

    def test_env_beats_file(self, tmp_path):
        path = tmp_path / "cfg"
        path.write_text("k = 2\n")
        config = resolve_config(env={"EXPSTAR_K": "3"}, file_path=path)
        assert config.k == 3

    def test_file_beats_default(self, tmp_path):
        path = tmp_path / "cfg"
        path.write_text("# comment\nk = 2\ntop_p = 0.8\nfusion = vtp\n")
        config = resolve_config(file_path=path)
        assert config.k == 2
        assert config.top_p == 0.8
        assert config.fusion is FusionMode.VTP

    def test_type_error_names_key_and_source(self, tmp_path):
        path = tmp_path / "cfg"
        path.write_text("sim_threshold = high\n")
        with pytest.raises(ValidationError) as err:
            resolve_config(file_path=path)
        assert "sim_threshold" in str(err.value)
        assert "config file" in str(err.value)

    def test_unknown_file_key_rejected(self, tmp_path):
        path = tmp_path / "cfg"
        path.write_text("warp_speed = 9\n")
        with pytest.raises(ValidationError, match="warp_speed"):
            resolve_config(file_path=path)

    def test_invalid_env_value_names_env(self):
        with pytest.raises(ValidationError, match="env"):
            resolve_config(env={"EXPSTAR_TOP_P": "2.5"})

    def test_config_echo_round_trip(self):
        obj = PipelineConfig().to_obj()
        assert obj["k"] == 5 and obj["fusion"] == "vt" and obj["top_p"] == 0.9

    def test_seed_derivation_stable_and_stage_dependent(self):
        assert derive_seed(0, "infer") == derive_seed(0, "infer")
        assert derive_seed(0, "infer") != derive_seed(0, "curate")
        assert derive_seed(0, "infer") != derive_seed(1, "infer")


def run_pipeline(tmp_path: Path, monkeypatch) -> dict[str, Path]:
    """curate -> build-index -> prepare-sft -> infer -> evaluate on fixtures."""
    monkeypatch.delenv("EXPSTAR_K", raising=False)
    out = {
        "dataset": tmp_path / "dataset.jsonl",
        "index": tmp_path / "kb.idx",
        "corpus": tmp_path / "corpus.jsonl",
        "traces": tmp_path / "traces.jsonl",
        "preds": tmp_path / "preds.jsonl",
        "refs": tmp_path / "refs.jsonl",
        "report": tmp_path / "report.json",
    }
    assert dispatch([
        "curate",
        "--asr", str(FIXTURES / "titration.jsonl"),
        "--asr", str(FIXTURES / "crystals.jsonl"),
        "--subject", "chemistry",
        "--judge", "mock",
        "--out", str(out["dataset"]),
    ]) == 0
    assert dispatch([
        "build-index",
        "--passages", str(FIXTURES / "passages.jsonl"),
        "--embeddings", str(FIXTURES / "passage_embeddings.jsonl"),
        "--out", str(out["index"]),
    ]) == 0
    assert dispatch([
        "prepare-sft",
        "--dataset", str(out["dataset"]),
        "--index", str(out["index"]),
        "--embeddings", str(FIXTURES / "clip_embeddings.jsonl"),
        "--judge", "mock",
        "--k", "5",
        "--out", str(out["corpus"]),
    ]) == 0
    assert dispatch([
        "infer",
        "--dataset", str(out["dataset"]),
        "--index", str(out["index"]),
        "--embeddings", str(FIXTURES / "clip_embeddings.jsonl"),
        "--generator", f"mock:{FIXTURES / 'generator_script.jsonl'}",
        "--k", "5",
        "--fusion", "vt",
        "--out", str(out["traces"]),
        "--pred-out", str(out["preds"]),
        "--ref-out", str(out["refs"]),
    ]) == 0
    assert dispatch([
        "evaluate",
        "--pred", str(out["preds"]),
        "--ref", str(out["refs"]),
        "--metrics", "bleu,rouge,cider,safety",
        "--out", str(out["report"]),
    ]) == 0
    return out


class TestPipeline:
    def test_end_to_end_on_fixtures(self, tmp_path, monkeypatch):
        out = run_pipeline(tmp_path, monkeypatch)

        records = [json.loads(line) for line in out["dataset"].read_text().splitlines()]
        assert len(records) == 8

        corpus = [json.loads(line) for line in out["corpus"].read_text().splitlines()]
        knowledge = sum(1 for r in records if r.get("principle") or r.get("safety"))
        assert len(corpus) == (len(records) - knowledge) + 5 * knowledge == 28

        manifest = json.loads(Path(str(out["corpus"]) + ".manifest.json").read_text())
        assert manifest["counts"]["not_ret"] == 3
        assert manifest["counts"]["ret_rel"] + manifest["counts"]["ret_not_rel"] == 25
        assert manifest["config"]["k"] == 5

        traces = [json.loads(line) for line in out["traces"].read_text().splitlines()]
        assert len(traces) == 8
        decisions = [t["decision"] for t in traces]
        assert decisions.count("<RET>") == 5
        assert decisions.count("<NOT RET>") == 3

        # Scripted generator replays ground truth, so evaluation is perfect.
        report = json.loads(out["report"].read_text())
        assert report["bleu4"] == pytest.approx(100.0)
        assert report["rougeL"] == pytest.approx(100.0)
        assert report["cider"] == pytest.approx(10.0)
        assert report["safety_precision"] == 1.0
        assert report["n"] == 8

    def test_rerun_is_byte_identical(self, tmp_path, monkeypatch):
        first = run_pipeline(tmp_path / "run1", monkeypatch)
        second = run_pipeline(tmp_path / "run2", monkeypatch)
        for key in first:
            assert first[key].read_bytes() == second[key].read_bytes(), (
                f"{key} differs between reruns"
            )
        # manifests are identical except for embedded absolute paths
        m1 = json.loads(Path(str(first["corpus"]) + ".manifest.json").read_text())
        m2 = json.loads(Path(str(second["corpus"]) + ".manifest.json").read_text())
        assert m1["counts"] == m2["counts"]
        assert [v["sha256"] for v in m1["inputs"].values()] == [
            v["sha256"] for v in m2["inputs"].values()
        ]

    def test_prepare_dpo_on_fixtures(self, tmp_path, monkeypatch):
        out = run_pipeline(tmp_path, monkeypatch)
        pairs_path = tmp_path / "pairs.jsonl"
        code = dispatch([
            "prepare-dpo",
            "--dataset", str(out["dataset"]),
            "--generator", f"mock:{FIXTURES / 'dpo_sampler_script.jsonl'}",
            "--L", "4",
            "--top-p", "0.9",
            "--sim-threshold", "0.3",
            "--out", str(pairs_path),
        ])
        assert code == 0
        pairs = [json.loads(line) for line in pairs_path.read_text().splitlines()]
        assert pairs, "expected at least one preference pair"
        assert all(
            set(p) == {"clip_id", "prompt", "chosen", "rejected", "reason", "f1_chosen", "f1_rejected"}
            for p in pairs
        )
        report = json.loads(Path(str(pairs_path) + ".report.json").read_text())
        assert report["summary"]["pairs_total"] == len(pairs)
        manifest = json.loads(Path(str(pairs_path) + ".manifest.json").read_text())
        assert manifest["config"]["top_p"] == 0.9  # default echoed into provenance

    def test_stats_with_figures(self, tmp_path, monkeypatch):
        out = run_pipeline(tmp_path, monkeypatch)
        stats_path = tmp_path / "stats.json"
        figures_dir = tmp_path / "figs"
        code = dispatch([
            "stats",
            "--dataset", str(out["dataset"]),
            "--out", str(stats_path),
            "--figures", str(figures_dir),
        ])
        assert code == 0
        stats = json.loads(stats_path.read_text())
        assert stats["stats"]["overall"]["clip_count"] == 8
        assert stats["quality"]["overlaps"] == []
        pngs = sorted(p.name for p in figures_dir.glob("*.png"))
        assert pngs == [
            "annotation_rates.png",
            "clip_durations.png",
            "discipline_counts.png",
            "section_lengths.png",
        ]

    def test_evaluate_with_figures(self, tmp_path, monkeypatch):
        out = run_pipeline(tmp_path, monkeypatch)
        report2 = tmp_path / "report2.json"
        figures_dir = tmp_path / "eval_figs"
        code = dispatch([
            "evaluate",
            "--pred", str(out["preds"]),
            "--ref", str(out["refs"]),
            "--out", str(report2),
            "--figures", str(figures_dir),
        ])
        assert code == 0
        assert (figures_dir / "text_metrics.png").exists()
        assert (figures_dir / "safety_stats.png").exists()


class TestExitCodes:
    def test_unknown_flag_is_64(self):
        assert dispatch(["evaluate", "--bogus"]) == 64

    def test_unknown_subcommand_is_64(self):
        assert dispatch(["transmogrify"]) == 64

    def test_no_subcommand_is_64(self):
        assert dispatch([]) == 64

    def test_validation_error_is_1(self, tmp_path):
        missing = tmp_path / "nope.jsonl"
        missing.write_text('{"bad": true}\n')
        assert dispatch([
            "stats", "--dataset", str(missing), "--out", str(tmp_path / "s.json")
        ]) == 1

    def test_judge_endpoint_down_is_2(self, tmp_path, monkeypatch):
        out = run_pipeline(tmp_path, monkeypatch)
        code = dispatch([
            "prepare-sft",
            "--dataset", str(out["dataset"]),
            "--index", str(out["index"]),
            "--embeddings", str(FIXTURES / "clip_embeddings.jsonl"),
            "--judge", "remote:http://127.0.0.1:1/judge",
            "--out", str(tmp_path / "corpus2.jsonl"),
        ])
        assert code == 2

    def test_exhausted_generator_script_is_2(self, tmp_path, monkeypatch):
        out = run_pipeline(tmp_path, monkeypatch)
        empty_script = tmp_path / "empty_script.jsonl"
        empty_script.write_text("")
        code = dispatch([
            "infer",
            "--dataset", str(out["dataset"]),
            "--index", str(out["index"]),
            "--embeddings", str(FIXTURES / "clip_embeddings.jsonl"),
            "--generator", f"mock:{empty_script}",
            "--out", str(tmp_path / "traces2.jsonl"),
        ])
        assert code == 2
        # partial-trace report still written (empty here: step 1 failed)
        assert (tmp_path / "traces2.jsonl").exists()

    def test_bad_config_value_via_env_is_1(self, tmp_path, monkeypatch):
        monkeypatch.setenv("EXPSTAR_K", "banana")
        code = dispatch([
            "stats",
            "--dataset", str(FIXTURES / "titration.jsonl"),
            "--out", str(tmp_path / "s.json"),
        ])
        assert code == 1


class TestParallelism:
    def test_curate_jobs_2_matches_serial_output(self, tmp_path, monkeypatch):
        monkeypatch.delenv("EXPSTAR_JOBS", raising=False)
        outputs = []
        for jobs in ("1", "2"):
            out = tmp_path / f"dataset_j{jobs}.jsonl"
            code = dispatch([
                "curate",
                "--asr", str(FIXTURES / "titration.jsonl"),
                "--asr", str(FIXTURES / "crystals.jsonl"),
                "--subject", "chemistry",
                "--judge", "mock",
                "--jobs", jobs,
                "--out", str(out),
            ])
            assert code == 0
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]


class _BackendHandler:
    """Shared handler factory for judge/generator endpoint tests."""

    @staticmethod
    def make(reply_builder):
        import http.server

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers["Content-Length"])
                payload = json.loads(self.rfile.read(length))
                body = json.dumps(reply_builder(payload)).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        return Handler


@pytest.fixture
def http_backend():
    import http.server
    import threading

    servers = []

    def start(reply_builder) -> str:
        server = http.server.HTTPServer(
            ("127.0.0.1", 0), _BackendHandler.make(reply_builder)
        )
        threading.Thread(target=server.serve_forever, daemon=True).start()
        servers.append(server)
        return f"http://127.0.0.1:{server.server_port}/"

    yield start
    for server in servers:
        server.shutdown()


class TestRemoteBackends:
    def test_remote_judge_round_trip(self, http_backend):
        from expstar.judging import RemoteJudge

        url = http_backend(lambda payload: {"reply": "4"})
        judge = RemoteJudge(url)
        assert judge.complete("passage-relevance", "Query: x\nDocument: y") == "4"

    def test_remote_judge_bad_payload_is_transport_error(self, http_backend):
        from expstar.errors import TransportError
        from expstar.judging import RemoteJudge

        url = http_backend(lambda payload: {"nope": 1})
        with pytest.raises(TransportError, match="reply"):
            RemoteJudge(url).complete("passage-relevance", "p")

    def test_remote_generator_round_trip(self, http_backend):
        from expstar.generation import GeneratorRequest, RemoteGenerator

        def builder(payload):
            assert payload["phase"] == "procedure"
            return {"text": "remote procedure text"}

        url = http_backend(builder)
        response = RemoteGenerator(url).respond(
            GeneratorRequest(phase="procedure", clip_ref="c", title="t")
        )
        assert response.text == "remote procedure text"

    def test_remote_generator_malformed_response_is_protocol_error(self, http_backend):
        from expstar.errors import ProtocolError
        from expstar.generation import GeneratorRequest, RemoteGenerator

        url = http_backend(lambda payload: {"text": "a", "control": "<RET>"})
        with pytest.raises(ProtocolError, match="exactly one"):
            RemoteGenerator(url).respond(GeneratorRequest(phase="decide", clip_ref="c", title="t"))
