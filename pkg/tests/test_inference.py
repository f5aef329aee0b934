from __future__ import annotations

import pytest

from conftest import make_clip_embeddings, make_passages
from expstar.domain import Commentary, GenerationContext
from expstar.errors import (
    ContextOverflowError,
    GenerationFormatError,
    ProtocolError,
    ValidationError,
)
from expstar.generation import (
    GeneratorResponse,
    PHASE_FINAL,
    PHASE_JUDGE,
    PHASE_PROCEDURE,
    ScriptedGenerator,
)
from expstar.inference import (
    StepTrace,
    VideoAbortError,
    estimate_tokens,
    run_step,
    run_video,
    trace_to_obj,
    truncate_context,
    write_traces,
)
from expstar.knowledge import FusionMode, build_index, fuse_query, search
from expstar.sequences import ControlToken


def text(t: str) -> GeneratorResponse:
    return GeneratorResponse(text=t)


def control(c: str) -> GeneratorResponse:
    return GeneratorResponse(control=c)


def ctx(clip_id: str = "clip1", preceding=()) -> GenerationContext:
    return GenerationContext(clip_ref=clip_id, title="Flame test", preceding=tuple(preceding))


@pytest.fixture
def index():
    return build_index(make_passages(6, dim=8))


@pytest.fixture
def emb():
    return make_clip_embeddings("clip1")


class TestRunStepNotRet:
    def test_procedure_only_path(self, index, emb):
        gen = ScriptedGenerator([text("Light the burner"), control("<NOT RET>")])
        commentary, trace = run_step(ctx(), gen, index, emb, k=5)
        assert commentary == Commentary("Light the burner")
        assert trace.decision is ControlToken.NOT_RET
        assert trace.candidates == ()
        assert trace.used_passages == ()
        assert not gen.requests_for_phase(PHASE_JUDGE)  # zero judge calls

    def test_sections_after_not_ret_is_protocol_error(self, index, emb):
        gen = ScriptedGenerator(
            [text("Light it <Safety> stand back"), control("<NOT RET>")]
        )
        with pytest.raises(ProtocolError, match="NOT RET"):
            run_step(ctx(), gen, index, emb, k=5)


class TestRunStepRet:
    def script(self, verdicts, final="<Principle> Combustion releases energy"):
        responses = [text("Hold the wire in the flame"), control("<RET>")]
        responses += [control(v) for v in verdicts]
        responses.append(text(final))
        return ScriptedGenerator(responses)

    def test_mixed_verdicts_select_rank_order_subset(self, index, emb):
        gen = self.script(["<REL>", "<NOT REL>", "<REL>", "<NOT REL>", "<NOT REL>"])
        commentary, trace = run_step(ctx(), gen, index, emb, k=5)

        ranked = [r.passage_id for r in search(index, fuse_query(emb, FusionMode.VT), 5)]
        assert [pid for pid, _ in trace.candidates] == ranked
        assert trace.used_passages == (ranked[0], ranked[2])
        assert commentary.principle == "Combustion releases energy"

        final_request = gen.requests_for_phase(PHASE_FINAL)[0]
        assert final_request.passage.startswith("Passage 1: ")
        assert "Passage 2: " in final_request.passage
        assert "Passage 3: " not in final_request.passage
        p1 = index.get(ranked[0])
        p2 = index.get(ranked[2])
        assert final_request.passage.index(p1.text) < final_request.passage.index(p2.text)

    def test_all_not_rel_still_invokes_final_generation(self, index, emb):
        gen = self.script(["<NOT REL>"] * 5, final="<Safety> Wear goggles")
        commentary, trace = run_step(ctx(), gen, index, emb, k=5)
        assert trace.used_passages == ()
        final_request = gen.requests_for_phase(PHASE_FINAL)[0]
        assert final_request.passage == ""
        assert commentary.safety == "Wear goggles"

    def test_judge_calls_bounded_by_index_size(self, emb):
        small = build_index(make_passages(2, dim=8))
        gen = self.script(["<REL>", "<REL>"])
        run_step(ctx(), gen, small, emb, k=5)
        assert len(gen.requests_for_phase(PHASE_JUDGE)) == 2

    def test_empty_final_text_gives_procedure_only(self, index, emb):
        gen = self.script(["<NOT REL>"] * 5, final="")
        commentary, _ = run_step(ctx(), gen, index, emb, k=5)
        assert commentary == Commentary("Hold the wire in the flame")


class TestRunStepErrors:
    def test_unknown_control_is_protocol_error_with_text(self, index, emb):
        gen = ScriptedGenerator([text("proc"), control("<MAYBE RET>")])
        with pytest.raises(ProtocolError) as err:
            run_step(ctx(), gen, index, emb, k=5)
        assert "<MAYBE RET>" in str(err.value)

    def test_text_where_control_expected(self, index, emb):
        gen = ScriptedGenerator([text("proc"), text("<RET>")])
        with pytest.raises(ProtocolError):
            run_step(ctx(), gen, index, emb, k=5)

    def test_unparseable_final_is_generation_format_error(self, index, emb):
        gen = ScriptedGenerator(
            [text("proc"), control("<RET>")]
            + [control("<NOT REL>")] * 5
            + [text("<Oops> bad tag")]
        )
        with pytest.raises(GenerationFormatError) as err:
            run_step(ctx(), gen, index, emb, k=5)
        assert err.value.raw_reply is not None

    def test_nonempty_partial_rejected(self, index, emb):
        bad = GenerationContext(clip_ref="c", title="t", partial=("leftover",))
        with pytest.raises(ValidationError, match="partial"):
            run_step(bad, ScriptedGenerator([]), index, emb, k=5)

    def test_empty_procedure_rejected(self, index, emb):
        gen = ScriptedGenerator([text("   ")])
        with pytest.raises(GenerationFormatError):
            run_step(ctx(), gen, index, emb, k=5)


def three_step_script():
    return ScriptedGenerator(
        [
            text("Step one actions"),
            control("<NOT RET>"),
            text("Step two actions"),
            control("<NOT RET>"),
            text("Step three actions"),
            control("<NOT RET>"),
        ]
    )


class TestRunVideo:
    def embeddings(self, ids):
        return {cid: make_clip_embeddings(cid) for cid in ids}

    def test_three_steps_thread_generated_commentary(self, index):
        ids = ["c1", "c2", "c3"]
        gen = three_step_script()
        outputs = run_video("Flame test", ids, gen, index, self.embeddings(ids), k=5)
        assert len(outputs) == 3
        third_request = gen.requests[4]  # procedure request of step 3
        assert third_request.phase == PHASE_PROCEDURE
        assert third_request.preceding == (
            "<Procedure> Step one actions",
            "<Procedure> Step two actions",
        )

    def test_single_step_video_has_empty_preceding(self, index):
        gen = ScriptedGenerator([text("Only step"), control("<NOT RET>")])
        outputs = run_video("T", ["c1"], gen, index, self.embeddings(["c1"]), k=5)
        assert len(outputs) == 1
        assert gen.requests[0].preceding == ()

    def test_error_at_step_two_keeps_step_one_trace(self, index):
        gen = ScriptedGenerator(
            [
                text("Step one actions"),
                control("<NOT RET>"),
                text("Step two actions"),
                control("<BROKEN>"),
            ]
        )
        ids = ["c1", "c2", "c3"]
        with pytest.raises(VideoAbortError) as err:
            run_video("T", ids, gen, index, self.embeddings(ids), k=5)
        assert err.value.step_index == 2
        assert len(err.value.traces) == 1
        assert err.value.traces[0].clip_id == "c1"
        assert isinstance(err.value.cause, ProtocolError)

    def test_deterministic_rerun_byte_identical(self, index, tmp_path):
        ids = ["c1", "c2", "c3"]
        files = []
        for run in (1, 2):
            outputs = run_video(
                "Flame test", ids, three_step_script(), index, self.embeddings(ids), k=5
            )
            path = tmp_path / f"traces{run}.jsonl"
            write_traces(path, [t for _, t in outputs])
            files.append(path.read_bytes())
        assert files[0] == files[1]

    def test_missing_embeddings_rejected(self, index):
        gen = three_step_script()
        with pytest.raises(ValidationError, match="c2"):
            run_video("T", ["c1", "c2"], gen, index, self.embeddings(["c1"]), k=5)


class TestStepTraceInvariants:
    def test_not_ret_with_candidates_rejected(self):
        with pytest.raises(ValidationError):
            StepTrace(
                clip_id="c",
                procedure="p",
                decision=ControlToken.NOT_RET,
                candidates=(("p1", ControlToken.REL),),
                used_passages=("p1",),
                output=Commentary("p"),
                timings={},
            )

    def test_used_must_match_rel_subset(self):
        with pytest.raises(ValidationError):
            StepTrace(
                clip_id="c",
                procedure="p",
                decision=ControlToken.RET,
                candidates=(("p1", ControlToken.REL), ("p2", ControlToken.NOT_REL)),
                used_passages=("p2",),
                output=Commentary("p"),
                timings={},
            )

    def test_timings_excluded_from_serialized_records_by_default(self):
        trace = StepTrace(
            clip_id="c",
            procedure="p",
            decision=ControlToken.NOT_RET,
            candidates=(),
            used_passages=(),
            output=Commentary("p"),
            timings={"procedure": 0.12},
        )
        assert "timings" not in trace_to_obj(trace)
        assert "timings" in trace_to_obj(trace, include_timings=True)


class TestTruncateContext:
    def make_ctx(self, n_preceding: int) -> GenerationContext:
        preceding = tuple(
            Commentary(f"step {i} does many detailed things with care {i}")
            for i in range(n_preceding)
        )
        return GenerationContext(
            clip_ref="c", title="Long experiment title", preceding=preceding
        )

    def test_under_budget_unchanged(self):
        context = self.make_ctx(2)
        assert truncate_context(context, budget=4096) == context

    def test_drops_oldest_first_preserving_order(self):
        context = self.make_ctx(10)
        scaffold_estimate = estimate_tokens(
            GenerationContext(clip_ref="c", title=context.title)
        )
        one_entry = estimate_tokens(
            GenerationContext(clip_ref="c", title="", preceding=context.preceding[:1])
        )
        budget = scaffold_estimate + one_entry * 3
        trimmed = truncate_context(context, budget)
        assert 0 < len(trimmed.preceding) < 10
        assert trimmed.preceding == context.preceding[-len(trimmed.preceding) :]
        assert estimate_tokens(trimmed) <= budget

    def test_budget_below_scaffold_is_overflow(self):
        context = self.make_ctx(1)
        with pytest.raises(ContextOverflowError):
            truncate_context(context, budget=2)

    def test_never_truncates_mid_commentary(self):
        context = self.make_ctx(5)
        for budget in range(10, 200, 7):
            try:
                trimmed = truncate_context(context, budget)
            except ContextOverflowError:
                continue
            assert all(entry in context.preceding for entry in trimmed.preceding)
