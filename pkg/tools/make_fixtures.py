"""Regenerate the shipped fixtures under fixtures/.

The clip-embedding file and the scripted generator must stay aligned with
what the rule-based mock judge produces from the ASR transcripts, so this
script runs the curation pipeline and derives everything else from its
output. Rerun after changing the mock judge heuristics:

    python3 tools/make_fixtures.py
"""

from __future__ import annotations

import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

import numpy as np

from expstar.curation import VideoMeta, curate_video, load_asr
from expstar.domain import Discipline, render_sections
from expstar.embeddings import synthetic_vector
from expstar.fileio import write_jsonl
from expstar.judging import RuleBasedJudge

FIXTURES = ROOT / "fixtures"
DIM = 16
K = 5

TITRATION_SEGMENTS = [
    "first gather all the equipment you will need today",
    "arrange everything neatly on the workbench before you begin",
    "rinse the burette with distilled water before starting",
    "then fill it carefully with the sodium hydroxide up to the mark",
    "measure twenty five millilitres of dilute acid",
    "transfer it into the clean conical flask without splashing",
    "note down the starting value in your table",
    "remember to write the units next to every entry",
    "run liquid from the tap slowly while swirling",
    "stop at the endpoint when one drop changes the colour for good",
]

CRYSTALS_SEGMENTS = [
    "heat the copper sulfate gently until crystals appear",
    "keep the flame low so nothing spits out",
    "leave the dish aside to cool down on its own",
    "once ready compare your crystals with the picture in the manual",
    "filter the leftover mixture through the paper cone",
    "collect the clear filtrate in the small beaker below",
]

PASSAGES = [
    ("burette", "Burette", "A burette is a graduated glass tube with a tap used to deliver known volumes of liquid, especially in titrations. Rinse the burette with the solution it will hold before filling."),
    ("titration", "Titration", "Titration is a technique where a solution of known concentration reacts with a measured volume of another solution until the endpoint is reached, often shown by an indicator colour change."),
    ("sodium-hydroxide", "Sodium hydroxide", "Sodium hydroxide is a corrosive alkali that dissolves readily in water. Solutions must be handled with gloves and eye protection."),
    ("sulfuric-acid", "Sulfuric acid", "Sulfuric acid is a strong mineral acid. Dilute acid still attacks skin and clothing, so goggles and gloves are required when transferring it."),
    ("indicator", "pH indicator", "A pH indicator is a compound that changes colour at a particular point as acid reacts with alkali, marking the endpoint of a titration."),
    ("copper-sulfate", "Copper sulfate", "Copper sulfate forms blue crystals containing water of crystallisation. Heating the solution drives off water until crystals appear on cooling."),
    ("crystallisation", "Crystallisation", "Crystallisation separates a dissolved solid from solution by evaporating the solvent until the solute comes out of solution as crystals."),
    ("filtration", "Filtration", "Filtration separates an insoluble solid from a liquid by passing the mixture through paper; the liquid that passes through is the filtrate and the solid is the residue."),
    ("lab-safety", "Laboratory safety", "General laboratory safety includes wearing goggles, tying back hair, and never pointing heated containers at people."),
    ("bunsen-burner", "Bunsen burner", "A Bunsen burner produces an adjustable flame for heating. Use a low blue flame for gentle heating and never leave a lit burner unattended."),
    ("conical-flask", "Conical flask", "A conical flask has sloping sides that allow swirling without splashing, which makes it the usual receiving vessel in a titration."),
    ("distilled-water", "Distilled water", "Distilled water is water purified by evaporation and condensation, used to rinse glassware so no stray ions change the concentration of solutions."),
]


def write_asr(path: Path, texts: list[str]) -> None:
    rows = []
    for i, text in enumerate(texts, start=1):
        start = (i - 1) * 6.0
        rows.append({"id": i, "startTime": start, "endTime": start + 5.5, "text": text})
    write_jsonl(path, rows)


def keyword_overlap(a: str, b: str) -> int:
    tok = lambda s: {w.lower() for w in s.split() if len(w) > 3}
    return len(tok(a) & tok(b))


def main() -> None:
    FIXTURES.mkdir(exist_ok=True)
    write_asr(FIXTURES / "titration.jsonl", TITRATION_SEGMENTS)
    write_asr(FIXTURES / "crystals.jsonl", CRYSTALS_SEGMENTS)

    write_jsonl(
        FIXTURES / "passages.jsonl",
        [{"passage_id": pid, "title": title, "text": text} for pid, title, text in PASSAGES],
    )
    passage_vectors = {pid: synthetic_vector(f"passage/{pid}", DIM) for pid, _, _ in PASSAGES}
    write_jsonl(
        FIXTURES / "passage_embeddings.jsonl",
        [{"passage_id": pid, "embedding": list(vec)} for pid, vec in passage_vectors.items()],
    )

    # Curate exactly as the CLI will, to learn clip ids and step structure.
    judge = RuleBasedJudge()
    videos = []
    for name in ("titration", "crystals"):
        segments = load_asr(FIXTURES / f"{name}.jsonl")
        meta = VideoMeta(name, name, "chemistry", Discipline.SCIENCE)
        videos.append(curate_video(segments, judge, "chemistry", meta))

    clip_rows = []
    script_rows = []
    for records in videos:
        for record in records:
            # Bias clip frames toward the lexically closest passage so
            # retrieval ranks look sensible.
            best = max(
                PASSAGES, key=lambda p: keyword_overlap(record.procedure, p[1] + " " + p[2])
            )
            anchor = np.array(passage_vectors[best[0]])
            frames = []
            for j in range(3):
                noise = np.array(synthetic_vector(f"{record.clip_id}/frame{j}", DIM))
                vec = 0.75 * anchor + 0.25 * noise
                frames.append(list(vec / np.linalg.norm(vec)))
            clip_rows.append(
                {
                    "clip_id": record.clip_id,
                    "frame_embeddings": frames,
                    "title_embedding": list(synthetic_vector(f"title/{record.title}", DIM)),
                    "procedure_embedding": list(
                        synthetic_vector(f"proc/{record.clip_id}", DIM)
                    ),
                }
            )

            script_rows.append({"text": record.procedure})
            if record.has_knowledge_sections:
                script_rows.append({"control": "<RET>"})
                verdicts = ["<REL>", "<NOT REL>", "<REL>", "<NOT REL>", "<NOT REL>"]
                script_rows.extend({"control": v} for v in verdicts[:K])
                script_rows.append({"text": render_sections(record.principle, record.safety)})
            else:
                script_rows.append({"control": "<NOT RET>"})

    write_jsonl(FIXTURES / "clip_embeddings.jsonl", clip_rows)
    write_jsonl(FIXTURES / "generator_script.jsonl", script_rows)

    # Sampler script for preference-pair construction: 4 candidates per
    # safety-bearing step (2 pass, 2 fail), consumed in dataset order.
    dpo_rows = []
    for records in videos:
        for record in records:
            if record.safety is None:
                continue
            words = record.safety.split()
            near_miss = " ".join(words[: max(2, len(words) // 2)])
            dpo_rows.append(
                {
                    "candidates": [
                        f"<Procedure> {record.procedure} <Safety> {record.safety}",
                        f"<Procedure> {record.procedure}",
                        f"<Procedure> {record.procedure} <Safety> check the manual twice",
                        f"<Procedure> {record.procedure} <Safety> {near_miss}",
                    ]
                }
            )
    write_jsonl(FIXTURES / "dpo_sampler_script.jsonl", dpo_rows)

    knowledge = sum(1 for records in videos for r in records if r.has_knowledge_sections)
    total = sum(len(records) for records in videos)
    print(f"fixtures written: {total} clips, {knowledge} knowledge-bearing, k={K}")
    for records in videos:
        for record in records:
            marks = "".join(
                tag for tag, present in (("P", record.principle), ("S", record.safety)) if present
            )
            print(f"  {record.clip_id}: {marks or '-'} | {record.procedure[:60]}")


if __name__ == "__main__":
    main()
