"""Judge clients: the transport interface plus scripted, rule-based, and
remote implementations.

A judge answers one prompt at a time. ``template_id`` names the stage so
mocks and remote services can dispatch without sniffing prompt text. Each
client declares ``concurrency``, the number of in-flight calls it tolerates;
callers must serialize access when it is 1.
"""

from __future__ import annotations

import json
import re
import threading
import urllib.error
import urllib.request
from typing import Iterable, Protocol, runtime_checkable

from . import prompts
from .errors import TransportError

_WORD_RE = re.compile(r"[\w]+", re.UNICODE)


@runtime_checkable
class JudgeClient(Protocol):
    judge_id: str
    concurrency: int

    def complete(self, template_id: str, prompt: str) -> str: ...


class ScriptedJudge:
    """Replays canned replies in order; the workhorse of the test suite."""

    judge_id = "scripted"

    def __init__(self, replies: Iterable[str], judge_id: str = "scripted"):
        self._replies = list(replies)
        self._pos = 0
        self._lock = threading.Lock()
        self.judge_id = judge_id
        self.concurrency = 1
        self.prompts: list[tuple[str, str]] = []

    def complete(self, template_id: str, prompt: str) -> str:
        with self._lock:
            self.prompts.append((template_id, prompt))
            if self._pos >= len(self._replies):
                raise TransportError(
                    f"scripted judge exhausted after {len(self._replies)} replies"
                )
            reply = self._replies[self._pos]
            self._pos += 1
            return reply


def _tokens(text: str) -> set[str]:
    return {t.lower() for t in _WORD_RE.findall(text) if len(t) > 2}


# Keyword-triggered annotations for the deterministic mock judge. First match wins.
_SAFETY_RULES: tuple[tuple[tuple[str, ...], str], ...] = (
    (("acid", "alkali", "corrosive"), "Wear goggles and acid-resistant gloves when handling corrosive solutions."),
    (("heat", "flame", "burner", "boil"), "Point the tube opening away from people while heating."),
    (("electric", "voltage", "current", "circuit"), "Disconnect the power supply before changing any connection."),
    (("blade", "scalpel", "cut"), "Cut away from your body and keep fingers clear of the blade."),
    (("glass", "pipette", "burette"), "Inspect glassware for chips or cracks before use."),
)

_PRINCIPLE_RULES: tuple[tuple[tuple[str, ...], str], ...] = (
    (("titration", "titrate", "indicator", "endpoint"), "At the equivalence point the moles of acid equal the moles of base."),
    (("dissolve", "solution", "solute"), "Ionic solids dissociate into hydrated ions in aqueous solution."),
    (("heat", "boil", "temperature"), "Heating raises particle kinetic energy and accelerates the reaction."),
    (("filter", "filtrate", "residue"), "Filtration separates an insoluble solid from a liquid by particle size."),
    (("circuit", "resistance", "voltage"), "Ohm's law relates voltage, current and resistance: V = I * R."),
)

_SEGMENT_WORD_BUDGET = 14


class RuleBasedJudge:
    """Deterministic, dependency-free stand-in for a remote judge model.

    Correction echoes its input; segmentation packs consecutive fragments
    into steps by word budget; annotation fires on keyword tables; relevance
    scores by lexical overlap. Pure functions of the prompt, so reruns are
    byte-identical.
    """

    judge_id = "rule-based-mock"
    concurrency = 8  # stateless and pure

    def complete(self, template_id: str, prompt: str) -> str:
        if template_id == prompts.ASR_CORRECTION:
            return prompts.extract_payload(prompt)
        if template_id == prompts.STEP_SEGMENTATION:
            return self._segment(json.loads(prompts.extract_payload(prompt)))
        if template_id == prompts.ANNOTATION:
            return self._annotate(json.loads(prompts.extract_payload(prompt)))
        if template_id == prompts.RELEVANCE:
            query, document = prompts.extract_query_document(prompt)
            return str(self._relevance_score(query, document))
        raise TransportError(f"rule-based judge has no handler for template {template_id!r}")

    @staticmethod
    def _segment(items: list[dict]) -> str:
        steps: list[dict] = []
        group: list[dict] = []
        words = 0
        for item in items:
            group.append(item)
            words += len(str(item.get("text", "")).split())
            if words >= _SEGMENT_WORD_BUDGET:
                steps.append(group)
                group, words = [], 0
        if group:
            steps.append(group)
        reply = {
            "summary": " ".join(str(g[0].get("text", "")) for g in steps)[:160],
            "steps": [
                {
                    "step": i,
                    "procedure": " ".join(str(item.get("text", "")).strip() for item in g),
                    "ASR_id": [int(item["id"]) for item in g],
                }
                for i, g in enumerate(steps, start=1)
            ],
        }
        return json.dumps(reply, sort_keys=True)

    @staticmethod
    def _annotate(items: list[dict]) -> str:
        annotated = []
        for item in items:
            new_item = dict(item)
            text_tokens = _tokens(str(item.get("text", "")))
            for keywords, guidance in _SAFETY_RULES:
                if any(k in text_tokens for k in keywords):
                    new_item["safety"] = guidance
                    break
            for keywords, principle in _PRINCIPLE_RULES:
                if any(k in text_tokens for k in keywords):
                    new_item["principle"] = principle
                    break
            annotated.append(new_item)
        return json.dumps(annotated, sort_keys=True)

    @staticmethod
    def _relevance_score(query: str, document: str) -> int:
        overlap = len(_tokens(query) & _tokens(document))
        if overlap >= 5:
            return 5
        if overlap == 0:
            return 1
        return min(4, overlap + 1)


class RemoteJudge:
    """HTTP judge: POST {template_id, prompt} to the endpoint, expect {reply}."""

    def __init__(self, endpoint: str, judge_id: str | None = None, timeout: float = 30.0):
        self.endpoint = endpoint
        self.judge_id = judge_id or f"remote:{endpoint}"
        self.concurrency = 1
        self.timeout = timeout

    def complete(self, template_id: str, prompt: str) -> str:
        body = json.dumps({"template_id": template_id, "prompt": prompt}).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TransportError(f"judge endpoint {self.endpoint}: {exc}") from exc
        if not isinstance(payload, dict) or "reply" not in payload:
            raise TransportError(f"judge endpoint {self.endpoint}: response lacks 'reply'")
        return str(payload["reply"])
