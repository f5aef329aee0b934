"""Generator clients behind the phase-explicit wire contract.

Every call is a request/response exchange with a ``phase`` field so the
control protocol stays auditable and mockable:

* ``procedure`` and ``final`` return {text}
* ``decide`` returns {control: "<RET>"|"<NOT RET>"}
* ``judge`` returns {control: "<REL>"|"<NOT REL>"}
* ``sample`` returns {candidates: [...]} (top-p candidate drawing)

The scripted mock replays a line-delimited script of response objects in
order and records every request it saw.
"""

from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, runtime_checkable

from .errors import ProtocolError, TransportError
from .fileio import read_jsonl

PHASE_PROCEDURE = "procedure"
PHASE_DECIDE = "decide"
PHASE_JUDGE = "judge"
PHASE_FINAL = "final"
PHASE_SAMPLE = "sample"


@dataclass(frozen=True)
class GeneratorRequest:
    phase: str
    clip_ref: str
    title: str
    preceding: tuple[str, ...] = ()
    partial: tuple[str, ...] = ()
    passage: str | None = None
    top_p: float | None = None
    count: int | None = None

    def to_obj(self) -> dict:
        obj: dict = {
            "phase": self.phase,
            "clip_ref": self.clip_ref,
            "title": self.title,
            "preceding": list(self.preceding),
            "partial": list(self.partial),
        }
        if self.passage is not None:
            obj["passage"] = self.passage
        if self.top_p is not None:
            obj["top_p"] = self.top_p
        if self.count is not None:
            obj["count"] = self.count
        return obj


@dataclass(frozen=True)
class GeneratorResponse:
    text: str | None = None
    control: str | None = None
    candidates: tuple[str, ...] | None = None

    @classmethod
    def from_obj(cls, obj: object) -> "GeneratorResponse":
        if not isinstance(obj, dict):
            raise ProtocolError(f"generator response must be an object, got {type(obj).__name__}")
        known = {"text", "control", "candidates"}
        present = known & set(obj)
        if len(present) != 1 or set(obj) - known:
            raise ProtocolError(
                f"generator response must carry exactly one of {sorted(known)}",
                raw_reply=json.dumps(obj),
            )
        if "candidates" in obj:
            return cls(candidates=tuple(str(c) for c in obj["candidates"]))
        if "control" in obj:
            return cls(control=str(obj["control"]))
        return cls(text=str(obj["text"]))


@runtime_checkable
class GeneratorClient(Protocol):
    generator_id: str
    concurrency: int

    def respond(self, request: GeneratorRequest) -> GeneratorResponse: ...


class ScriptedGenerator:
    """Replays a fixed script of responses; deterministic by construction."""

    def __init__(self, responses: Iterable[GeneratorResponse], generator_id: str = "scripted"):
        self._responses = list(responses)
        self._pos = 0
        self._lock = threading.Lock()
        self.generator_id = generator_id
        self.concurrency = 1
        self.requests: list[GeneratorRequest] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedGenerator":
        responses = [GeneratorResponse.from_obj(obj) for _, obj in read_jsonl(path)]
        return cls(responses, generator_id=f"scripted:{Path(path).name}")

    def respond(self, request: GeneratorRequest) -> GeneratorResponse:
        with self._lock:
            self.requests.append(request)
            if self._pos >= len(self._responses):
                raise TransportError(
                    f"generator script exhausted after {len(self._responses)} responses"
                )
            response = self._responses[self._pos]
            self._pos += 1
            return response

    def requests_for_phase(self, phase: str) -> list[GeneratorRequest]:
        return [r for r in self.requests if r.phase == phase]


class RemoteGenerator:
    """HTTP generator: POST the request object, expect one response object."""

    def __init__(self, endpoint: str, generator_id: str | None = None, timeout: float = 60.0):
        self.endpoint = endpoint
        self.generator_id = generator_id or f"remote:{endpoint}"
        self.concurrency = 1
        self.timeout = timeout

    def respond(self, request: GeneratorRequest) -> GeneratorResponse:
        body = json.dumps(request.to_obj()).encode("utf-8")
        http_request = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(http_request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TransportError(f"generator endpoint {self.endpoint}: {exc}") from exc
        return GeneratorResponse.from_obj(payload)


def expect_text(response: GeneratorResponse, phase: str) -> str:
    if response.text is None:
        raise ProtocolError(
            f"phase {phase!r} requires a text response",
            raw_reply=repr(response),
        )
    return response.text


def expect_control(response: GeneratorResponse, phase: str, allowed: tuple[str, ...]) -> str:
    if response.control is None:
        raise ProtocolError(
            f"phase {phase!r} requires a control response", raw_reply=repr(response)
        )
    if response.control not in allowed:
        raise ProtocolError(
            f"phase {phase!r} got unknown control {response.control!r}, "
            f"expected one of {list(allowed)}",
            raw_reply=response.control,
        )
    return response.control


def expect_candidates(response: GeneratorResponse, count: int) -> tuple[str, ...]:
    if response.candidates is None:
        raise ProtocolError("sample phase requires a candidates response", raw_reply=repr(response))
    if len(response.candidates) != count:
        raise ProtocolError(
            f"sample phase returned {len(response.candidates)} candidates, expected {count}"
        )
    return response.candidates
