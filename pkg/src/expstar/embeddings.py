"""Clip-embedding providers.

Frame and text embedding is computed upstream (or remotely); this artifact
only consumes vectors. The file provider reads line-delimited embedding sets;
the remote provider fetches them per clip over the same JSON shape.
"""

from __future__ import annotations

import hashlib
import json
import urllib.error
import urllib.request
from pathlib import Path
from typing import Iterable, Mapping, Protocol, runtime_checkable

import numpy as np

from .domain import ClipEmbeddingSet
from .errors import TransportError, ValidationError
from .fileio import read_jsonl, write_jsonl

_CLIP_KEYS = {"clip_id", "frame_embeddings", "title_embedding"}
_CLIP_OPTIONAL = {"procedure_embedding"}


@runtime_checkable
class EmbeddingProvider(Protocol):
    def clip_embeddings(self, clip_id: str) -> ClipEmbeddingSet: ...


def _set_from_obj(obj: dict, where: str) -> ClipEmbeddingSet:
    unknown = set(obj) - _CLIP_KEYS - _CLIP_OPTIONAL
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
    missing = _CLIP_KEYS - set(obj)
    if missing:
        raise ValidationError(f"{where}: missing keys {sorted(missing)}")
    return ClipEmbeddingSet(
        clip_id=str(obj["clip_id"]),
        frame_embeddings=tuple(tuple(float(x) for x in v) for v in obj["frame_embeddings"]),
        title_embedding=tuple(float(x) for x in obj["title_embedding"]),
        procedure_embedding=(
            tuple(float(x) for x in obj["procedure_embedding"])
            if obj.get("procedure_embedding") is not None
            else None
        ),
    )


def load_clip_embeddings(path: str | Path) -> dict[str, ClipEmbeddingSet]:
    out: dict[str, ClipEmbeddingSet] = {}
    for lineno, obj in read_jsonl(path):
        if not isinstance(obj, dict):
            raise ValidationError(f"{path}: line {lineno}: expected an object")
        emb = _set_from_obj(obj, f"{path}: line {lineno}")
        if emb.clip_id in out:
            raise ValidationError(f"{path}: line {lineno}: duplicate clip_id {emb.clip_id!r}")
        out[emb.clip_id] = emb
    return out


def save_clip_embeddings(path: str | Path, sets: Iterable[ClipEmbeddingSet]) -> None:
    def to_obj(emb: ClipEmbeddingSet) -> dict:
        obj: dict = {
            "clip_id": emb.clip_id,
            "frame_embeddings": [list(v) for v in emb.frame_embeddings],
            "title_embedding": list(emb.title_embedding),
        }
        if emb.procedure_embedding is not None:
            obj["procedure_embedding"] = list(emb.procedure_embedding)
        return obj

    write_jsonl(path, (to_obj(e) for e in sets))


class FileEmbeddingProvider:
    def __init__(self, sets: Mapping[str, ClipEmbeddingSet]):
        self._sets = dict(sets)

    @classmethod
    def from_file(cls, path: str | Path) -> "FileEmbeddingProvider":
        return cls(load_clip_embeddings(path))

    def clip_embeddings(self, clip_id: str) -> ClipEmbeddingSet:
        try:
            return self._sets[clip_id]
        except KeyError as exc:
            raise ValidationError(f"no embeddings for clip {clip_id!r}") from exc

    def as_mapping(self) -> dict[str, ClipEmbeddingSet]:
        return dict(self._sets)


class RemoteEmbeddingProvider:
    """HTTP provider: POST {clip_id}, expect one embedding-set object."""

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def clip_embeddings(self, clip_id: str) -> ClipEmbeddingSet:
        body = json.dumps({"clip_id": clip_id}).encode("utf-8")
        request = urllib.request.Request(
            self.endpoint, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as response:
                payload = json.loads(response.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise TransportError(f"embedding endpoint {self.endpoint}: {exc}") from exc
        if not isinstance(payload, dict):
            raise TransportError(f"embedding endpoint {self.endpoint}: expected an object")
        return _set_from_obj(payload, self.endpoint)


def synthetic_vector(key: str, dim: int) -> tuple[float, ...]:
    """Deterministic pseudo-embedding for fixtures and tests: seeded by key."""
    seed = int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:4], "big")
    rng = np.random.RandomState(seed)
    vec = rng.normal(size=dim)
    return tuple(float(x) for x in vec / np.linalg.norm(vec))
