"""Passage knowledge base: embedding normalization, multimodal query fusion,
exact top-K cosine search, and binary index persistence.

Search is flat and exact: embeddings are stored L2-normalized so cosine
similarity is a single matrix-vector product. Ties break by ascending
passage_id for reproducibility.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import ClipEmbeddingSet
from .errors import DegenerateInputError, IndexFormatError, ValidationError
from .fileio import atomic_write_bytes, read_jsonl

INDEX_MAGIC = b"EXPSIDX1"
INDEX_VERSION = 1

# Weighted fusion: the visual query dominates the text query.
VIDEO_WEIGHT = 0.7
TEXT_WEIGHT = 0.3
# Split between title and procedure inside the combined text query (config knob).
DEFAULT_TITLE_SHARE = 0.5


class FusionMode(Enum):
    V = "v"
    VT = "vt"
    VTP = "vtp"


@dataclass(frozen=True)
class Passage:
    passage_id: str
    title: str
    text: str
    embedding: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "embedding", tuple(float(x) for x in self.embedding))
        if not self.text:
            raise ValidationError(f"passage {self.passage_id}: text must be non-empty")
        if not self.embedding:
            raise ValidationError(f"passage {self.passage_id}: embedding must be non-empty")


@dataclass(frozen=True)
class SearchResult:
    passage_id: str
    score: float
    rank: int


def normalize(vector: Sequence[float] | np.ndarray) -> np.ndarray:
    """Return v / ||v||2 as float32; zero vectors are degenerate."""
    arr = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0 or not np.isfinite(norm):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    return (arr / norm).astype(np.float32)


def fuse_query(
    clip: ClipEmbeddingSet,
    mode: FusionMode,
    title_share: float = DEFAULT_TITLE_SHARE,
) -> np.ndarray:
    """Fuse a clip's embeddings into one unit-norm retrieval query.

    V: normalized mean of frame embeddings (q_v).
    VT: normalize(0.7 * q_v + 0.3 * normalized title vector).
    VTP: the text side is the mean of the normalized title and procedure
    vectors, weighted by title_share (default 0.5/0.5).
    """
    frames = np.asarray(clip.frame_embeddings, dtype=np.float64)
    q_v = normalize(frames.mean(axis=0))
    if mode is FusionMode.V:
        return q_v

    q_t = normalize(clip.title_embedding)
    if mode is FusionMode.VT:
        return normalize(VIDEO_WEIGHT * q_v.astype(np.float64) + TEXT_WEIGHT * q_t.astype(np.float64))

    if mode is FusionMode.VTP:
        if clip.procedure_embedding is None:
            raise ValidationError(
                f"clip {clip.clip_id}: fusion mode VTP requires procedure_embedding"
            )
        q_p = normalize(clip.procedure_embedding)
        q_tn = normalize(
            title_share * q_t.astype(np.float64) + (1.0 - title_share) * q_p.astype(np.float64)
        )
        return normalize(VIDEO_WEIGHT * q_v.astype(np.float64) + TEXT_WEIGHT * q_tn.astype(np.float64))

    raise ValidationError(f"unknown fusion mode {mode!r}")


class KnowledgeIndex:
    """Immutable flat index of passages with pre-normalized embeddings."""

    def __init__(self, passages: Sequence[Passage], matrix: np.ndarray):
        self._passages = tuple(passages)
        self._matrix = matrix  # float32, shape (count, dim), rows unit-norm
        self._id_to_pos = {p.passage_id: i for i, p in enumerate(self._passages)}

    @property
    def dimension(self) -> int:
        return int(self._matrix.shape[1])

    @property
    def passages(self) -> tuple[Passage, ...]:
        return self._passages

    @property
    def normalized(self) -> bool:
        return True

    def __len__(self) -> int:
        return len(self._passages)

    def get(self, passage_id: str) -> Passage:
        try:
            return self._passages[self._id_to_pos[passage_id]]
        except KeyError as exc:
            raise ValidationError(f"unknown passage_id {passage_id!r}") from exc

    def checksum(self) -> str:
        return hashlib.sha256(serialize_index(self)).hexdigest()


def build_index(passages: Iterable[Passage]) -> KnowledgeIndex:
    """Normalize raw passage embeddings and assemble a searchable index."""
    ordered = list(passages)
    if not ordered:
        return KnowledgeIndex((), np.zeros((0, 0), dtype=np.float32))
    dim = len(ordered[0].embedding)
    seen: set[str] = set()
    rows = np.empty((len(ordered), dim), dtype=np.float32)
    normalized: list[Passage] = []
    for i, passage in enumerate(ordered):
        if passage.passage_id in seen:
            raise ValidationError(f"duplicate passage_id {passage.passage_id!r}")
        seen.add(passage.passage_id)
        if len(passage.embedding) != dim:
            raise ValidationError(
                f"passage {passage.passage_id}: dimension {len(passage.embedding)} != {dim}"
            )
        try:
            unit = normalize(passage.embedding)
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"passage {passage.passage_id}: {exc}") from exc
        rows[i] = unit
        normalized.append(
            Passage(passage.passage_id, passage.title, passage.text, tuple(float(x) for x in unit))
        )
    return KnowledgeIndex(normalized, rows)


def search(index: KnowledgeIndex, query: Sequence[float] | np.ndarray, k: int) -> list[SearchResult]:
    """Exact top-k by cosine score; ties break by ascending passage_id."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        return []
    q = np.asarray(query, dtype=np.float32)
    if q.shape != (index.dimension,):
        raise ValidationError(
            f"query dimension {q.shape} does not match index dimension {index.dimension}"
        )
    scores = index._matrix @ q
    order = sorted(
        range(len(index)),
        key=lambda i: (-float(scores[i]), index.passages[i].passage_id),
    )
    top = order[: min(k, len(index))]
    return [
        SearchResult(passage_id=index.passages[i].passage_id, score=float(scores[i]), rank=rank)
        for rank, i in enumerate(top, start=1)
    ]


def serialize_index(index: KnowledgeIndex) -> bytes:
    parts = [
        INDEX_MAGIC,
        struct.pack("<I", INDEX_VERSION),
        struct.pack("<I", index.dimension),
        struct.pack("<Q", len(index)),
        struct.pack("<B", 1),
    ]
    for i, passage in enumerate(index.passages):
        for text in (passage.passage_id, passage.title, passage.text):
            raw = text.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        parts.append(index._matrix[i].astype("<f4").tobytes())
    return b"".join(parts)


def save_index(index: KnowledgeIndex, path: str | Path) -> None:
    atomic_write_bytes(path, serialize_index(index))


class _Reader:
    def __init__(self, data: bytes, path: str | Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise IndexFormatError(f"{self.path}: truncated file while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what: str) -> str:
        length = self.u32(f"{what} length")
        try:
            return self.take(length, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise IndexFormatError(f"{self.path}: invalid UTF-8 in {what}") from exc


def load_index(path: str | Path) -> KnowledgeIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    reader = _Reader(data, path)
    magic = reader.take(len(INDEX_MAGIC), "magic")
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic {magic!r}, expected {INDEX_MAGIC!r}")
    version = reader.u32("version")
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{path}: format version {version}, expected {INDEX_VERSION}")
    dim = reader.u32("dimension")
    count = reader.u64("count")
    flag = reader.take(1, "normalization flag")[0]
    if flag != 1:
        raise IndexFormatError(f"{path}: unsupported normalization flag {flag}")

    passages: list[Passage] = []
    matrix = np.empty((count, dim), dtype=np.float32)
    seen: set[str] = set()
    for i in range(count):
        pid = reader.string("passage id")
        title = reader.string("passage title")
        text = reader.string("passage text")
        vec = np.frombuffer(reader.take(4 * dim, "embedding"), dtype="<f4")
        if pid in seen:
            raise IndexFormatError(f"{path}: duplicate passage_id {pid!r}")
        seen.add(pid)
        matrix[i] = vec
        passages.append(Passage(pid, title, text, tuple(float(x) for x in vec)))
    if reader.pos != len(data):
        raise IndexFormatError(f"{path}: {len(data) - reader.pos} trailing bytes after last passage")
    return KnowledgeIndex(passages, matrix)


def load_passages(passages_path: str | Path, embeddings_path: str | Path) -> list[Passage]:
    """Join a {passage_id, title, text} file with its parallel {passage_id, embedding} file."""
    embeddings: dict[str, tuple[float, ...]] = {}
    for lineno, obj in read_jsonl(embeddings_path):
        if not isinstance(obj, dict) or set(obj) != {"passage_id", "embedding"}:
            raise ValidationError(
                f"{embeddings_path}: line {lineno}: expected keys passage_id and embedding"
            )
        embeddings[str(obj["passage_id"])] = tuple(float(x) for x in obj["embedding"])

    passages: list[Passage] = []
    for lineno, obj in read_jsonl(passages_path):
        if not isinstance(obj, dict) or set(obj) != {"passage_id", "title", "text"}:
            raise ValidationError(
                f"{passages_path}: line {lineno}: expected keys passage_id, title, text"
            )
        pid = str(obj["passage_id"])
        if pid not in embeddings:
            raise ValidationError(f"{passages_path}: line {lineno}: no embedding for {pid!r}")
        passages.append(Passage(pid, str(obj["title"]), str(obj["text"]), embeddings[pid]))
    return passages
