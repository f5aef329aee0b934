"""Pipeline configuration with flag > env > file > default precedence.

Env vars use the ``EXPSTAR_`` prefix (EXPSTAR_K, EXPSTAR_TOP_P, ...). The
config file is plain ``key = value`` lines with ``#`` comments. The resolved
config is echoed into every output manifest.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping

from .errors import ValidationError
from .knowledge import FusionMode

ENV_PREFIX = "EXPSTAR_"


def _parse_int(minimum: int) -> Callable[[str | int], int]:
    def cast(value: str | int) -> int:
        try:
            number = int(value)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"expected an integer, got {value!r}") from exc
        if number < minimum:
            raise ValueError(f"must be >= {minimum}, got {number}")
        return number

    return cast


def _parse_fraction(low_exclusive: bool) -> Callable[[str | float], float]:
    def cast(value: str | float) -> float:
        try:
            number = float(value)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"expected a real number, got {value!r}") from exc
        if low_exclusive and not 0.0 < number <= 1.0:
            raise ValueError(f"must be in (0, 1], got {number}")
        if not low_exclusive and not 0.0 <= number <= 1.0:
            raise ValueError(f"must be in [0, 1], got {number}")
        return number

    return cast


def _parse_fusion(value: str | FusionMode) -> FusionMode:
    if isinstance(value, FusionMode):
        return value
    try:
        return FusionMode(str(value).lower())
    except ValueError as exc:
        raise ValueError(
            f"expected one of {[m.value for m in FusionMode]}, got {value!r}"
        ) from exc


def _parse_str(value: object) -> str:
    return str(value)


# key -> (caster, default)
_CONFIG_SPEC: dict[str, tuple[Callable, object]] = {
    "k": (_parse_int(1), 5),
    "fusion": (_parse_fusion, FusionMode.VT),
    "title_share": (_parse_fraction(low_exclusive=False), 0.5),
    "top_p": (_parse_fraction(low_exclusive=True), 0.9),
    "L": (_parse_int(2), 8),
    "sim_threshold": (_parse_fraction(low_exclusive=False), 0.3),
    "seed": (int, 0),
    "jobs": (_parse_int(1), 1),
    "judge": (_parse_str, "mock"),
    "generator": (_parse_str, ""),
    "embedder": (_parse_str, "file"),
    "meteor_scorer": (_parse_str, ""),
    "bertscore_scorer": (_parse_str, ""),
}


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 5
    fusion: FusionMode = FusionMode.VT
    title_share: float = 0.5
    top_p: float = 0.9
    L: int = 8
    sim_threshold: float = 0.3
    seed: int = 0
    jobs: int = 1
    judge: str = "mock"
    generator: str = ""
    embedder: str = "file"
    meteor_scorer: str = ""
    bertscore_scorer: str = ""

    def to_obj(self) -> dict:
        return {
            "k": self.k,
            "fusion": self.fusion.value,
            "title_share": self.title_share,
            "top_p": self.top_p,
            "L": self.L,
            "sim_threshold": self.sim_threshold,
            "seed": self.seed,
            "jobs": self.jobs,
            "judge": self.judge,
            "generator": self.generator,
            "embedder": self.embedder,
            "meteor_scorer": self.meteor_scorer,
            "bertscore_scorer": self.bertscore_scorer,
        }


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValidationError(f"{path}: line {lineno}: expected 'key = value'")
            key = key.strip()
            if key not in _CONFIG_SPEC:
                raise ValidationError(f"{path}: line {lineno}: unknown config key {key!r}")
            values[key] = value.strip()
    return values


def resolve_config(
    flags: Mapping[str, object] | None = None,
    env: Mapping[str, str] | None = None,
    file_path: str | Path | None = None,
) -> PipelineConfig:
    """Merge the three sources, validating each value against its key's type."""
    flags = flags or {}
    env = env or {}
    file_values = parse_config_file(file_path) if file_path else {}

    resolved: dict[str, object] = {}
    for key, (cast, default) in _CONFIG_SPEC.items():
        sources = (
            ("flag", flags.get(key)),
            ("env", env.get(ENV_PREFIX + key.upper())),
            ("config file", file_values.get(key)),
        )
        value, source = default, "default"
        for candidate_source, candidate in sources:
            if candidate is not None:
                value, source = candidate, candidate_source
                break
        try:
            resolved[key] = cast(value) if source != "default" else default
        except ValueError as exc:
            raise ValidationError(f"config key {key!r} from {source}: {exc}") from exc
    return PipelineConfig(**resolved)  # type: ignore[arg-type]


def derive_seed(root_seed: int, stage: str) -> int:
    """One root seed fans out to stable per-stage seeds."""
    digest = hashlib.sha256(f"{root_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")
