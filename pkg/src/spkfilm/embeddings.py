"""Target-speaker embeddings: ATEM file ingestion and a statistics fallback."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import FeatureMatrix
from .errors import ConfigError, DegenerateEmbeddingError, FormatError, InsufficientDataError

EMBEDDING_MAGIC = b"ATEM"
DEFAULT_DIM = 512


@dataclass
class SpeakerEmbedding:
    speaker_id: str
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if v.size == 0 or not np.all(np.isfinite(v)):
            raise FormatError(f"embedding for {self.speaker_id!r} is empty or non-finite")
        self.vector = v

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def write_embedding(path, z: SpeakerEmbedding) -> None:
    v = np.ascontiguousarray(z.vector, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<I", v.size))
        fh.write(v.tobytes())


def load_embedding(path, expected_dim: int | None = None, speaker_id: str | None = None) -> SpeakerEmbedding:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {EMBEDDING_MAGIC!r}")
    (dim,) = struct.unpack("<I", raw[4:8])
    if len(raw) - 8 != 4 * dim:
        raise FormatError(f"{path}: truncated payload, expected {dim} floats")
    if expected_dim is not None and dim != expected_dim:
        raise ConfigError(f"{path}: embedding dimension {dim} does not match configured {expected_dim}")
    vec = np.frombuffer(raw[8:], dtype="<f4").astype(np.float32)
    return SpeakerEmbedding(speaker_id if speaker_id is not None else Path(path).stem, vec)


def normalize_embedding(z: SpeakerEmbedding) -> SpeakerEmbedding:
    v = z.vector.astype(np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise DegenerateEmbeddingError(f"embedding for {z.speaker_id!r} is the zero vector")
    return SpeakerEmbedding(z.speaker_id, v / norm)


def projection_matrix(in_dim: int, out_dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)


def stats_embedding(
    enrollment: list[FeatureMatrix], dim: int = DEFAULT_DIM, seed: int = 0, speaker_id: str = ""
) -> SpeakerEmbedding:
    """Mean and standard deviation over all enrollment frames, randomly projected to ``dim``.

    The projection is fixed by ``seed`` so every speaker shares it.
    """
    if not enrollment:
        raise InsufficientDataError("no enrollment features given")
    frames = np.concatenate([np.asarray(f.data, dtype=np.float64) for f in enrollment], axis=0)
    if frames.shape[0] < 2:
        raise InsufficientDataError(f"need at least 2 enrollment frames, got {frames.shape[0]}")
    stats = np.concatenate([frames.mean(axis=0), frames.std(axis=0)])
    return SpeakerEmbedding(speaker_id, projection_matrix(stats.size, dim, seed) @ stats)


def read_embedding_manifest(path, expected_dim: int | None = None, normalize: bool = True) -> dict[str, SpeakerEmbedding]:
    """Parse ``speaker_id<TAB>path`` lines into a speaker -> embedding map."""
    path = Path(path)
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 2:
            raise FormatError(f"{path}:{lineno}: expected 2 tab-separated columns")
        z = load_embedding(path.parent / cols[1], expected_dim, speaker_id=cols[0])
        out[cols[0]] = normalize_embedding(z) if normalize else z
    return out


def write_embedding_manifest(path, paths: dict[str, Path]) -> None:
    base = Path(path).parent
    lines = []
    for spk, p in paths.items():
        try:
            rel = str(Path(p).resolve().relative_to(base.resolve()))
        except ValueError:
            rel = str(p)
        lines.append(f"{spk}\t{rel}")
    Path(path).write_text("\n".join(lines) + "\n")


def cosine_similarity(a: SpeakerEmbedding, b: SpeakerEmbedding) -> float:
    x, y = a.vector.astype(np.float64), b.vector.astype(np.float64)
    return float(x @ y / (np.linalg.norm(x) * np.linalg.norm(y)))
