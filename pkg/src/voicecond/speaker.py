"""Speaker embeddings and the four ways of stacking them onto features.

Embeddings are 512-dimensional, L2-normalized after per-speaker averaging.
Two providers exist: `import` looks vectors up in an embedding file, and
`signature` computes voiced-frame statistics projected through a fixed
orthonormal matrix. Extraction is pure and parallel per utterance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import ArtifactError, NoSpeechError, NumericalError, ShapeError
from .frontend import LOG_FLOOR, N_MELS, FeatureMatrix, VadMask
from .seeding import derive_rng

EMBED_DIM = 512
STATS_DIM = 2 * N_MELS  # voiced-frame mean and standard deviation
_EMB_MAGIC = b"EMB1"
_PROJECTION_SEED = 20210527  # fixed: the signature projection is part of the format


@dataclass
class SpeakerEmbedding:
    vector: np.ndarray  # (512,), unit L2 norm
    speaker_id: str
    n_reference_utterances: int
    n_voiced_frames: int

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (EMBED_DIM,):
            raise ShapeError(f"embedding shape {self.vector.shape}, expected ({EMBED_DIM},)")
        norm = np.linalg.norm(self.vector)
        if abs(norm - 1.0) > 1e-6:
            raise ShapeError(f"embedding norm {norm:.8f} not unit for {self.speaker_id!r}")


_VALID_STRATEGIES = {
    ("vertical", "unchanged"),
    ("vertical", "downscale"),
    ("horizontal", "downscale"),
    ("horizontal", "pad-acoustic"),
}

STRATEGY_NAMES = {
    "vertical-unchanged": ("vertical", "unchanged"),
    "vertical-downscale": ("vertical", "downscale"),
    "horizontal-downscale": ("horizontal", "downscale"),
    "horizontal-pad": ("horizontal", "pad-acoustic"),
}


@dataclass(frozen=True)
class StackingStrategy:
    mode: str  # horizontal | vertical
    embedding_handling: str  # downscale | pad-acoustic | unchanged

    def __post_init__(self):
        if (self.mode, self.embedding_handling) not in _VALID_STRATEGIES:
            raise ShapeError(
                f"no such stacking strategy: mode={self.mode!r}, handling={self.embedding_handling!r}"
            )

    @classmethod
    def from_name(cls, name: str) -> "StackingStrategy":
        if name not in STRATEGY_NAMES:
            raise ShapeError(f"unknown strategy {name!r}; choose from {sorted(STRATEGY_NAMES)}")
        return cls(*STRATEGY_NAMES[name])

    @property
    def name(self) -> str:
        for label, combo in STRATEGY_NAMES.items():
            if combo == (self.mode, self.embedding_handling):
                return label
        raise AssertionError

    def input_width(self, d: int = N_MELS, embed_dim: int = EMBED_DIM) -> int:
        """Effective encoder input width d' for feature dimension d."""
        if self.mode == "vertical":
            return d + (embed_dim if self.embedding_handling == "unchanged" else d)
        return d if self.embedding_handling == "downscale" else embed_dim

    @property
    def needs_downscale(self) -> bool:
        return self.embedding_handling == "downscale"

    @property
    def prepends_frame(self) -> bool:
        return self.mode == "horizontal"


@dataclass
class ConditionedInput:
    frames: np.ndarray  # (T', d')
    strategy: StackingStrategy

    @property
    def effective_length(self) -> int:
        return self.frames.shape[0]

    @property
    def effective_width(self) -> int:
        return self.frames.shape[1]


class EmbeddingProvider(Protocol):
    def extract(self, feat: FeatureMatrix, vad: VadMask, utterance_id: str) -> np.ndarray: ...


def signature_projection(seed: int = _PROJECTION_SEED) -> np.ndarray:
    """Seeded 512x160 matrix with orthonormal columns (QR of a Gaussian draw)."""
    rng = derive_rng(seed, "signature-projection")
    gauss = rng.standard_normal((EMBED_DIM, STATS_DIM))
    q, r = np.linalg.qr(gauss)
    # fix the sign convention so the matrix is unique given the seed
    return q * np.sign(np.diag(r))


class SignatureProvider:
    """Voiced-frame mean and standard deviation, projected to 512 dimensions.

    Each statistic block is centered across mel bands before projection:
    every utterance shares a large common level (window leakage reaches all
    bands), and without centering that component swamps cosine comparisons
    between speakers.
    """

    def __init__(self, seed: int = _PROJECTION_SEED):
        self.projection = signature_projection(seed)

    def extract(self, feat: FeatureMatrix, vad: VadMask, utterance_id: str = "") -> np.ndarray:
        if feat.normalized:
            raise ValueError("signature embeddings need unnormalized features")
        voiced = feat.frames[vad.voiced]
        mean = voiced.mean(axis=0)
        std = voiced.std(axis=0)
        stats = np.concatenate([mean - mean.mean(), std - std.mean()])
        return self.projection @ stats


class ImportProvider:
    """Precomputed vectors keyed by utterance-id."""

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = dict(table)

    @classmethod
    def from_file(cls, path) -> "ImportProvider":
        return cls(read_embeddings(path))

    def extract(self, feat: FeatureMatrix, vad: VadMask, utterance_id: str) -> np.ndarray:
        if utterance_id not in self.table:
            raise ArtifactError(f"no imported embedding for utterance {utterance_id!r}")
        return np.asarray(self.table[utterance_id], dtype=np.float64)


def embed_utterance(feat: FeatureMatrix, vad: VadMask, provider: EmbeddingProvider, utterance_id: str = "") -> np.ndarray:
    if not vad.any_voiced:
        raise NoSpeechError(f"utterance {utterance_id!r} has no voiced frames")
    vec = provider.extract(feat, vad, utterance_id)
    if vec.shape != (EMBED_DIM,):
        raise ShapeError(f"provider returned shape {vec.shape}, expected ({EMBED_DIM},)")
    return vec


def average_speaker(
    embeddings: list[np.ndarray],
    speaker_id: str = "",
    n_voiced_frames: int = 0,
) -> SpeakerEmbedding:
    """Arithmetic mean of the reference vectors, then L2 normalization."""
    if not embeddings:
        raise ShapeError(f"no reference embeddings for speaker {speaker_id!r}")
    mean = np.mean(np.stack([np.asarray(e, dtype=np.float64) for e in embeddings]), axis=0)
    norm = np.linalg.norm(mean)
    if norm < 1e-8:
        raise NumericalError(f"mean embedding for {speaker_id!r} is degenerate (norm {norm:.3g})")
    return SpeakerEmbedding(
        vector=mean / norm,
        speaker_id=speaker_id,
        n_reference_utterances=len(embeddings),
        n_voiced_frames=n_voiced_frames,
    )


def stack(
    feat: FeatureMatrix,
    emb: SpeakerEmbedding | np.ndarray,
    strategy: StackingStrategy,
    downscale_weight: np.ndarray | None = None,
) -> ConditionedInput:
    """Combine normalized features with an embedding per the chosen strategy.

    ``downscale_weight`` is the trainable (80, 512) map, owned by the model;
    required exactly when the strategy downscales the embedding.
    """
    if not feat.normalized:
        raise ValueError("stack expects normalized features")
    vector = emb.vector if isinstance(emb, SpeakerEmbedding) else np.asarray(emb, dtype=np.float64)
    if vector.shape != (EMBED_DIM,):
        raise ShapeError(f"embedding shape {vector.shape}, expected ({EMBED_DIM},)")
    X = feat.frames
    T, d = X.shape
    if strategy.needs_downscale:
        if downscale_weight is None:
            raise ShapeError(f"strategy {strategy.name} needs a downscale weight matrix")
        if downscale_weight.shape != (d, EMBED_DIM):
            raise ShapeError(f"downscale weight shape {downscale_weight.shape}, expected ({d}, {EMBED_DIM})")
        scaled = downscale_weight @ vector
    else:
        scaled = None

    if strategy.mode == "vertical":
        e = vector if strategy.embedding_handling == "unchanged" else scaled
        frames = np.concatenate([X, np.tile(e, (T, 1))], axis=1)
    elif strategy.embedding_handling == "downscale":
        frames = np.concatenate([scaled[None, :], X], axis=0)
    else:  # horizontal / pad-acoustic
        padded = np.concatenate([X, np.zeros((T, EMBED_DIM - d))], axis=1)
        frames = np.concatenate([vector[None, :], padded], axis=0)
    return ConditionedInput(frames=frames, strategy=strategy)


# -- embedding files ---------------------------------------------------------------


def write_embeddings(path, table: dict[str, np.ndarray]) -> None:
    """EMB1 container: magic, u32 E, u32 count, then (u32 key length, UTF-8 key,
    E float64) records, little-endian, in key order."""
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<II", EMBED_DIM, len(table)))
        for key in sorted(table):
            vec = np.asarray(table[key], dtype=np.float64)
            if vec.shape != (EMBED_DIM,):
                raise ShapeError(f"embedding {key!r} has shape {vec.shape}, expected ({EMBED_DIM},)")
            raw = key.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(vec.astype("<f8").tobytes())


def read_embeddings(path) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(len(_EMB_MAGIC))
        if magic != _EMB_MAGIC:
            raise ArtifactError(f"{path}: bad magic {magic!r}")
        header = fh.read(8)
        if len(header) != 8:
            raise ArtifactError(f"{path}: truncated header")
        dim, count = struct.unpack("<II", header)
        if dim != EMBED_DIM:
            raise ArtifactError(f"{path}: embedding dim {dim}, expected {EMBED_DIM}")
        for _ in range(count):
            lenraw = fh.read(4)
            if len(lenraw) != 4:
                raise ArtifactError(f"{path}: truncated record header")
            (keylen,) = struct.unpack("<I", lenraw)
            key = fh.read(keylen).decode("utf-8")
            payload = fh.read(dim * 8)
            if len(payload) != dim * 8:
                raise ArtifactError(f"{path}: truncated vector for key {key!r}")
            table[key] = np.frombuffer(payload, dtype="<f8").copy()
    return table
