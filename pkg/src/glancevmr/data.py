"""Dataset ingestion: annotations, feature matrices, word vectors, glance
re-annotation, and the seeded synthetic benchmark generator.

Annotation files are JSON Lines (one example per line). Video features are
a small binary format (see FEATURE_MAGIC) holding one L_v x d_feat float32
matrix plus the video duration in seconds. Word vectors are plain
whitespace-separated text, compatible with publicly distributed pretrained
embedding files.
"""

from __future__ import annotations

import json
import string
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import ValidationError, check_feature_matrix

FEATURE_MAGIC = b"VGF1"
_FEATURE_HEADER = struct.Struct("<4sIId")  # magic, L_v, d_feat, duration


class AnnotationError(ValidationError):
    """A JSON Lines annotation file is malformed or violates an invariant."""


class FeatureFileError(ValidationError):
    """A feature file cannot be decoded."""


class BadMagicError(FeatureFileError):
    """Feature file does not start with the expected magic bytes."""


class TruncatedFileError(FeatureFileError):
    """Feature file is shorter than its header promises."""


class NonFiniteError(FeatureFileError):
    """Feature payload contains NaN or infinity."""


class WordVectorError(ValidationError):
    """A word-vector text file is malformed."""


@dataclass
class FullAnnotation:
    """One fully supervised example: moment boundaries in seconds."""

    video_id: str
    query: str
    start: float
    end: float
    duration: float

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise ValidationError(f"{self.video_id}: query is empty")
        if not 0 <= self.start <= self.end <= self.duration:
            raise ValidationError(
                f"{self.video_id}: need 0 <= start <= end <= duration, got "
                f"start={self.start}, end={self.end}, duration={self.duration}"
            )

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "query": self.query,
            "start": self.start,
            "end": self.end,
            "duration": self.duration,
        }


@dataclass
class GlanceAnnotation:
    """One glance-supervised example: a single timestamp inside the moment.

    eval_start/eval_end are the held-out full boundaries; they exist only so
    evaluation can score predictions and must never feed training.
    """

    video_id: str
    query: str
    glance: float
    duration: float
    eval_start: float | None = None
    eval_end: float | None = None

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise ValidationError(f"{self.video_id}: query is empty")
        if not 0 <= self.glance <= self.duration:
            raise ValidationError(
                f"{self.video_id}: glance {self.glance} outside [0, {self.duration}]"
            )
        if (self.eval_start is None) != (self.eval_end is None):
            raise ValidationError(
                f"{self.video_id}: eval_start and eval_end must be given together"
            )
        if self.eval_start is not None and self.eval_end is not None:
            if not self.eval_start <= self.glance <= self.eval_end:
                raise ValidationError(
                    f"{self.video_id}: glance {self.glance} outside eval bounds "
                    f"[{self.eval_start}, {self.eval_end}]"
                )

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "query": self.query,
            "glance": self.glance,
            "eval_start": self.eval_start,
            "eval_end": self.eval_end,
            "duration": self.duration,
        }


@dataclass
class VideoFeatures:
    """Precomputed per-frame features for one video."""

    video_id: str
    features: np.ndarray  # L_v x d_feat, float32
    duration: float

    def __post_init__(self) -> None:
        check_feature_matrix(f"{self.video_id}: features", self.features)
        if not self.duration > 0:
            raise ValidationError(f"{self.video_id}: duration must be > 0")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class QueryTokens:
    """A tokenized query with per-token embedding rows."""

    tokens: list[str]
    embeddings: np.ndarray  # L_q x d_word

    def __post_init__(self) -> None:
        if len(self.tokens) < 1:
            raise ValidationError("query has no tokens")
        if self.embeddings.shape[0] != len(self.tokens):
            raise ValidationError("embeddings row count != token count")
        check_feature_matrix("query embeddings", self.embeddings)


@dataclass
class WordVectorTable:
    """token -> vector lookup with a fixed dimension; OOV maps to zeros."""

    dimension: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)

    def lookup(self, token: str) -> np.ndarray:
        vec = self.entries.get(token)
        if vec is None:
            return np.zeros(self.dimension, dtype=np.float32)
        return vec


def load_annotations(
    path: str | Path, kind: str
) -> list[FullAnnotation] | list[GlanceAnnotation]:
    """Read a JSON Lines annotation file.

    kind is "full" (start/end schema) or "glance" (single-timestamp schema).
    Raises AnnotationError naming the 1-based line of the first bad record.
    """
    if kind not in ("full", "glance"):
        raise ValueError(f"kind must be 'full' or 'glance', got {kind!r}")
    out: list = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            try:
                if kind == "full":
                    out.append(
                        FullAnnotation(
                            video_id=str(raw["video_id"]),
                            query=str(raw["query"]),
                            start=float(raw["start"]),
                            end=float(raw["end"]),
                            duration=float(raw["duration"]),
                        )
                    )
                else:
                    out.append(
                        GlanceAnnotation(
                            video_id=str(raw["video_id"]),
                            query=str(raw["query"]),
                            glance=float(raw["glance"]),
                            duration=float(raw["duration"]),
                            eval_start=_opt_float(raw.get("eval_start")),
                            eval_end=_opt_float(raw.get("eval_end")),
                        )
                    )
            except (KeyError, TypeError) as exc:
                raise AnnotationError(f"{path}: line {lineno}: bad record: {exc!r}") from exc
            except ValidationError as exc:
                raise AnnotationError(f"{path}: line {lineno}: {exc}") from exc
    return out


def save_annotations(
    path: str | Path, annotations: list[FullAnnotation] | list[GlanceAnnotation]
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in annotations:
            fh.write(json.dumps(ann.to_json()) + "\n")


def _opt_float(value) -> float | None:
    return None if value is None else float(value)


def sample_glance(ann: FullAnnotation, rng: np.random.Generator) -> GlanceAnnotation:
    """Draw a glance uniformly from [start, end], keeping the boundaries as
    evaluation-only fields."""
    glance = float(rng.uniform(ann.start, ann.end)) if ann.end > ann.start else ann.start
    return GlanceAnnotation(
        video_id=ann.video_id,
        query=ann.query,
        glance=glance,
        duration=ann.duration,
        eval_start=ann.start,
        eval_end=ann.end,
    )


def reannotate(
    annotations: list[FullAnnotation], rng: np.random.Generator
) -> list[GlanceAnnotation]:
    return [sample_glance(ann, rng) for ann in annotations]


def save_features(path: str | Path, vf: VideoFeatures) -> None:
    n_frames, d_feat = vf.features.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, n_frames, d_feat, vf.duration))
        fh.write(np.ascontiguousarray(vf.features, dtype="<f4").tobytes())


def load_features(path: str | Path, video_id: str | None = None) -> VideoFeatures:
    """Read one feature file; the video id defaults to the file stem."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _FEATURE_HEADER.size:
        if blob[:4] != FEATURE_MAGIC:
            raise BadMagicError(f"{path}: not a feature file")
        raise TruncatedFileError(f"{path}: incomplete header")
    magic, n_frames, d_feat, duration = _FEATURE_HEADER.unpack_from(blob)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    expected = _FEATURE_HEADER.size + 4 * n_frames * d_feat
    if len(blob) < expected:
        raise TruncatedFileError(
            f"{path}: payload has {len(blob) - _FEATURE_HEADER.size} bytes, "
            f"expected {expected - _FEATURE_HEADER.size}"
        )
    if len(blob) > expected:
        raise FeatureFileError(f"{path}: {len(blob) - expected} trailing bytes")
    flat = np.frombuffer(blob, dtype="<f4", offset=_FEATURE_HEADER.size)
    features = flat.reshape(n_frames, d_feat).copy()
    if not np.all(np.isfinite(features)):
        raise NonFiniteError(f"{path}: payload contains non-finite values")
    return VideoFeatures(
        video_id=video_id if video_id is not None else path.stem,
        features=features,
        duration=duration,
    )


def load_word_vectors(path: str | Path) -> WordVectorTable:
    """Parse a "token x1 ... x_d" text file. First occurrence wins on
    duplicate tokens; the first line fixes the dimension."""
    entries: dict[str, np.ndarray] = {}
    dimension: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dimension is None:
                if not values:
                    raise WordVectorError(f"{path}: line {lineno}: no values")
                dimension = len(values)
            if len(values) != dimension:
                raise WordVectorError(
                    f"{path}: line {lineno}: expected {dimension} values, got {len(values)}"
                )
            try:
                vec = np.array([float(v) for v in values], dtype=np.float32)
            except ValueError as exc:
                raise WordVectorError(f"{path}: line {lineno}: {exc}") from exc
            if not np.all(np.isfinite(vec)):
                raise WordVectorError(f"{path}: line {lineno}: non-finite value")
            if token not in entries:
                entries[token] = vec
    if dimension is None:
        raise WordVectorError(f"{path}: file has no entries")
    return WordVectorTable(dimension=dimension, entries=entries)


def save_word_vectors(path: str | Path, table: WordVectorTable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in table.entries.items():
            fh.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def tokenize_and_embed(query: str, table: WordVectorTable) -> QueryTokens:
    """Lowercase, split on whitespace, strip surrounding ASCII punctuation.

    Out-of-vocabulary tokens map to the all-zero vector so the result is
    independent of table iteration order.
    """
    tokens = []
    for piece in query.lower().split():
        token = piece.strip(string.punctuation)
        if token:
            tokens.append(token)
    if not tokens:
        raise ValidationError(f"query {query!r} has no tokens after tokenization")
    embeddings = np.stack([table.lookup(t) for t in tokens]).astype(np.float32)
    return QueryTokens(tokens=tokens, embeddings=embeddings)


@dataclass
class Example:
    """One training/evaluation example with its features and tokenized query."""

    annotation: GlanceAnnotation
    features: VideoFeatures
    tokens: QueryTokens


def load_glance_dataset(
    annotations_path: str | Path,
    features_dir: str | Path,
    table: WordVectorTable,
) -> list[Example]:
    """Join a glance annotation file with per-video feature files."""
    features_dir = Path(features_dir)
    cache: dict[str, VideoFeatures] = {}
    examples = []
    for ann in load_annotations(annotations_path, kind="glance"):
        if ann.video_id not in cache:
            cache[ann.video_id] = load_features(features_dir / f"{ann.video_id}.vgf")
        examples.append(
            Example(
                annotation=ann,
                features=cache[ann.video_id],
                tokens=tokenize_and_embed(ann.query, table),
            )
        )
    return examples


# --- synthetic benchmark -----------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs for the synthetic desk-scale benchmark.

    Each generated video is Gaussian noise; the frames inside the annotated
    moment additionally carry ``amplitude`` times a unit pattern vector
    determined by the example's query, so a trained model can recover the
    moment from the query alone.
    """

    n_videos: int = 100
    d_feat: int = 16
    frames_min: int = 16
    frames_max: int = 32
    frames_step: int = 1
    seconds_per_frame: float = 1.0
    vocab_size: int = 40
    d_word: int = 16
    query_len: int = 3
    moment_frac_min: float = 0.15
    moment_frac_max: float = 0.4
    amplitude: float = 1.0
    noise_scale: float = 1.0
    # distractors plant another query's pattern outside the moment (scene-change
    # stand-in); 0 keeps the video pure noise outside the moment
    n_distractors: int = 0
    distractor_amplitude: float | None = None
    id_prefix: str = "v"
    split_index: int = 0

    def __post_init__(self) -> None:
        if self.n_videos < 1:
            raise ValidationError("n_videos must be >= 1")
        if not 2 <= self.frames_min <= self.frames_max:
            raise ValidationError("need 2 <= frames_min <= frames_max")
        if self.frames_step < 1:
            raise ValidationError("frames_step must be >= 1")
        if not 0 < self.moment_frac_min <= self.moment_frac_max:
            raise ValidationError("need 0 < moment_frac_min <= moment_frac_max")
        if self.moment_frac_max > 1.0:
            raise ValidationError(
                f"moment_frac_max {self.moment_frac_max} exceeds the video length"
            )
        if self.query_len > self.vocab_size:
            raise ValidationError("query_len exceeds vocab_size")
        if self.n_distractors < 0:
            raise ValidationError("n_distractors must be >= 0")


def _vocab_tokens(config: SynthConfig) -> list[str]:
    width = max(3, len(str(config.vocab_size - 1)))
    return [f"w{i:0{width}d}" for i in range(config.vocab_size)]


def synthetic_vocab(config: SynthConfig, seed: int) -> WordVectorTable:
    """Word vectors for the synthetic vocabulary; depends only on (config, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    entries = {}
    for token in _vocab_tokens(config):
        vec = rng.standard_normal(config.d_word) / np.sqrt(config.d_word)
        entries[token] = vec.astype(np.float32)
    return WordVectorTable(dimension=config.d_word, entries=entries)


def synthetic_token_patterns(config: SynthConfig, seed: int) -> dict[str, np.ndarray]:
    """Unit feature-space pattern vector planted for each vocabulary token."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    patterns = {}
    for token in _vocab_tokens(config):
        vec = rng.standard_normal(config.d_feat)
        patterns[token] = (vec / np.linalg.norm(vec)).astype(np.float64)
    return patterns


def synthetic_query_pattern(
    config: SynthConfig, seed: int, query: str
) -> np.ndarray:
    """The unit pattern vector injected for a query: normalized mean of its
    tokens' patterns."""
    patterns = synthetic_token_patterns(config, seed)
    vecs = [patterns[t] for t in query.split()]
    mean = np.mean(vecs, axis=0)
    return mean / np.linalg.norm(mean)


def generate_synthetic(
    config: SynthConfig, seed: int
) -> tuple[list[VideoFeatures], list[FullAnnotation], WordVectorTable]:
    """Generate a reproducible synthetic dataset with recoverable moments.

    The vocabulary and token patterns depend only on (config, seed); videos
    additionally depend on config.split_index, so several splits sharing one
    vocabulary can be drawn from the same seed.
    """
    table = synthetic_vocab(config, seed)
    patterns = synthetic_token_patterns(config, seed)
    tokens = _vocab_tokens(config)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2 + config.split_index]))

    videos: list[VideoFeatures] = []
    annotations: list[FullAnnotation] = []
    noise_std = config.noise_scale / np.sqrt(config.d_feat)
    n_steps = (config.frames_max - config.frames_min) // config.frames_step + 1
    for i in range(config.n_videos):
        n_frames = config.frames_min + config.frames_step * int(rng.integers(n_steps))
        duration = n_frames * config.seconds_per_frame
        query = " ".join(rng.choice(tokens, size=config.query_len, replace=False))
        pattern = np.mean([patterns[t] for t in query.split()], axis=0)
        pattern /= np.linalg.norm(pattern)

        m_len = duration * rng.uniform(config.moment_frac_min, config.moment_frac_max)
        m_start = rng.uniform(0.0, duration - m_len)
        m_end = m_start + m_len

        feats = rng.standard_normal((n_frames, config.d_feat)) * noise_std
        centers = (np.arange(n_frames) + 0.5) * config.seconds_per_frame
        inside = (centers >= m_start) & (centers <= m_end)
        if not inside.any():
            inside[np.argmin(np.abs(centers - (m_start + m_end) / 2))] = True
        feats[inside] += config.amplitude * pattern

        d_amp = config.distractor_amplitude
        if d_amp is None:
            d_amp = config.amplitude
        for _ in range(config.n_distractors):
            other = rng.choice(tokens, size=config.query_len, replace=False)
            d_pattern = np.mean([patterns[t] for t in other], axis=0)
            d_pattern /= np.linalg.norm(d_pattern)
            d_len = duration * rng.uniform(config.moment_frac_min, config.moment_frac_max)
            gaps = [(0.0, m_start), (m_end, duration)]
            widths = np.array([max(0.0, hi - lo) for lo, hi in gaps])
            if widths.sum() <= 0:
                continue
            lo, hi = gaps[int(rng.choice(2, p=widths / widths.sum()))]
            d_len = min(d_len, hi - lo)
            d_start = rng.uniform(lo, hi - d_len)
            d_inside = (centers >= d_start) & (centers <= d_start + d_len) & ~inside
            feats[d_inside] += d_amp * d_pattern

        video_id = f"{config.id_prefix}{i:05d}"
        videos.append(
            VideoFeatures(
                video_id=video_id,
                features=feats.astype(np.float32),
                duration=duration,
            )
        )
        annotations.append(
            FullAnnotation(
                video_id=video_id,
                query=query,
                start=m_start,
                end=m_end,
                duration=duration,
            )
        )
    return videos, annotations, table
