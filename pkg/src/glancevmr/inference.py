"""Proposal-based moment retrieval.

Sliding windows at several fractions of the video length form the proposal
pool. In anchored ("qagi") mode the pool is pruned to windows containing the
frame where the guidance attention peaks; plain "sliding" mode keeps every
window. Proposals are ranked by the dot product between their max-pooled
frame features and the sentence feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import QueryTokens, VideoFeatures
from .model import CrossModalNetwork, CrossModalOutput
from .validation import ValidationError

INFERENCE_MODES = ("qagi", "sliding")


@dataclass(frozen=True)
class Proposal:
    """A candidate moment as 1-based inclusive frame indices."""

    start_idx: int
    end_idx: int

    def __post_init__(self) -> None:
        if not 1 <= self.start_idx <= self.end_idx:
            raise ValidationError(
                f"bad proposal indices ({self.start_idx}, {self.end_idx})"
            )

    def contains(self, idx: int) -> bool:
        return self.start_idx <= idx <= self.end_idx


@dataclass
class RetrievalResult:
    """A retrieved moment in seconds with its score and anchor."""

    start: float
    end: float
    score: float
    anchor_idx: int
    proposal: Proposal

    def to_json(self, video_id: str, query: str, mode: str) -> dict:
        return {
            "video_id": video_id,
            "query": query,
            "start": self.start,
            "end": self.end,
            "score": self.score,
            "anchor_idx": self.anchor_idx,
            "mode": mode,
        }


@dataclass(frozen=True)
class ProposalConfig:
    """Window sizes as fractions of the video length; stride as a fraction of
    each window."""

    window_fractions: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    stride_fraction: float = 0.5
    mode: str = "qagi"

    def __post_init__(self) -> None:
        if not self.window_fractions:
            raise ValidationError("window_fractions must be non-empty")
        if any(not 0 < f <= 1 for f in self.window_fractions):
            raise ValidationError("window fractions must lie in (0, 1]")
        if list(self.window_fractions) != sorted(set(self.window_fractions)):
            raise ValidationError("window fractions must be sorted and distinct")
        if not self.stride_fraction > 0:
            raise ValidationError("stride_fraction must be > 0")
        if self.mode not in INFERENCE_MODES:
            raise ValidationError(f"mode must be one of {INFERENCE_MODES}")


def select_anchor(attention: np.ndarray | torch.Tensor) -> int:
    """1-based index of the attention maximum; ties break to the smallest."""
    arr = np.asarray(
        attention.detach().cpu() if isinstance(attention, torch.Tensor) else attention
    )
    if arr.ndim != 1 or arr.shape[0] < 1:
        raise ValidationError("attention must be a non-empty vector")
    return int(np.argmax(arr)) + 1


def _round_half_up(x: float) -> int:
    return int(x + 0.5)


def generate_proposals(
    n_frames: int, anchor: int | None, config: ProposalConfig
) -> list[Proposal]:
    """Sliding windows for every configured fraction, deduplicated and sorted
    by (start, end). Anchored mode keeps only windows containing the anchor
    and falls back to the full video if pruning empties the pool.
    """
    if config.mode == "qagi" and anchor is None:
        raise ValidationError("qagi mode requires an anchor")
    if config.mode == "sliding" and anchor is not None:
        raise ValidationError("sliding mode does not take an anchor")
    windows: set[tuple[int, int]] = set()
    for fraction in config.window_fractions:
        width = max(1, _round_half_up(fraction * n_frames))
        if width > n_frames:
            width = n_frames
        stride = max(1, _round_half_up(config.stride_fraction * width))
        last_start = n_frames - width + 1
        starts = list(range(1, last_start + 1, stride))
        if starts[-1] != last_start:
            starts.append(last_start)  # always cover the tail
        for start in starts:
            windows.add((start, start + width - 1))
    proposals = [Proposal(s, e) for s, e in sorted(windows)]
    if config.mode == "qagi":
        kept = [p for p in proposals if p.contains(anchor)]
        if not kept:
            kept = [Proposal(1, n_frames)]
        proposals = kept
    return proposals


def score_proposal(
    frame_features: torch.Tensor, proposal: Proposal, sentence: torch.Tensor
) -> float:
    """Dot product of the proposal's max-pooled frames with the sentence."""
    if proposal.end_idx > frame_features.shape[0]:
        raise ValidationError(
            f"proposal {proposal} exceeds video length {frame_features.shape[0]}"
        )
    pooled = frame_features[proposal.start_idx - 1 : proposal.end_idx].max(dim=0).values
    return float(pooled @ sentence)


def indices_to_seconds(
    proposal: Proposal, duration: float, n_frames: int
) -> tuple[float, float]:
    start = (proposal.start_idx - 1) * duration / n_frames
    end = proposal.end_idx * duration / n_frames
    return start, end


def retrieve_from_output(
    output: CrossModalOutput,
    duration: float,
    config: ProposalConfig,
) -> RetrievalResult:
    """Rank proposals for one already-encoded example. Score ties break to
    the earliest start, then the shortest window."""
    n_frames = output.frame_features.shape[0]
    anchor = select_anchor(output.guidance_attention)
    proposals = generate_proposals(
        n_frames, anchor if config.mode == "qagi" else None, config
    )
    sentence = output.word_features.max(dim=0).values
    best: Proposal | None = None
    best_score = -float("inf")
    for proposal in proposals:  # sorted by (start, end): first win = tie rule
        score = score_proposal(output.frame_features, proposal, sentence)
        if score > best_score:
            best, best_score = proposal, score
    start, end = indices_to_seconds(best, duration, n_frames)
    return RetrievalResult(
        start=start, end=end, score=best_score, anchor_idx=anchor, proposal=best
    )


def retrieve(
    video: VideoFeatures,
    tokens: QueryTokens,
    model: CrossModalNetwork,
    config: ProposalConfig,
) -> RetrievalResult:
    """Full retrieval for one (video, query) pair with a trained model."""
    with torch.no_grad():
        output = model.forward_example(tokens, video, mode="eval")
    return retrieve_from_output(output, video.duration, config)
