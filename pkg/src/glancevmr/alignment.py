"""Glance-centered Gaussian weighting and the training losses.

Frame indices are scaled into [-1, 1]; a Gaussian bump centered on the
glance position, peak-normalized so the glance frame always weighs 1.0,
assigns every frame (and via clip midpoints every clip) a positiveness
weight. Clips contrast against the batch's sentence features under one of
three losses: plain video-level NCE, clip-level NCE, or the label-smoothed
variant where a clip's weight is its positive label mass. A KL term pulls
the model's guidance attention toward the same Gaussian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .model import CrossModalOutput
from .validation import ValidationError, check_positive

LOSS_VARIANTS = ("video_nce", "clip_nce", "gls_nce")

LOG_FLOOR = 1e-12  # floor on attention probabilities before taking logs


@dataclass(frozen=True)
class GaussianConfig:
    """Gaussian width and the clip slicing grid (both in frames)."""

    sigma: float = 0.4
    clip_len: int = 8
    stride: int = 4

    def __post_init__(self) -> None:
        check_positive("sigma", self.sigma)
        if not 1 <= self.stride <= self.clip_len:
            raise ValidationError(
                f"need 1 <= stride <= clip_len, got stride={self.stride}, "
                f"clip_len={self.clip_len}"
            )


@dataclass
class ClipSet:
    """Sliding-window clips of one video: pooled features, Gaussian weights,
    and 1-based inclusive frame spans."""

    clip_features: torch.Tensor  # N x d_model
    clip_weights: np.ndarray  # N, in [0, 1]
    spans: list[tuple[int, int]]


@dataclass
class BatchLossInput:
    """Everything the batch losses need, one entry per example."""

    clip_sets: list[ClipSet]
    sentence_features: torch.Tensor  # B x d_model
    pooled_video_features: torch.Tensor  # B x d_model
    guidance_attentions: list[torch.Tensor]  # each L_v
    frame_weights: list[np.ndarray]  # each L_v

    @property
    def batch_size(self) -> int:
        return self.sentence_features.shape[0]


def frame_index_scale(index: float, n_frames: int) -> float:
    """Map a frame index in [1, L_v] linearly onto [-1, 1]."""
    if not 1 <= index <= n_frames:
        raise ValidationError(f"frame index {index} outside [1, {n_frames}]")
    return _scale_unchecked(index, n_frames)


def _scale_unchecked(index: float, n_frames: int) -> float:
    # Clip midpoints may fall fractionally past L_v; the linear map still applies.
    if n_frames == 1:
        return 0.0
    return (index - 1) * 2.0 / (n_frames - 1) - 1.0


def glance_frame_index(glance: float, duration: float, n_frames: int) -> float:
    """Seconds -> real-valued frame index in [1, L_v]."""
    check_positive("duration", duration)
    if not 0 <= glance <= duration:
        raise ValidationError(f"glance {glance} outside [0, {duration}]")
    return 1.0 + glance / duration * (n_frames - 1)


def gaussian_weight(delta: float, sigma: float) -> float:
    """Peak-normalized Gaussian: the density ratio to the peak, in (0, 1]."""
    return math.exp(-(delta * delta) / (2.0 * sigma * sigma))


def frame_weights(n_frames: int, glance_index: float, sigma: float) -> np.ndarray:
    """Per-frame weights: Gaussian in scaled coordinates centered on the
    glance, divided by the peak density so the glance frame weighs 1.0."""
    check_positive("sigma", sigma)
    center = _scale_unchecked(glance_index, n_frames)
    scaled = np.array([_scale_unchecked(i, n_frames) for i in range(1, n_frames + 1)])
    return np.exp(-((scaled - center) ** 2) / (2.0 * sigma * sigma))


def clip_spans(n_frames: int, config: GaussianConfig) -> list[tuple[int, int]]:
    """Window starts 1, 1+s, 1+2s, ... plus a final truncated window when the
    full windows stop short of the last frame."""
    spans = []
    start = 1
    while start + config.clip_len - 1 <= n_frames:
        spans.append((start, start + config.clip_len - 1))
        start += config.stride
    if not spans or spans[-1][1] < n_frames:
        spans.append((start, n_frames))
    return spans


def slice_clips(frame_features: torch.Tensor, config: GaussianConfig) -> ClipSet:
    """Max-pool each sliding window of frame features into one clip vector."""
    n_frames = frame_features.shape[0]
    spans = clip_spans(n_frames, config)
    clips = torch.stack(
        [frame_features[start - 1 : end].max(dim=0).values for start, end in spans]
    )
    return ClipSet(
        clip_features=clips,
        clip_weights=np.ones(len(spans)),
        spans=spans,
    )


def clip_weight(
    span: tuple[int, int],
    n_frames: int,
    glance_index: float,
    config: GaussianConfig,
) -> float:
    """Gaussian weight sampled at the clip midpoint index start-1 + L_c/2.

    The midpoint is real-valued and, for the final truncated window, may lie
    past L_v; the scaled-coordinate Gaussian extends naturally.
    """
    midpoint = span[0] - 1 + config.clip_len / 2.0
    delta = _scale_unchecked(midpoint, n_frames) - _scale_unchecked(glance_index, n_frames)
    return float(np.clip(gaussian_weight(delta, config.sigma), 0.0, 1.0))


def build_clip_set(
    frame_features: torch.Tensor,
    glance_index: float,
    config: GaussianConfig,
) -> ClipSet:
    clip_set = slice_clips(frame_features, config)
    n_frames = frame_features.shape[0]
    clip_set.clip_weights = np.array(
        [clip_weight(span, n_frames, glance_index, config) for span in clip_set.spans]
    )
    return clip_set


def pool_sentence(word_features: torch.Tensor) -> torch.Tensor:
    """Element-wise max over words."""
    return word_features.max(dim=0).values


def pool_video(frame_features: torch.Tensor) -> torch.Tensor:
    """Element-wise max over frames, mirroring the clip/sentence pooling."""
    return frame_features.max(dim=0).values


def _check_batch(n: int) -> None:
    if n < 2:
        raise ValidationError(f"contrastive losses need batch size >= 2, got {n}")


def video_nce_loss(
    video_features: torch.Tensor, sentence_features: torch.Tensor
) -> torch.Tensor:
    """Video-level NCE: each pooled video against its own sentence versus the
    batch's other sentences, averaged over the batch."""
    _check_batch(video_features.shape[0])
    logits = video_features @ sentence_features.T  # B x B, row = one video
    log_probs = torch.log_softmax(logits, dim=1)
    return -log_probs.diagonal().mean()


def clip_nce_loss(
    clip_features: list[torch.Tensor], sentence_features: torch.Tensor
) -> torch.Tensor:
    """Clip-level NCE: the positive mass of a video is the summed similarity
    of all its clips to its own sentence."""
    batch = sentence_features.shape[0]
    _check_batch(batch)
    losses = []
    for b, clips in enumerate(clip_features):
        logits = clips @ sentence_features.T  # N x B
        pos = torch.logsumexp(logits[:, b], dim=0)
        total = torch.logsumexp(logits.reshape(-1), dim=0)
        losses.append(total - pos)
    return torch.stack(losses).mean()


def gls_nce_loss(
    clip_features: list[torch.Tensor],
    clip_weights: list[np.ndarray],
    sentence_features: torch.Tensor,
    reduction: str = "mean",
) -> torch.Tensor:
    """Gaussian label-smoothed NCE.

    Each clip classifies the batch's sentences; its target puts mass w on the
    positive sentence and (1-w)/(B-1) on every negative, where w is the
    clip's Gaussian weight. Reduced over all clips of all videos.
    """
    batch = sentence_features.shape[0]
    _check_batch(batch)
    if reduction not in ("mean", "sum"):
        raise ValidationError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    per_clip = []
    for b, (clips, weights) in enumerate(zip(clip_features, clip_weights)):
        logits = clips @ sentence_features.T  # N x B
        log_probs = torch.log_softmax(logits, dim=1)
        w = torch.as_tensor(weights, dtype=logits.dtype)
        target = ((1.0 - w) / (batch - 1)).unsqueeze(1).expand(-1, batch).clone()
        target[:, b] = w
        per_clip.append(-(target * log_probs).sum(dim=1))
    stacked = torch.cat(per_clip)
    return stacked.mean() if reduction == "mean" else stacked.sum()


def qag_kl_loss(
    attention: torch.Tensor,
    weights: np.ndarray | torch.Tensor,
    normalize_target: bool = True,
) -> torch.Tensor:
    """KL divergence from the (normalized) Gaussian weights to the guidance
    attention.

    The attention is floored at LOG_FLOOR before the log. normalize_target
    False keeps the raw weights as the target measure, which is not a true
    divergence but matches the weights as defined.
    """
    target = torch.as_tensor(weights, dtype=attention.dtype)
    if normalize_target:
        target = target / target.sum()
    floored = attention.clamp(min=LOG_FLOOR)
    terms = torch.where(
        target > 0,
        target * (torch.log(target.clamp(min=LOG_FLOOR)) - torch.log(floored)),
        torch.zeros_like(target),
    )
    return terms.sum()


def total_loss(
    batch: BatchLossInput,
    variant: str = "gls_nce",
    use_qag_kl: bool = True,
    reduction: str = "mean",
    normalize_kl_target: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Contrastive term (selected variant) plus the KL guidance term.

    Both terms are reduced as means by default (sums with reduction="sum");
    the parts dict reports them separately for logging.
    """
    if variant not in LOSS_VARIANTS:
        raise ValidationError(f"variant must be one of {LOSS_VARIANTS}, got {variant!r}")
    if variant == "video_nce":
        nce = video_nce_loss(batch.pooled_video_features, batch.sentence_features)
    elif variant == "clip_nce":
        nce = clip_nce_loss(
            [cs.clip_features for cs in batch.clip_sets], batch.sentence_features
        )
    else:
        nce = gls_nce_loss(
            [cs.clip_features for cs in batch.clip_sets],
            [cs.clip_weights for cs in batch.clip_sets],
            batch.sentence_features,
            reduction=reduction,
        )
    total = nce
    kl_value = 0.0
    if use_qag_kl:
        kls = torch.stack(
            [
                qag_kl_loss(a, g, normalize_target=normalize_kl_target)
                for a, g in zip(batch.guidance_attentions, batch.frame_weights)
            ]
        )
        kl = kls.mean() if reduction == "mean" else kls.sum()
        total = nce + kl
        kl_value = float(kl.detach())
    return total, {
        "total": float(total.detach()),
        "nce": float(nce.detach()),
        "kl": kl_value,
    }


def build_loss_input(
    outputs: list[CrossModalOutput],
    glance_indices: list[float],
    config: GaussianConfig,
) -> BatchLossInput:
    """Assemble the loss input from per-example encoder outputs and the
    examples' real-valued glance frame indices."""
    clip_sets = []
    sentences = []
    pooled = []
    frame_ws = []
    for out, g_idx in zip(outputs, glance_indices):
        clip_sets.append(build_clip_set(out.frame_features, g_idx, config))
        sentences.append(pool_sentence(out.word_features))
        pooled.append(pool_video(out.frame_features))
        frame_ws.append(
            frame_weights(out.frame_features.shape[0], g_idx, config.sigma)
        )
    return BatchLossInput(
        clip_sets=clip_sets,
        sentence_features=torch.stack(sentences),
        pooled_video_features=torch.stack(pooled),
        guidance_attentions=[out.guidance_attention for out in outputs],
        frame_weights=frame_ws,
    )


def build_loss_input_grouped(
    outputs: list[CrossModalOutput],
    glance_indices: list[float],
    config: GaussianConfig,
) -> BatchLossInput:
    """build_loss_input with the clip pooling batched over examples that
    share a frame count (the spans are identical there). Same result, far
    fewer tensor ops on large batches."""
    n = len(outputs)
    groups: dict[int, list[int]] = {}
    for i, out in enumerate(outputs):
        groups.setdefault(out.frame_features.shape[0], []).append(i)
    clip_sets: list[ClipSet | None] = [None] * n
    sentence_rows: list[torch.Tensor | None] = [None] * n
    pooled_rows: list[torch.Tensor | None] = [None] * n
    frame_ws: list[np.ndarray | None] = [None] * n
    for n_frames in sorted(groups):
        idxs = groups[n_frames]
        frames = torch.stack([outputs[i].frame_features for i in idxs])
        words_pooled = [pool_sentence(outputs[i].word_features) for i in idxs]
        spans = clip_spans(n_frames, config)
        clips = torch.stack(
            [frames[:, start - 1 : end].max(dim=1).values for start, end in spans],
            dim=1,
        )  # group x n_clips x d_model
        video_pooled = frames.max(dim=1).values
        for slot, i in enumerate(idxs):
            g_idx = glance_indices[i]
            weights = np.array(
                [clip_weight(span, n_frames, g_idx, config) for span in spans]
            )
            clip_sets[i] = ClipSet(
                clip_features=clips[slot], clip_weights=weights, spans=list(spans)
            )
            sentence_rows[i] = words_pooled[slot]
            pooled_rows[i] = video_pooled[slot]
            frame_ws[i] = frame_weights(n_frames, g_idx, config.sigma)
    return BatchLossInput(
        clip_sets=clip_sets,
        sentence_features=torch.stack(sentence_rows),
        pooled_video_features=torch.stack(pooled_rows),
        guidance_attentions=[out.guidance_attention for out in outputs],
        frame_weights=frame_ws,
    )
