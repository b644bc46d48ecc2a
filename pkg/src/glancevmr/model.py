"""Cross-modal representation network.

A bidirectional GRU encodes the query, stacked multihead self-attention
blocks encode the video, and a pair of directional cross-attention stacks
fuses the two into a joint embedding space. The query-to-video attention of
the final cross layer, averaged over heads and words, is exposed as the
guidance distribution over frames that both the KL training objective and
anchored inference consume.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import QueryTokens, VideoFeatures
from .validation import ValidationError

CHECKPOINT_MAGIC = b"VGCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the expected config."""


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters. d_ff defaults to 4 * d_model."""

    d_feat: int
    d_word: int
    d_model: int = 512
    heads: int = 8
    layers: int = 2
    d_ff: int | None = None
    dropout: float = 0.1
    max_positions: int = 512
    guidance_layer: str = "last"  # which cross layer defines the guidance attention

    def __post_init__(self) -> None:
        for name in ("d_feat", "d_word", "d_model", "heads", "layers", "max_positions"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.d_model % self.heads != 0:
            raise ValidationError("d_model must be divisible by heads")
        if self.d_model % 2 != 0:
            raise ValidationError("d_model must be even (bidirectional split)")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout must be in [0, 1)")
        if self.d_ff is not None and self.d_ff < 1:
            raise ValidationError("d_ff must be >= 1")
        if self.guidance_layer not in ("last", "first"):
            raise ValidationError("guidance_layer must be 'last' or 'first'")

    @property
    def ff_width(self) -> int:
        return self.d_ff if self.d_ff is not None else 4 * self.d_model

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise CheckpointError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class CrossModalOutput:
    """Joint-space features for one example plus the guidance attention."""

    word_features: torch.Tensor  # L_q x d_model
    frame_features: torch.Tensor  # L_v x d_model
    guidance_attention: torch.Tensor  # L_v, nonnegative, sums to 1


def _dropout(x: torch.Tensor, p: float, training: bool, rng: torch.Generator | None) -> torch.Tensor:
    if not training or p <= 0:
        return x
    if rng is None:
        raise ValidationError("train mode with dropout > 0 requires an rng")
    keep = torch.rand(x.shape, generator=rng, dtype=x.dtype) >= p
    return x * keep.to(x.dtype) / (1.0 - p)


class MultiheadAttention(nn.Module):
    """Scaled dot-product attention with h heads.

    Heads are concatenated directly; there is no output projection, so the
    only parameters are the three d_model -> d_model input projections.
    """

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.scale = math.sqrt(d_model / heads)
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, memory: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(L_q x d) -> (L_q x d output, heads x L_q x L_k attention probs).

        A leading batch dimension is accepted on both inputs; every batch
        slice attends only within itself.
        """
        unbatched = query.ndim == 2
        if unbatched:
            query = query.unsqueeze(0)
            memory = memory.unsqueeze(0)
        n, l_q, _ = query.shape
        l_k = memory.shape[1]
        q = self.q_proj(query).reshape(n, l_q, self.heads, self.d_head).permute(0, 2, 1, 3)
        k = self.k_proj(memory).reshape(n, l_k, self.heads, self.d_head).permute(0, 2, 1, 3)
        v = self.v_proj(memory).reshape(n, l_k, self.heads, self.d_head).permute(0, 2, 1, 3)
        scores = q @ k.transpose(-2, -1) / self.scale
        probs = torch.softmax(scores, dim=-1)
        out = (probs @ v).permute(0, 2, 1, 3).reshape(n, l_q, -1)
        if unbatched:
            return out.squeeze(0), probs.squeeze(0)
        return out, probs


class EncoderBlock(nn.Module):
    """Attention -> dropout -> residual -> norm, then the ReLU feed-forward
    sublayer with the same post-residual normalization."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn = MultiheadAttention(config.d_model, config.heads)
        self.norm1 = nn.LayerNorm(config.d_model, eps=1e-5)
        self.ff1 = nn.Linear(config.d_model, config.ff_width)
        self.ff2 = nn.Linear(config.ff_width, config.d_model)
        self.norm2 = nn.LayerNorm(config.d_model, eps=1e-5)
        self.p_drop = config.dropout

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        training: bool,
        rng: torch.Generator | None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        attn_out, probs = self.attn(x, memory)
        x = self.norm1(x + _dropout(attn_out, self.p_drop, training, rng))
        ff = self.ff2(torch.relu(self.ff1(x)))
        x = self.norm2(x + _dropout(ff, self.p_drop, training, rng))
        return x, probs


class CrossModalNetwork(nn.Module):
    """Uni-modal encoders plus bidirectional cross-attention stacks."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.query_gru = nn.GRU(
            input_size=config.d_word,
            hidden_size=config.d_model // 2,
            num_layers=config.layers,
            bidirectional=True,
        )
        self.feature_proj = nn.Linear(config.d_feat, config.d_model)
        self.pos_embedding = nn.Parameter(torch.zeros(config.max_positions, config.d_model))
        self.video_blocks = nn.ModuleList(EncoderBlock(config) for _ in range(config.layers))
        self.q2v_blocks = nn.ModuleList(EncoderBlock(config) for _ in range(config.layers))
        self.v2q_blocks = nn.ModuleList(EncoderBlock(config) for _ in range(config.layers))

    @property
    def dtype(self) -> torch.dtype:
        return self.feature_proj.weight.dtype

    def encode_query(
        self, embeddings: torch.Tensor, mode: str = "eval", rng: torch.Generator | None = None
    ) -> torch.Tensor:
        """L_q x d_word embeddings -> L_q x d_model; row i concatenates the
        final-layer forward and backward hidden states at position i.

        A leading batch dimension (same L_q for all) is accepted.
        """
        _check_mode(mode)
        if embeddings.shape[-2] > self.config.max_positions:
            raise ValidationError(
                f"query length {embeddings.shape[-2]} exceeds max_positions "
                f"{self.config.max_positions}"
            )
        if embeddings.shape[-1] != self.config.d_word:
            raise ValidationError(
                f"expected word dimension {self.config.d_word}, got {embeddings.shape[-1]}"
            )
        if embeddings.ndim == 3:
            output, _ = self.query_gru(embeddings.transpose(0, 1))
            return output.transpose(0, 1)
        output, _ = self.query_gru(embeddings)
        return output

    def encode_video(
        self,
        features: torch.Tensor,
        mode: str = "eval",
        rng: torch.Generator | None = None,
        return_attention: bool = False,
    ):
        """L_v x d_feat features -> L_v x d_model self-encoded frames.

        A leading batch dimension (same L_v for all) is accepted.
        """
        _check_mode(mode)
        n_frames = features.shape[-2]
        if n_frames > self.config.max_positions:
            raise ValidationError(
                f"video length {n_frames} exceeds max_positions {self.config.max_positions}"
            )
        if features.shape[-1] != self.config.d_feat:
            raise ValidationError(
                f"expected feature dimension {self.config.d_feat}, got {features.shape[-1]}"
            )
        training = mode == "train"
        x = self.feature_proj(features) + self.pos_embedding[:n_frames]
        attentions = []
        for block in self.video_blocks:
            x, probs = block(x, x, training, rng)
            attentions.append(probs)
        if return_attention:
            return x, attentions
        return x

    def cross_encode(
        self,
        word_features: torch.Tensor,
        frame_features: torch.Tensor,
        mode: str = "eval",
        rng: torch.Generator | None = None,
    ) -> CrossModalOutput:
        """Fuse the uni-modal encodings; both directions update in parallel
        from the previous layer's features. Batched 3-D inputs are accepted."""
        _check_mode(mode)
        training = mode == "train"
        q, v = word_features, frame_features
        guidance = None
        for i, (q_block, v_block) in enumerate(zip(self.q2v_blocks, self.v2q_blocks)):
            q_next, q2v_probs = q_block(q, v, training, rng)
            v_next, _ = v_block(v, q, training, rng)
            q, v = q_next, v_next
            is_chosen = i == 0 if self.config.guidance_layer == "first" else i == len(self.q2v_blocks) - 1
            if is_chosen:
                # (... heads x L_q x L_v) -> mean over heads then over words
                guidance = q2v_probs.mean(dim=-3).mean(dim=-2)
        return CrossModalOutput(word_features=q, frame_features=v, guidance_attention=guidance)

    def forward_example(
        self,
        tokens: QueryTokens,
        video: VideoFeatures,
        mode: str = "eval",
        rng: torch.Generator | None = None,
    ) -> CrossModalOutput:
        emb = torch.as_tensor(tokens.embeddings, dtype=self.dtype)
        feats = torch.as_tensor(video.features, dtype=self.dtype)
        q = self.encode_query(emb, mode, rng)
        v = self.encode_video(feats, mode, rng)
        return self.cross_encode(q, v, mode, rng)

    def forward(
        self,
        batch: list[tuple[QueryTokens, VideoFeatures]],
        mode: str = "eval",
        rng: torch.Generator | None = None,
    ) -> list[CrossModalOutput]:
        """Encode each (query, video) pair independently."""
        if not batch:
            raise ValidationError("batch must be non-empty")
        return [self.forward_example(tokens, video, mode, rng) for tokens, video in batch]

    def forward_grouped(
        self,
        batch: list[tuple[QueryTokens, VideoFeatures]],
        mode: str = "eval",
        rng: torch.Generator | None = None,
    ) -> list[CrossModalOutput]:
        """Like forward, but examples sharing (L_q, L_v) run as one stacked
        tensor. Mathematically equivalent to forward (examples never interact)
        while launching far fewer kernels; results may differ from the
        per-example path at float rounding level.
        """
        if not batch:
            raise ValidationError("batch must be non-empty")
        groups: dict[tuple[int, int], list[int]] = {}
        for i, (tokens, video) in enumerate(batch):
            key = (tokens.embeddings.shape[0], video.features.shape[0])
            groups.setdefault(key, []).append(i)
        outputs: list[CrossModalOutput | None] = [None] * len(batch)
        for key in sorted(groups):
            idxs = groups[key]
            emb = torch.stack(
                [torch.as_tensor(batch[i][0].embeddings, dtype=self.dtype) for i in idxs]
            )
            feats = torch.stack(
                [torch.as_tensor(batch[i][1].features, dtype=self.dtype) for i in idxs]
            )
            q = self.encode_query(emb, mode, rng)
            v = self.encode_video(feats, mode, rng)
            fused = self.cross_encode(q, v, mode, rng)
            for slot, i in enumerate(idxs):
                outputs[i] = CrossModalOutput(
                    word_features=fused.word_features[slot],
                    frame_features=fused.frame_features[slot],
                    guidance_attention=fused.guidance_attention[slot],
                )
        return outputs


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")


def init_bounds(model: CrossModalNetwork) -> dict[str, float]:
    """Maximum allowed |value| per parameter under the fan-in uniform init."""
    bounds: dict[str, float] = {}
    for name, param in model.named_parameters():
        if "norm" in name and name.endswith(".weight"):
            bounds[name] = 1.0  # layer norm gain, initialized to exactly 1
        elif name.endswith(".bias") or "bias" in name.split(".")[-1]:
            bounds[name] = 0.0
        elif name == "pos_embedding":
            bounds[name] = 1.0 / math.sqrt(model.config.d_model)
        elif "weight_hh" in name:
            bounds[name] = 1.0 / math.sqrt(param.shape[1])
        elif "weight_ih" in name:
            bounds[name] = 1.0 / math.sqrt(param.shape[1])
        elif param.ndim == 2:
            bounds[name] = 1.0 / math.sqrt(param.shape[1])  # linear: fan_in = in features
        else:
            raise AssertionError(f"unclassified parameter {name}")
    return bounds


def init_params(config: ModelConfig, seed: int) -> CrossModalNetwork:
    """Build the network with fan-in scaled symmetric uniform weights, zero
    biases, and unit norm gains; deterministic given the seed."""
    model = CrossModalNetwork(config)
    rng = torch.Generator().manual_seed(seed)
    bounds = init_bounds(model)
    with torch.no_grad():
        for name, param in model.named_parameters():
            bound = bounds[name]
            if "norm" in name and name.endswith(".weight"):
                param.fill_(1.0)
            elif bound == 0.0:
                param.zero_()
            else:
                param.uniform_(-bound, bound, generator=rng)
    return model


# --- checkpoint container ----------------------------------------------------

def write_checkpoint(
    path: str | Path,
    config: ModelConfig,
    arrays: dict[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    """Write the binary checkpoint container: magic, version, a JSON header
    with the model config (plus optional metadata), then named float32
    records."""
    header = {"config": config.to_json()}
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    """Read the container back: (config, named arrays, metadata)."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    offset = 4
    version, header_len = struct.unpack_from("<II", blob, offset)
    offset += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header: {exc}") from exc
    offset += header_len
    config = ModelConfig.from_json(header["config"])
    (n_records,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(n_records):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            arrays[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated records: {exc}") from exc
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return config, arrays, header.get("meta", {})


def save_model(path: str | Path, model: CrossModalNetwork, meta: dict | None = None) -> None:
    arrays = {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}
    write_checkpoint(path, model.config, arrays, meta=meta)


def load_model(
    path: str | Path, expected_config: ModelConfig | None = None
) -> CrossModalNetwork:
    """Rebuild a network from a checkpoint, rejecting config or shape
    mismatches. Extra records (e.g. optimizer state) are ignored."""
    config, arrays, _ = read_checkpoint(path)
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"{path}: checkpoint config {config} does not match expected {expected_config}"
        )
    model = CrossModalNetwork(config)
    with torch.no_grad():
        for name, param in model.named_parameters():
            arr = arrays.get(name)
            if arr is None:
                raise CheckpointError(f"{path}: missing parameter record {name!r}")
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"{path}: parameter {name!r} has shape {arr.shape}, "
                    f"expected {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr))
    return model


def gradients(
    loss: torch.Tensor, model: CrossModalNetwork
) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter.

    Parameters the loss does not depend on get zero blocks. Raises before
    differentiating if the loss itself is non-finite.
    """
    if loss.ndim != 0:
        raise ValidationError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise ValidationError(f"loss is non-finite: {loss.item()!r}")
    names = [name for name, _ in model.named_parameters()]
    params = [p for _, p in model.named_parameters()]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for name, p, g in zip(names, params, grads)
    }
