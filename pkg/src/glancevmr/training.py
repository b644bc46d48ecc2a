"""Training loop: batching, AdamW with decoupled weight decay, global-norm
gradient clipping, plateau learning-rate decay, and train-state checkpoints.

All randomness is derived from the config seed through tagged seed
sequences, so every epoch shuffle and every step's dropout mask is a pure
function of (seed, epoch, step). Training is therefore reproducible and a
reloaded checkpoint continues exactly where the saved run left off.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .alignment import (
    GaussianConfig,
    LOSS_VARIANTS,
    build_loss_input_grouped,
    glance_frame_index,
    total_loss,
)
from .data import Example
from .evaluation import mean_iou, temporal_iou
from .inference import INFERENCE_MODES, ProposalConfig, RetrievalResult, retrieve
from .model import (
    CrossModalNetwork,
    ModelConfig,
    gradients,
    init_params,
    read_checkpoint,
    write_checkpoint,
)
from .validation import ValidationError, check_positive

# seed-sequence tags so independent random streams never collide
_TAG_INIT = 0
_TAG_SHUFFLE = 1
_TAG_DROPOUT = 2


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters and the training-time loss selection."""

    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-4
    lr_decay_factor: float = 0.5
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-4
    lr_floor: float = 1e-6
    stop_after_floor_plateaus: int = 5
    grad_clip_norm: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss_variant: str = "gls_nce"
    use_qag_kl: bool = True
    loss_reduction: str = "mean"
    normalize_kl_target: bool = True
    inference_mode: str = "qagi"

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2 (contrastive losses)")
        check_positive("learning_rate", self.learning_rate)
        check_positive("grad_clip_norm", self.grad_clip_norm)
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValidationError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.inference_mode not in INFERENCE_MODES:
            raise ValidationError(f"inference_mode must be one of {INFERENCE_MODES}")


class AdamW:
    """Adaptive moment estimation with decoupled weight decay.

    Moments are kept per parameter name so they serialize alongside the
    model in checkpoints.
    """

    def __init__(self, config: TrainConfig):
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.step_count = 0
        self.exp_avg: dict[str, torch.Tensor] = {}
        self.exp_avg_sq: dict[str, torch.Tensor] = {}

    def step(self, model: CrossModalNetwork, grads: dict[str, torch.Tensor], lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1**self.step_count
        bc2 = 1.0 - self.beta2**self.step_count
        names = []
        params = []
        for name, param in model.named_parameters():
            names.append(name)
            params.append(param)
            if name not in self.exp_avg:
                self.exp_avg[name] = torch.zeros_like(param)
                self.exp_avg_sq[name] = torch.zeros_like(param)
        gs = [grads[n] for n in names]
        ms = [self.exp_avg[n] for n in names]
        vs = [self.exp_avg_sq[n] for n in names]
        with torch.no_grad():
            torch._foreach_mul_(ms, self.beta1)
            torch._foreach_add_(ms, gs, alpha=1.0 - self.beta1)
            torch._foreach_mul_(vs, self.beta2)
            torch._foreach_addcmul_(vs, gs, gs, value=1.0 - self.beta2)
            torch._foreach_mul_(params, 1.0 - lr * self.weight_decay)
            denom = torch._foreach_div(vs, bc2)
            torch._foreach_sqrt_(denom)
            torch._foreach_add_(denom, self.eps)
            torch._foreach_addcdiv_(params, ms, denom, value=-lr / bc1)


@dataclass
class TrainState:
    """Mutable state owned by one training run."""

    model: CrossModalNetwork
    optimizer: AdamW
    learning_rate: float
    step: int = 0
    epoch: int = 0
    best_val_miou: float | None = None
    epochs_since_improvement: int = 0
    stale_at_floor: int = 0


def init_train_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    seed = _derive_seed(train_config.seed, _TAG_INIT)
    model = init_params(model_config, seed)
    return TrainState(
        model=model,
        optimizer=AdamW(train_config),
        learning_rate=train_config.learning_rate,
    )


def _derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1, dtype=np.uint64)[0])


def make_batches(
    dataset: list[Example], batch_size: int, rng: np.random.Generator
) -> list[list[Example]]:
    """Shuffle and partition; a trailing remainder of one example is dropped
    because the contrastive losses need at least two."""
    if len(dataset) < 2:
        raise ValidationError("dataset must have at least 2 examples")
    order = rng.permutation(len(dataset))
    batches = []
    for lo in range(0, len(order), batch_size):
        chunk = [dataset[i] for i in order[lo : lo + batch_size]]
        if len(chunk) >= 2:
            batches.append(chunk)
    return batches


def clip_gradients(
    grads: dict[str, torch.Tensor], max_norm: float
) -> tuple[float, float]:
    """Scale gradients in place to a global norm bound; returns the norms
    before and after clipping."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g.mul_(scale)
        return total, max_norm
    return total, total


def train_step(
    state: TrainState,
    batch: list[Example],
    gaussian_config: GaussianConfig,
    train_config: TrainConfig,
    rng: torch.Generator | None = None,
) -> dict[str, float]:
    """One optimization step; mutates state and returns step metrics."""
    if rng is None:
        rng = torch.Generator().manual_seed(
            _derive_seed(train_config.seed, _TAG_DROPOUT, state.step)
        )
    outputs = state.model.forward_grouped(
        [(ex.tokens, ex.features) for ex in batch], mode="train", rng=rng
    )
    glance_indices = [
        glance_frame_index(ex.annotation.glance, ex.annotation.duration, ex.features.num_frames)
        for ex in batch
    ]
    loss_input = build_loss_input_grouped(outputs, glance_indices, gaussian_config)
    loss, parts = total_loss(
        loss_input,
        variant=train_config.loss_variant,
        use_qag_kl=train_config.use_qag_kl,
        reduction=train_config.loss_reduction,
        normalize_kl_target=train_config.normalize_kl_target,
    )
    grads = gradients(loss, state.model)
    for name, grad in grads.items():
        if not torch.isfinite(grad).all():
            raise ValidationError(
                f"non-finite gradient for {name!r} at step {state.step} "
                f"(loss={parts['total']})"
            )
    norm_before, norm_after = clip_gradients(grads, train_config.grad_clip_norm)
    state.optimizer.step(state.model, grads, state.learning_rate)
    state.step += 1
    return {
        **parts,
        "grad_norm": norm_after,
        "grad_norm_preclip": norm_before,
        "learning_rate": state.learning_rate,
    }


def lr_plateau_step(state: TrainState, val_miou: float, config: TrainConfig) -> None:
    """Halve the learning rate after plateau_patience epochs without an mIoU
    improvement of at least plateau_min_delta."""
    improved = (
        state.best_val_miou is None
        or val_miou >= state.best_val_miou + config.plateau_min_delta
    )
    if improved:
        state.best_val_miou = val_miou
        state.epochs_since_improvement = 0
        state.stale_at_floor = 0
        return
    state.epochs_since_improvement += 1
    if state.learning_rate <= config.lr_floor:
        state.stale_at_floor += 1
    if state.epochs_since_improvement >= config.plateau_patience:
        state.learning_rate *= config.lr_decay_factor
        state.epochs_since_improvement = 0


def should_stop(state: TrainState, config: TrainConfig) -> bool:
    return state.stale_at_floor >= config.stop_after_floor_plateaus


def predict_examples(
    model: CrossModalNetwork, examples: list[Example], pconfig: ProposalConfig
) -> list[RetrievalResult]:
    return [retrieve(ex.features, ex.tokens, model, pconfig) for ex in examples]


def eval_miou(
    model: CrossModalNetwork, examples: list[Example], pconfig: ProposalConfig
) -> float:
    """Mean IoU (percent) of retrievals against the held-out eval bounds."""
    ious = []
    for ex, result in zip(examples, predict_examples(model, examples, pconfig)):
        ann = ex.annotation
        if ann.eval_start is None or ann.eval_end is None:
            raise ValidationError(f"{ann.video_id}: no eval bounds for validation")
        ious.append(temporal_iou((result.start, result.end), (ann.eval_start, ann.eval_end)))
    return mean_iou(ious)


def train(
    train_examples: list[Example],
    val_examples: list[Example] | None,
    model_config: ModelConfig,
    gaussian_config: GaussianConfig,
    train_config: TrainConfig,
    proposal_config: ProposalConfig | None = None,
    log_path: str | Path | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run the full loop; returns the state holding the best-validation model
    (final model when no validation set is given) and the per-epoch history.
    """
    if proposal_config is None:
        proposal_config = ProposalConfig(mode=train_config.inference_mode)
    state = init_train_state(model_config, train_config)
    history: list[dict] = []
    best_arrays: dict[str, torch.Tensor] | None = None
    best_seen = -float("inf")
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(train_config.epochs):
            state.epoch = epoch
            shuffle_rng = np.random.default_rng(
                np.random.SeedSequence([train_config.seed, _TAG_SHUFFLE, epoch])
            )
            batches = make_batches(train_examples, train_config.batch_size, shuffle_rng)
            sums = {"total": 0.0, "nce": 0.0, "kl": 0.0}
            for batch in batches:
                metrics = train_step(state, batch, gaussian_config, train_config)
                for key in sums:
                    sums[key] += metrics[key]
            record = {
                "epoch": epoch,
                "steps": len(batches),
                "mean_total": sums["total"] / len(batches),
                "mean_nce": sums["nce"] / len(batches),
                "mean_kl": sums["kl"] / len(batches),
                "learning_rate": state.learning_rate,
            }
            if val_examples:
                val_miou = eval_miou(state.model, val_examples, proposal_config)
                record["val_miou"] = val_miou
                if val_miou > best_seen:
                    best_seen = val_miou
                    best_arrays = {
                        name: p.detach().clone()
                        for name, p in state.model.named_parameters()
                    }
                lr_plateau_step(state, val_miou, train_config)
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if should_stop(state, train_config):
                break
    finally:
        if log_fh:
            log_fh.close()
    if best_arrays is not None:
        with torch.no_grad():
            for name, param in state.model.named_parameters():
                param.copy_(best_arrays[name])
    return state, history


# --- train-state checkpoints ---------------------------------------------------

def save_train_state(
    path: str | Path,
    state: TrainState,
    train_config: TrainConfig,
    gaussian_config: GaussianConfig,
) -> None:
    """Lossless snapshot: parameters, optimizer moments, counters, and the
    configs needed to resume."""
    arrays = {name: p.detach().cpu().numpy() for name, p in state.model.named_parameters()}
    for name in list(arrays):
        if name in state.optimizer.exp_avg:
            arrays[f"optimizer/exp_avg/{name}"] = state.optimizer.exp_avg[name].cpu().numpy()
            arrays[f"optimizer/exp_avg_sq/{name}"] = state.optimizer.exp_avg_sq[name].cpu().numpy()
    meta = {
        "train_state": {
            "step": state.step,
            "epoch": state.epoch,
            "opt_step": state.optimizer.step_count,
            "learning_rate": state.learning_rate,
            "best_val_miou": state.best_val_miou,
            "epochs_since_improvement": state.epochs_since_improvement,
            "stale_at_floor": state.stale_at_floor,
        },
        "train_config": dataclasses.asdict(train_config),
        "gaussian_config": dataclasses.asdict(gaussian_config),
    }
    write_checkpoint(path, state.model.config, arrays, meta=meta)


def load_train_state(
    path: str | Path, expected_config: ModelConfig | None = None
) -> tuple[TrainState, TrainConfig, GaussianConfig]:
    from .model import CheckpointError, load_model

    config, arrays, meta = read_checkpoint(path)
    if "train_state" not in meta:
        raise CheckpointError(f"{path}: not a training checkpoint")
    model = load_model(path, expected_config=expected_config)
    train_config = TrainConfig(**meta["train_config"])
    gaussian_config = GaussianConfig(**meta["gaussian_config"])
    optimizer = AdamW(train_config)
    saved = meta["train_state"]
    optimizer.step_count = int(saved["opt_step"])
    for name, param in model.named_parameters():
        m = arrays.get(f"optimizer/exp_avg/{name}")
        v = arrays.get(f"optimizer/exp_avg_sq/{name}")
        if m is None or v is None:
            if optimizer.step_count > 0:
                raise CheckpointError(f"{path}: missing optimizer moments for {name!r}")
            continue
        if m.shape != tuple(param.shape) or v.shape != tuple(param.shape):
            raise CheckpointError(f"{path}: optimizer moment shape mismatch for {name!r}")
        optimizer.exp_avg[name] = torch.from_numpy(m.copy())
        optimizer.exp_avg_sq[name] = torch.from_numpy(v.copy())
    state = TrainState(
        model=model,
        optimizer=optimizer,
        learning_rate=float(saved["learning_rate"]),
        step=int(saved["step"]),
        epoch=int(saved["epoch"]),
        best_val_miou=saved["best_val_miou"],
        epochs_since_improvement=int(saved["epochs_since_improvement"]),
        stale_at_floor=int(saved["stale_at_floor"]),
    )
    return state, train_config, gaussian_config


# --- presets -------------------------------------------------------------------

# Desk-scale defaults train on a laptop CPU; the full presets mirror the
# published per-dataset settings (batch size, sigma, model width).
PRESETS: dict[str, dict] = {
    "desk": {
        "model": {"d_model": 64, "heads": 4, "layers": 2, "dropout": 0.1, "max_positions": 256},
        "gaussian": {"sigma": 0.4, "clip_len": 8, "stride": 4},
        "train": {"batch_size": 16, "learning_rate": 1e-4},
    },
    "full-activitynet": {
        "model": {"d_model": 512, "heads": 8, "layers": 2, "dropout": 0.1, "max_positions": 1024},
        "gaussian": {"sigma": 0.4, "clip_len": 8, "stride": 4},
        "train": {"batch_size": 256, "learning_rate": 1e-4},
    },
    "full-charades": {
        "model": {"d_model": 512, "heads": 8, "layers": 2, "dropout": 0.1, "max_positions": 1024},
        "gaussian": {"sigma": 0.3, "clip_len": 8, "stride": 4},
        "train": {"batch_size": 256, "learning_rate": 1e-4},
    },
    "full-tacos": {
        "model": {"d_model": 512, "heads": 8, "layers": 2, "dropout": 0.1, "max_positions": 2048},
        "gaussian": {"sigma": 1.0, "clip_len": 8, "stride": 4},
        "train": {"batch_size": 128, "learning_rate": 1e-4},
    },
}
