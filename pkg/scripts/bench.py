"""Scratch benchmark driver for tuning the acceptance-suite settings."""

from __future__ import annotations

import argparse
import time

import numpy as np

from glancevmr.alignment import GaussianConfig
from glancevmr.data import Example, SynthConfig, generate_synthetic, reannotate, tokenize_and_embed
from glancevmr.inference import ProposalConfig
from glancevmr.model import ModelConfig
from glancevmr.training import TrainConfig, eval_miou, train


def build_split(config, seed, split_index, prefix, n, data_seed):
    cfg = SynthConfig(
        n_videos=n,
        id_prefix=prefix,
        split_index=split_index,
        **config,
    )
    videos, anns, table = generate_synthetic(cfg, seed)
    glances = reannotate(anns, np.random.default_rng(data_seed + split_index))
    return [
        Example(g, v, tokenize_and_embed(g.query, table))
        for g, v in zip(glances, videos)
    ]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-eval", type=int, default=200)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--loss", default="gls_nce")
    ap.add_argument("--sigma", type=float, default=0.4)
    ap.add_argument("--no-kl", action="store_true")
    ap.add_argument("--amplitude", type=float, default=1.0)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--frames-step", type=int, default=1)
    ap.add_argument("--layers", type=int, default=2)
    args = ap.parse_args()

    synth = dict(
        d_feat=16,
        d_word=16,
        frames_min=16,
        frames_max=32,
        frames_step=args.frames_step,
        vocab_size=50,
        query_len=3,
        moment_frac_min=0.15,
        moment_frac_max=0.4,
        amplitude=args.amplitude,
    )
    t0 = time.time()
    train_ex = build_split(synth, 42, 0, "train_", args.n_train, 100)
    val_ex = build_split(synth, 42, 1, "val_", args.n_eval, 100)
    test_ex = build_split(synth, 42, 2, "test_", args.n_eval, 100)
    print(f"data: {time.time()-t0:.1f}s")

    model_cfg = ModelConfig(
        d_feat=16, d_word=16, d_model=64, heads=4, layers=args.layers,
        dropout=0.1, max_positions=64,
    )
    gauss_cfg = GaussianConfig(sigma=args.sigma, clip_len=8, stride=4)
    train_cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        loss_variant=args.loss,
        use_qag_kl=not args.no_kl,
    )
    t0 = time.time()
    state, history = train(train_ex, val_ex, model_cfg, gauss_cfg, train_cfg)
    elapsed = time.time() - t0
    for h in history:
        print(
            f"epoch {h['epoch']}: loss={h['mean_total']:.4f} "
            f"val_miou={h.get('val_miou', float('nan')):.2f} lr={h['learning_rate']:.2e}"
        )
    print(f"train: {elapsed:.1f}s ({elapsed/len(history):.1f}s/epoch)")
    for mode in ("qagi", "sliding"):
        t0 = time.time()
        miou = eval_miou(state.model, test_ex, ProposalConfig(mode=mode))
        print(f"test mIoU [{mode}]: {miou:.2f} ({time.time()-t0:.1f}s)")


if __name__ == "__main__":
    main()
