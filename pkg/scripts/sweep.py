"""Run the acceptance-style ablation grid and print a summary table."""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from bench import build_split
from glancevmr.alignment import GaussianConfig
from glancevmr.inference import ProposalConfig
from glancevmr.model import ModelConfig
from glancevmr.training import TrainConfig, eval_miou, train


def run_one(
    train_ex, val_ex, test_ex, *, loss, sigma, use_kl, seed, epochs, batch, lr, layers,
    clip_len, stride,
):
    model_cfg = ModelConfig(
        d_feat=16, d_word=16, d_model=64, heads=4, layers=layers,
        dropout=0.1, max_positions=128,
    )
    gauss_cfg = GaussianConfig(sigma=sigma, clip_len=clip_len, stride=stride)
    train_cfg = TrainConfig(
        epochs=epochs, batch_size=batch, learning_rate=lr, seed=seed,
        loss_variant=loss, use_qag_kl=use_kl,
    )
    t0 = time.time()
    state, history = train(train_ex, val_ex, model_cfg, gauss_cfg, train_cfg)
    elapsed = time.time() - t0
    out = {}
    for mode in ("qagi", "sliding"):
        out[mode] = eval_miou(state.model, test_ex, ProposalConfig(mode=mode))
    from glancevmr.evaluation import temporal_iou
    from glancevmr.training import predict_examples

    results = predict_examples(state.model, test_ex, ProposalConfig(mode="qagi"))
    ious = [
        temporal_iou((r.start, r.end), (ex.annotation.eval_start, ex.annotation.eval_end))
        for r, ex in zip(results, test_ex)
    ]
    for t in (0.3, 0.5, 0.7):
        out[f"r{t}"] = 100.0 * sum(1 for v in ious if v > t) / len(ious)
    out["val"] = max(h.get("val_miou", 0.0) for h in history)
    out["time"] = elapsed
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--frames-min", type=int, default=16)
    ap.add_argument("--frames-max", type=int, default=32)
    ap.add_argument("--frames-step", type=int, default=8)
    ap.add_argument("--clip-len", type=int, default=8)
    ap.add_argument("--stride", type=int, default=4)
    ap.add_argument("--moment-min", type=float, default=0.15)
    ap.add_argument("--moment-max", type=float, default=0.4)
    ap.add_argument("--amplitude", type=float, default=1.0)
    ap.add_argument("--distractors", type=int, default=0)
    ap.add_argument("--distractor-amp", type=float, default=None)
    args = ap.parse_args()

    synth = dict(
        d_feat=16, d_word=16, frames_min=args.frames_min, frames_max=args.frames_max,
        frames_step=args.frames_step, vocab_size=50, query_len=3,
        moment_frac_min=args.moment_min, moment_frac_max=args.moment_max,
        amplitude=args.amplitude, n_distractors=args.distractors,
        distractor_amplitude=args.distractor_amp,
    )
    train_ex = build_split(synth, 42, 0, "train_", args.n_train, 100)
    val_ex = build_split(synth, 42, 1, "val_", 150, 100)
    test_ex = build_split(synth, 42, 2, "test_", 200, 100)

    grid = [
        dict(loss="gls_nce", sigma=0.4, use_kl=True),
        dict(loss="video_nce", sigma=0.4, use_kl=True),
        dict(loss="clip_nce", sigma=0.4, use_kl=True),
        dict(loss="gls_nce", sigma=0.4, use_kl=False),
        dict(loss="gls_nce", sigma=0.05, use_kl=True),
        dict(loss="gls_nce", sigma=2.0, use_kl=True),
    ]
    for cfg in grid:
        for seed in args.seeds:
            res = run_one(
                train_ex, val_ex, test_ex, seed=seed,
                epochs=args.epochs, batch=args.batch, lr=args.lr, layers=args.layers,
                clip_len=args.clip_len, stride=args.stride,
                **cfg,
            )
            print(
                json.dumps(
                    {**cfg, "seed": seed,
                     "qagi": round(res["qagi"], 2), "sliding": round(res["sliding"], 2),
                     "r0.3": round(res["r0.3"], 1), "r0.5": round(res["r0.5"], 1),
                     "r0.7": round(res["r0.7"], 1),
                     "val": round(res["val"], 2), "time_s": round(res["time"], 1)}
                ),
                flush=True,
            )


if __name__ == "__main__":
    main()
