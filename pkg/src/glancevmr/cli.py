"""Command-line entry points: reannotate, synth, train, eval, infer."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from .alignment import GaussianConfig
from .data import (
    Example,
    SynthConfig,
    generate_synthetic,
    load_annotations,
    load_features,
    load_glance_dataset,
    load_word_vectors,
    reannotate,
    save_annotations,
    save_features,
    save_word_vectors,
    tokenize_and_embed,
)
from .evaluation import evaluate_dataset, format_report_table
from .inference import ProposalConfig, retrieve
from .model import ModelConfig, load_model, save_model
from .training import PRESETS, TrainConfig, predict_examples, train
from .validation import ValidationError


def _cmd_reannotate(args: argparse.Namespace) -> int:
    annotations = load_annotations(args.input, kind="full")
    rng = np.random.default_rng(args.seed)
    save_annotations(args.output, reannotate(annotations, rng))
    print(f"wrote {len(annotations)} glance annotations to {args.output}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    counts = {
        "train": int(raw.pop("n_train", 100)),
        "val": int(raw.pop("n_val", 20)),
        "test": int(raw.pop("n_test", 20)),
    }
    out_dir = Path(args.out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    table = None
    for split_index, (split, count) in enumerate(counts.items()):
        config = SynthConfig(
            n_videos=count, id_prefix=f"{split}_", split_index=split_index, **raw
        )
        videos, annotations, table = generate_synthetic(config, args.seed)
        for video in videos:
            save_features(features_dir / f"{video.video_id}.vgf", video)
        save_annotations(out_dir / f"{split}.jsonl", annotations)
        print(f"{split}: {count} videos")
    save_word_vectors(out_dir / "word_vectors.txt", table)
    return 0


def _load_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _build_configs(
    raw: dict, data_dir: Path
) -> tuple[ModelConfig, GaussianConfig, TrainConfig, ProposalConfig, dict]:
    """Merge a named preset with per-section overrides from a train config
    file and resolve data paths relative to the data directory."""
    preset = PRESETS[raw.get("preset", "desk")]
    model_kw = {**preset["model"], **raw.get("model", {})}
    gaussian_kw = {**preset["gaussian"], **raw.get("gaussian", {})}
    train_kw = {**preset["train"], **raw.get("train", {})}
    data = raw.get("data", {})
    paths = {
        "train": data_dir / data.get("train", "train_glance.jsonl"),
        "val": data_dir / data.get("val", "val_glance.jsonl"),
        "features": data_dir / data.get("features", "features"),
        "word_vectors": data_dir / data.get("word_vectors", "word_vectors.txt"),
    }
    table = load_word_vectors(paths["word_vectors"])
    if "d_word" not in model_kw:
        model_kw["d_word"] = table.dimension
    if "d_feat" not in model_kw:
        sample = next(Path(paths["features"]).glob("*.vgf"), None)
        if sample is None:
            raise ValidationError(f"no .vgf files under {paths['features']}")
        model_kw["d_feat"] = load_features(sample).features.shape[1]
    model_config = ModelConfig(**model_kw)
    gaussian_config = GaussianConfig(**gaussian_kw)
    train_config = TrainConfig(**train_kw)
    proposal_kw = raw.get("proposals", {})
    proposal_config = ProposalConfig(
        mode=train_config.inference_mode,
        **{k: tuple(v) if isinstance(v, list) else v for k, v in proposal_kw.items()},
    )
    paths["table"] = table
    return model_config, gaussian_config, train_config, proposal_config, paths


def _cmd_train(args: argparse.Namespace) -> int:
    raw = _load_json(args.config)
    data_dir = Path(args.data_dir)
    model_cfg, gaussian_cfg, train_cfg, proposal_cfg, paths = _build_configs(raw, data_dir)
    table = paths["table"]
    train_examples = load_glance_dataset(paths["train"], paths["features"], table)
    val_examples = None
    if Path(paths["val"]).exists():
        val_examples = load_glance_dataset(paths["val"], paths["features"], table)
    log_path = Path(str(args.out) + ".metrics.jsonl")
    state, history = train(
        train_examples,
        val_examples,
        model_cfg,
        gaussian_cfg,
        train_cfg,
        proposal_cfg,
        log_path=log_path,
    )
    best = max((h.get("val_miou", float("nan")) for h in history), default=None)
    save_model(args.out, state.model, meta={"val_miou": best})
    print(f"trained {len(history)} epochs; best val mIoU: {best}")
    print(f"checkpoint: {args.out}\nmetrics: {log_path}")
    return 0


def _resolve_annotations(data_dir: Path, split: str) -> Path:
    glance = data_dir / f"{split}_glance.jsonl"
    if glance.exists():
        return glance
    full = data_dir / f"{split}.jsonl"
    if full.exists():
        return full
    raise ValidationError(f"no annotations for split {split!r} under {data_dir}")


def _cmd_eval(args: argparse.Namespace) -> int:
    data_dir = Path(args.data_dir)
    ann_path = Path(args.annotations) if args.annotations else _resolve_annotations(data_dir, args.split)
    model = load_model(args.ckpt)
    table = load_word_vectors(data_dir / args.word_vectors)
    kind = "glance" if "glance" in json.loads(next(open(ann_path))) else "full"
    annotations = load_annotations(ann_path, kind=kind)
    pconfig = ProposalConfig(mode=args.mode)
    features_dir = data_dir / args.features
    cache: dict[str, object] = {}
    lines = []
    for ann in annotations:
        if ann.video_id not in cache:
            cache[ann.video_id] = load_features(features_dir / f"{ann.video_id}.vgf")
        tokens = tokenize_and_embed(ann.query, table)
        result = retrieve(cache[ann.video_id], tokens, model, pconfig)
        lines.append(json.dumps(result.to_json(ann.video_id, ann.query, args.mode)))
    if args.pred_out:
        pred_path = Path(args.pred_out)
    else:
        pred_path = Path(tempfile.mkstemp(suffix=".jsonl")[1])
    pred_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    report = evaluate_dataset(pred_path, ann_path)
    print(format_report_table(report))
    if args.json_out:
        Path(args.json_out).write_text(
            json.dumps(report.to_json(), indent=2), encoding="utf-8"
        )
    if not args.pred_out:
        pred_path.unlink()
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    model = load_model(args.ckpt)
    table = load_word_vectors(args.word_vectors)
    video = load_features(args.features)
    tokens = tokenize_and_embed(args.query, table)
    pconfig = ProposalConfig(mode=args.mode)
    result = retrieve(video, tokens, model, pconfig)
    print(json.dumps(result.to_json(video.video_id, args.query, args.mode)))
    if args.dump_attention:
        import torch

        with torch.no_grad():
            output = model.forward_example(tokens, video, mode="eval")
        Path(args.dump_attention).write_text(
            json.dumps(
                {
                    "video_id": video.video_id,
                    "attention": output.guidance_attention.tolist(),
                }
            ),
            encoding="utf-8",
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glancevmr",
        description="Glance-supervised video moment retrieval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reannotate", help="replace full boundaries with sampled glances")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=_cmd_reannotate)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--mode", choices=["qagi", "sliding"], default="qagi")
    p.add_argument("--annotations", help="explicit annotation file (overrides --split)")
    p.add_argument("--features", default="features")
    p.add_argument("--word-vectors", default="word_vectors.txt")
    p.add_argument("--pred-out", help="write predictions JSONL here")
    p.add_argument("--json-out", help="write the report as JSON here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="retrieve a moment for one query")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--word-vectors", required=True)
    p.add_argument("--mode", choices=["qagi", "sliding"], default="qagi")
    p.add_argument("--dump-attention", help="write the guidance attention vector here")
    p.set_defaults(func=_cmd_infer)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
