"""Temporal IoU metrics and dataset-level evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data import load_annotations
from .validation import ValidationError

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)


@dataclass
class EvalReport:
    """Recall at each IoU threshold (percent), mean IoU (percent), and the
    per-example IoU list in join order."""

    recall_at: dict[float, float]
    mean_iou: float
    n_examples: int
    ious: list[float]

    def to_json(self) -> dict:
        return {
            "recall_at": {f"{t:g}": v for t, v in self.recall_at.items()},
            "mean_iou": self.mean_iou,
            "n_examples": self.n_examples,
            "ious": self.ious,
        }


def temporal_iou(pred: tuple[float, float], gt: tuple[float, float]) -> float:
    """Intersection over union of two [start, end] intervals in seconds."""
    p_start, p_end = pred
    g_start, g_end = gt
    if p_start > p_end:
        raise ValidationError(f"inverted prediction interval ({p_start}, {p_end})")
    if g_start > g_end:
        raise ValidationError(f"inverted ground-truth interval ({g_start}, {g_end})")
    inter = min(p_end, g_end) - max(p_start, g_start)
    if inter < 0:
        inter = 0.0
    union = (p_end - p_start) + (g_end - g_start) - inter
    if union <= 0:
        # both intervals degenerate: identical points match perfectly
        return 1.0 if p_start == g_start else 0.0
    return inter / union


def recall_at_iou(
    ious: list[float], thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
) -> dict[float, float]:
    """Percentage of examples whose IoU strictly exceeds each threshold."""
    if not ious:
        raise ValidationError("recall needs at least one IoU value")
    return {
        t: 100.0 * sum(1 for v in ious if v > t) / len(ious) for t in thresholds
    }


def mean_iou(ious: list[float]) -> float:
    if not ious:
        raise ValidationError("mean IoU needs at least one value")
    return 100.0 * sum(ious) / len(ious)


def load_predictions(path: str | Path) -> list[dict]:
    """Read a predictions JSON Lines file ({video_id, query, start, end, ...})."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                out.append(
                    {
                        "video_id": str(raw["video_id"]),
                        "query": str(raw["query"]),
                        "start": float(raw["start"]),
                        "end": float(raw["end"]),
                    }
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: line {lineno}: bad prediction: {exc!r}") from exc
    return out


def _ground_truth_intervals(path: str | Path) -> dict[tuple[str, str], tuple[float, float]]:
    """Map (video_id, query) -> interval from a full or glance annotation file."""
    with open(path, encoding="utf-8") as fh:
        first = next((line for line in fh if line.strip()), None)
    if first is None:
        raise ValidationError(f"{path}: no annotations")
    kind = "glance" if "glance" in json.loads(first) else "full"
    intervals: dict[tuple[str, str], tuple[float, float]] = {}
    for ann in load_annotations(path, kind=kind):
        key = (ann.video_id, ann.query)
        if key in intervals:
            raise ValidationError(
                f"{path}: duplicate annotation for video={key[0]!r} query={key[1]!r}"
            )
        if kind == "glance":
            if ann.eval_start is None or ann.eval_end is None:
                raise ValidationError(
                    f"{path}: {ann.video_id}: glance annotation lacks eval bounds"
                )
            intervals[key] = (ann.eval_start, ann.eval_end)
        else:
            intervals[key] = (ann.start, ann.end)
    return intervals


def evaluate_dataset(
    predictions_path: str | Path,
    annotations_path: str | Path,
    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
) -> EvalReport:
    """Join predictions to annotations by (video_id, query) and score them.

    Every prediction must match exactly one annotation and vice versa;
    offenders on either side are listed in the raised error.
    """
    predictions = load_predictions(predictions_path)
    intervals = _ground_truth_intervals(annotations_path)
    seen: set[tuple[str, str]] = set()
    unmatched_preds = []
    ious = []
    for pred in predictions:
        key = (pred["video_id"], pred["query"])
        if key not in intervals:
            unmatched_preds.append(key)
            continue
        if key in seen:
            raise ValidationError(f"duplicate prediction for {key}")
        seen.add(key)
        ious.append(temporal_iou((pred["start"], pred["end"]), intervals[key]))
    unmatched_anns = sorted(set(intervals) - seen)
    if unmatched_preds or unmatched_anns:
        raise ValidationError(
            "prediction/annotation join failed; "
            f"unmatched predictions: {sorted(unmatched_preds)[:5]}, "
            f"unmatched annotations: {unmatched_anns[:5]}"
        )
    return EvalReport(
        recall_at=recall_at_iou(ious, thresholds),
        mean_iou=mean_iou(ious),
        n_examples=len(ious),
        ious=ious,
    )


def format_report_table(report: EvalReport) -> str:
    """Aligned plain-text table with one column per recall threshold."""
    headers = [f"R@{t:g}" for t in report.recall_at] + ["mIoU", "n"]
    values = [f"{v:.2f}" for v in report.recall_at.values()]
    values += [f"{report.mean_iou:.2f}", str(report.n_examples)]
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    row = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return head + "\n" + row
