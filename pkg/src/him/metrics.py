"""Instance matting metrics (ACC, REC, EMSE, EMAD) and scalar matting errors (SAD, MSE, MAD).

A prediction counts as correct at threshold TH when it is one-to-one matched
(maximum total IoU) to a ground truth and their IoU is strictly above TH.
Counts and per-instance errors are pooled over the whole evaluation set before
dividing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .assignment import linear_sum_assignment

THRESHOLDS = (0.5, 0.75)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def alpha_iou(pred: np.ndarray, gt: np.ndarray, bin: float = 0.5) -> float:
    """IoU of ``alpha > bin`` masks; two empty masks have IoU 1."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    _check_same_shape(pred, gt)
    if not 0.0 < bin < 1.0:
        raise ValueError("bin must lie in (0, 1)")
    p, g = pred > bin, gt > bin
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def iou_matrix(preds, gts, bin: float = 0.5) -> np.ndarray:
    if len(preds) == 0 or len(gts) == 0:
        return np.zeros((len(preds), len(gts)))
    p = np.stack([np.asarray(x) > bin for x in preds]).reshape(len(preds), -1).astype(np.float64)
    g = np.stack([np.asarray(x) > bin for x in gts]).reshape(len(gts), -1).astype(np.float64)
    if p.shape[1] != g.shape[1]:
        raise ValueError("prediction and ground-truth mattes differ in size")
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1), 1.0)


@dataclass
class MatchedPairSet:
    pairs: list[tuple[int, int, float]]  # (pred index, gt index, IoU)
    unmatched_preds: list[int]
    unmatched_gts: list[int]
    num_pred: int
    num_gt: int

    def count_above(self, th: float) -> int:
        return sum(1 for _, _, iou in self.pairs if iou > th)


def match_for_eval(preds, gts, bin: float = 0.5) -> MatchedPairSet:
    """One-to-one matching maximising total IoU."""
    ious = iou_matrix(preds, gts, bin)
    rows, cols = linear_sum_assignment(-ious) if ious.size else (np.zeros(0, int), np.zeros(0, int))
    pairs = [(int(r), int(c), float(ious[r, c])) for r, c in zip(rows, cols)]
    return MatchedPairSet(
        pairs=pairs,
        unmatched_preds=sorted(set(range(len(preds))) - set(rows.tolist())),
        unmatched_gts=sorted(set(range(len(gts))) - set(cols.tolist())),
        num_pred=len(preds),
        num_gt=len(gts),
    )


def matting_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """Raw SAD (sum |d|), MSE and MAD of one matte pair."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check_same_shape(pred, gt)
    d = pred - gt
    return {"sad": float(np.abs(d).sum()), "mse": float((d**2).mean()), "mad": float(np.abs(d).mean())}


@dataclass
class InstanceStats:
    """Pooled numerator/denominator terms for one threshold."""

    num_pred: int = 0
    num_gt: int = 0
    num_correct: int = 0
    sq_errors: list[float] = field(default_factory=list)
    abs_errors: list[float] = field(default_factory=list)

    def add(self, other: "InstanceStats") -> "InstanceStats":
        return InstanceStats(self.num_pred + other.num_pred, self.num_gt + other.num_gt,
                             self.num_correct + other.num_correct, self.sq_errors + other.sq_errors,
                             self.abs_errors + other.abs_errors)

    def summary(self) -> dict[str, float | None]:
        n = self.num_correct
        return {
            "ACC": n / self.num_pred if self.num_pred else None,
            "REC": n / self.num_gt if self.num_gt else None,
            "EMSE": float(np.mean(self.sq_errors)) if n else None,
            "EMAD": float(np.mean(self.abs_errors)) if n else None,
        }


def instance_stats(matches: MatchedPairSet, preds, gts, th: float) -> InstanceStats:
    stats = InstanceStats(num_pred=matches.num_pred, num_gt=matches.num_gt)
    for p, g, iou in matches.pairs:
        if iou > th:
            m = matting_metrics(preds[p], gts[g])
            stats.num_correct += 1
            stats.sq_errors.append(m["mse"])
            stats.abs_errors.append(m["mad"])
    return stats


def instance_metrics(matches: MatchedPairSet, preds, gts, th: float) -> dict[str, float | None]:
    return instance_stats(matches, preds, gts, th).summary()


@dataclass
class ImageResult:
    matches: MatchedPairSet
    stats: dict[float, InstanceStats]
    errors: list[dict[str, float]]  # per ground truth, vs matched prediction or an empty matte


def evaluate_image(preds, gts, thresholds=THRESHOLDS, bin: float = 0.5) -> ImageResult:
    matches = match_for_eval(preds, gts, bin)
    by_gt = {g: p for p, g, _ in matches.pairs}
    errors = []
    for g, gt in enumerate(gts):
        pred = preds[by_gt[g]] if g in by_gt else np.zeros_like(np.asarray(gt, dtype=np.float64))
        errors.append(matting_metrics(pred, gt))
    return ImageResult(matches, {th: instance_stats(matches, preds, gts, th) for th in thresholds}, errors)


@dataclass
class MetricsReport:
    thresholds: dict[str, dict[str, float | None]]
    sad: float | None  # mean per-instance SAD in thousands
    mse: float | None
    mad: float | None
    per_image: list[dict]

    def to_dict(self) -> dict:
        return {"thresholds": self.thresholds, "sad": self.sad, "mse": self.mse, "mad": self.mad,
                "per_image": self.per_image}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_report(results: list[ImageResult], names: list[str] | None = None,
                 thresholds=THRESHOLDS) -> MetricsReport:
    names = names or [str(i) for i in range(len(results))]
    pooled = {th: InstanceStats() for th in thresholds}
    errors = []
    per_image = []
    for name, res in zip(names, results):
        for th in thresholds:
            pooled[th] = pooled[th].add(res.stats[th])
        errors.extend(res.errors)
        per_image.append({
            "image": name,
            "num_pred": res.matches.num_pred,
            "num_gt": res.matches.num_gt,
            "pairs": [[p, g, iou] for p, g, iou in res.matches.pairs],
        })
    mean = (lambda key, scale=1.0: float(np.mean([e[key] for e in errors]) * scale) if errors else None)
    return MetricsReport(
        thresholds={str(th): pooled[th].summary() for th in thresholds},
        sad=mean("sad", 1e-3),
        mse=mean("mse"),
        mad=mean("mad"),
        per_image=per_image,
    )


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["thresholds", "sad", "mse", "mad", "per_image"],
    "additionalProperties": False,
    "properties": {
        "thresholds": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["ACC", "REC", "EMSE", "EMAD"],
                "additionalProperties": False,
                "properties": {
                    "ACC": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "REC": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                    "EMSE": {"type": ["number", "null"], "minimum": 0},
                    "EMAD": {"type": ["number", "null"], "minimum": 0},
                },
            },
        },
        "sad": {"type": ["number", "null"], "minimum": 0},
        "mse": {"type": ["number", "null"], "minimum": 0},
        "mad": {"type": ["number", "null"], "minimum": 0},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image", "num_pred", "num_gt", "pairs"],
                "properties": {
                    "image": {"type": "string"},
                    "num_pred": {"type": "integer", "minimum": 0},
                    "num_gt": {"type": "integer", "minimum": 0},
                    "pairs": {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3}},
                },
            },
        },
    },
}
