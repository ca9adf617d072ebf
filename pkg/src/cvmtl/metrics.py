"""Evaluation metrics for the dense-prediction tasks plus the ΔMTL aggregate.

All functions are pure numpy over immutable inputs.  Boundary and saliency
F-measures are dataset-level sweeps: counts accumulate over all samples per
threshold before precision/recall are formed.  ΔMTL is the mean signed
relative improvement over a baseline, sign-flipped for lower-is-better
metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError

DEFAULT_THRESHOLDS = np.linspace(1, 33, 33) / 34.0
# greedy boundary matching radius when none is given: 1.1% of the image diagonal
BOUNDARY_TOLERANCE_FRACTION = 0.011


@dataclass(frozen=True)
class MetricValue:
    value: float
    higher_is_better: bool


@dataclass
class MetricReport:
    """Named per-task metrics with direction flags."""

    metrics: dict[str, MetricValue] = field(default_factory=dict)
    baseline_id: str | None = None

    def add(self, name: str, value: float, higher_is_better: bool) -> None:
        if name in self.metrics:
            raise ContractError(f"metric {name} reported twice")
        self.metrics[name] = MetricValue(float(value), higher_is_better)

    def to_json(self) -> str:
        payload = {
            "baseline": self.baseline_id,
            "metrics": {
                k: {"value": v.value, "higher_is_better": v.higher_is_better}
                for k, v in self.metrics.items()
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        payload = json.loads(text)
        report = cls(baseline_id=payload.get("baseline"))
        for name, entry in payload["metrics"].items():
            report.add(name, entry["value"], entry["higher_is_better"])
        return report


# -- per-task metrics -------------------------------------------------------


def miou(pred_labels, gt_labels, num_classes: int, ignore_label: int = 255):
    """Mean IoU (percent) over classes present in ground truth; None if no valid pixels."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    if pred.shape != gt.shape:
        raise DataError(f"label shapes differ: {pred.shape} vs {gt.shape}")
    valid = gt != ignore_label
    if not valid.any():
        return None
    p, g = pred[valid], gt[valid]
    if ((p < 0) | (p >= num_classes)).any() or ((g < 0) | (g >= num_classes)).any():
        raise DataError(f"labels outside [0, {num_classes}) present")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (g, p), 1)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    present = (tp + fn) > 0
    iou = tp[present] / (tp[present] + fp[present] + fn[present])
    return float(iou.mean() * 100.0)


def depth_rmse(pred, gt, valid_mask=None):
    """Root mean square depth error in meters over valid pixels; None if empty."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones(gt.shape, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    if not mask.any():
        return None
    d = pred[mask] - gt[mask]
    return float(np.sqrt(np.mean(d * d)))


def normal_merr(pred_normals, gt_normals, valid_mask=None):
    """Mean angular error in degrees; zero-norm vectors count as invalid pixels."""
    pred = np.asarray(pred_normals, dtype=np.float64)
    gt = np.asarray(gt_normals, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[0] != 3:
        raise DataError(f"expected [3,H,W] normals, got {pred.shape} and {gt.shape}")
    mask = np.ones(pred.shape[1:], dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    pn = np.linalg.norm(pred, axis=0)
    gn = np.linalg.norm(gt, axis=0)
    mask = mask & (pn > 0) & (gn > 0)
    if not mask.any():
        return None
    cos = (pred * gt).sum(axis=0) / (pn * gn + (~mask))
    angles = np.degrees(np.arccos(np.clip(cos[mask], -1.0, 1.0)))
    return float(angles.mean())


def _greedy_match_count(pred_pixels: np.ndarray, gt_pixels: np.ndarray, tol: float) -> int:
    """One-to-one greedy matching within `tol` pixels.

    Predicted pixels are visited in row-major order; each claims its nearest
    unmatched ground-truth pixel, ties broken toward the row-major-smaller
    ground-truth pixel.
    """
    matched = np.zeros(len(gt_pixels), dtype=bool)
    count = 0
    tol_sq = tol * tol
    for p in pred_pixels:
        best, best_d = -1, None
        for k, g in enumerate(gt_pixels):
            if matched[k]:
                continue
            dy = float(p[0] - g[0])
            dx = float(p[1] - g[1])
            d = dy * dy + dx * dx
            if d <= tol_sq and (best_d is None or d < best_d):
                best, best_d = k, d
        if best >= 0:
            matched[best] = True
            count += 1
    return count


def boundary_odsf(pred_prob_maps, gt_boundaries, tolerance_px=None, thresholds=None):
    """Boundary F-measure at the best single dataset-wide threshold, percent.

    Matching is greedy one-to-one within a pixel radius (documented
    approximation of benchmark matchers, not comparable to their absolute
    numbers).
    """
    thresholds = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ConfigError("threshold list must be nonempty")
    preds = [np.asarray(p, dtype=np.float64) for p in pred_prob_maps]
    gts = [np.asarray(g).astype(bool) for g in gt_boundaries]
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions vs {len(gts)} ground truths")

    best_f = 0.0
    for t in thresholds:
        tp = pred_count = gt_count = 0
        for prob, gt in zip(preds, gts):
            tol = tolerance_px
            if tol is None:
                tol = BOUNDARY_TOLERANCE_FRACTION * float(np.hypot(*gt.shape))
            pred_pixels = np.argwhere(prob >= t)
            gt_pixels = np.argwhere(gt)
            tp += _greedy_match_count(pred_pixels, gt_pixels, tol)
            pred_count += len(pred_pixels)
            gt_count += len(gt_pixels)
        precision = tp / pred_count if pred_count else 0.0
        recall = tp / gt_count if gt_count else 0.0
        if precision + recall > 0:
            best_f = max(best_f, 2.0 * precision * recall / (precision + recall))
    return best_f * 100.0


def saliency_maxf(pred_prob_maps, gt_masks, thresholds=None, beta_sq: float = 0.3):
    """Maximum F_beta over thresholds, dataset-level counts, percent."""
    thresholds = DEFAULT_THRESHOLDS if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if thresholds.size == 0:
        raise ConfigError("threshold list must be nonempty")
    preds = [np.asarray(p, dtype=np.float64) for p in pred_prob_maps]
    gts = [np.asarray(g).astype(bool) for g in gt_masks]
    if len(preds) != len(gts):
        raise DataError(f"{len(preds)} predictions vs {len(gts)} ground truths")

    best_f = 0.0
    for t in thresholds:
        tp = fp = fn = 0
        for prob, gt in zip(preds, gts):
            binary = prob >= t
            tp += int(np.count_nonzero(binary & gt))
            fp += int(np.count_nonzero(binary & ~gt))
            fn += int(np.count_nonzero(~binary & gt))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        denom = beta_sq * precision + recall
        if denom > 0:
            best_f = max(best_f, (1.0 + beta_sq) * precision * recall / denom)
    return best_f * 100.0


# -- aggregate ---------------------------------------------------------------


def delta_mtl(model: MetricReport, baseline: MetricReport) -> float:
    """Mean signed relative gain over the baseline, percent."""
    if set(model.metrics) != set(baseline.metrics):
        raise ContractError(
            f"task sets differ: {sorted(model.metrics)} vs {sorted(baseline.metrics)}"
        )
    total = 0.0
    for name, m in model.metrics.items():
        b = baseline.metrics[name]
        if m.higher_is_better != b.higher_is_better:
            raise ContractError(f"metric {name} direction flags disagree")
        if b.value == 0:
            raise ContractError(f"baseline value for {name} is zero")
        sign = 1.0 if m.higher_is_better else -1.0
        total += sign * (m.value - b.value) / b.value
    return 100.0 * total / len(model.metrics)
