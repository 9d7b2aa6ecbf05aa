"""Detection metrics: AP by depth range, true-positive errors, IoU stats.

Matching is greedy in descending confidence (ties broken by input index):
each detection takes the not-yet-matched ground-truth box with the
highest IoU and is a true positive iff that IoU clears the threshold.
Average precision integrates the all-point-interpolated (monotone
envelope) precision-recall curve; per-range AP buckets true positives by
the depth of their matched ground truth and false positives by their own
depth, both measured as BEV distance from the sensor origin recorded in
the scene file.

The translation/scale/orientation errors over true positives use their
own, looser association threshold (tp_iou_threshold): the headline AP
threshold (0.7 for cars) leaves too few true positives on heavily
mislocalized detections to measure how wrong they are.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .geometry import wrap_angle
from .iou import pairwise_bev_iou, pairwise_iou_3d


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    tp_iou_threshold: float = 0.1
    ranges: tuple[tuple[float, float], ...] = ((0.0, 30.0), (30.0, 50.0), (50.0, 80.0))
    hist_bins: int = 10
    recall_grid: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ConfigError("iou_threshold must be in (0, 1]")
        for lo, hi in self.ranges:
            if hi <= lo:
                raise ConfigError(f"bad depth range ({lo}, {hi})")

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "tp_iou_threshold": self.tp_iou_threshold,
            "ranges": [list(r) for r in self.ranges],
            "hist_bins": self.hist_bins,
            "recall_grid": list(self.recall_grid),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        d["ranges"] = tuple(tuple(r) for r in d["ranges"])
        d["recall_grid"] = tuple(d["recall_grid"])
        return cls(**d)


@dataclass
class MatchResult:
    """Outcome of one detection in one scene's matching."""

    det_index: int
    confidence: float
    matched_gt: int | None
    iou: float  # IoU with the matched gt (TP) or best available gt (FP)
    depth: float  # matched-gt depth for TPs, detection depth otherwise
    is_tp: bool
    pred_box: np.ndarray | None = None
    gt_box: np.ndarray | None = None


def _bev_depth(boxes: np.ndarray, sensor: np.ndarray) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros(0)
    return np.hypot(boxes[:, 0] - sensor[0], boxes[:, 1] - sensor[1])


def match_detections(
    pred_boxes: np.ndarray,
    confidences: np.ndarray,
    gt_boxes: np.ndarray,
    iou_kind: str,
    threshold: float,
    sensor_origin: np.ndarray,
) -> list[MatchResult]:
    """Greedy one-to-one matching of one scene's detections to its GT."""
    if iou_kind not in ("bev", "3d"):
        raise ConfigError(f"iou_kind must be 'bev' or '3d', got {iou_kind!r}")
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 7)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    confidences = np.asarray(confidences, dtype=np.float64)
    if confidences.shape != (len(pred_boxes),):
        raise DataError("one confidence per detection required")
    sensor = np.asarray(sensor_origin, dtype=np.float64)

    if len(pred_boxes) and len(gt_boxes):
        iou_fn = pairwise_bev_iou if iou_kind == "bev" else pairwise_iou_3d
        iou = iou_fn(pred_boxes, gt_boxes)
    else:
        iou = np.zeros((len(pred_boxes), len(gt_boxes)))
    det_depth = _bev_depth(pred_boxes, sensor)
    gt_depth = _bev_depth(gt_boxes, sensor)

    order = np.argsort(-confidences, kind="stable")
    gt_taken = np.zeros(len(gt_boxes), dtype=bool)
    results: list[MatchResult] = []
    for i in order:
        best_any = float(iou[i].max()) if len(gt_boxes) else 0.0
        available = ~gt_taken
        if available.any():
            cand = np.where(available)[0]
            j = cand[np.argmax(iou[i, cand])]
            best_avail = float(iou[i, j])
        else:
            j, best_avail = -1, 0.0
        if best_avail >= threshold and len(gt_boxes):
            gt_taken[j] = True
            results.append(
                MatchResult(
                    det_index=int(i),
                    confidence=float(confidences[i]),
                    matched_gt=int(j),
                    iou=best_avail,
                    depth=float(gt_depth[j]),
                    is_tp=True,
                    pred_box=pred_boxes[i],
                    gt_box=gt_boxes[j],
                )
            )
        else:
            results.append(
                MatchResult(
                    det_index=int(i),
                    confidence=float(confidences[i]),
                    matched_gt=None,
                    iou=best_any,
                    depth=float(det_depth[i]),
                    is_tp=False,
                    pred_box=pred_boxes[i],
                )
            )
    return results


def average_precision(matches: list[MatchResult], total_gt: int) -> float | None:
    """Area under the all-point-interpolated precision-recall curve.

    Returns None when there is no ground truth to recall (AP undefined).
    """
    if total_gt == 0:
        return None
    if not matches:
        return 0.0
    order = np.argsort([-m.confidence for m in matches], kind="stable")
    tp = np.array([matches[i].is_tp for i in order], dtype=np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def _aligned_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """3D IoU after aligning centers and yaw: a pure size comparison."""
    inter = float(np.prod(np.minimum(pred[3:6], gt[3:6])))
    union = float(np.prod(pred[3:6]) + np.prod(gt[3:6]) - inter)
    return inter / union if union > 0 else 0.0


def tp_metrics(matches: list[MatchResult]) -> dict | None:
    """ATE (m), ASE (1 - aligned IoU), AOE (rad) over true positives.

    Returns None when there is no true positive to measure.
    """
    tps = [m for m in matches if m.is_tp]
    if not tps:
        return None
    ate = float(np.mean([np.hypot(m.pred_box[0] - m.gt_box[0], m.pred_box[1] - m.gt_box[1]) for m in tps]))
    ase = float(np.mean([1.0 - _aligned_iou(m.pred_box, m.gt_box) for m in tps]))
    aoe = float(np.mean([abs(wrap_angle(m.pred_box[6] - m.gt_box[6])) for m in tps]))
    return {"ate": ate, "ase": ase, "aoe": aoe, "count": len(tps)}


@dataclass
class SceneEval:
    """One scene's inputs to the pooled evaluation."""

    pred_boxes: np.ndarray
    confidences: np.ndarray
    gt_boxes: np.ndarray
    sensor_origin: np.ndarray


def _range_key(lo: float, hi: float) -> str:
    return f"{lo:g}-{hi:g}"


def build_report(scenes: list[SceneEval], config: EvalConfig) -> dict:
    """Pool per-scene matchings into one metrics report dict."""
    ap_matches: dict[str, list[MatchResult]] = {"bev": [], "3d": []}
    loose_matches: list[MatchResult] = []
    gt_depths: list[np.ndarray] = []
    for sc in scenes:
        for kind in ("bev", "3d"):
            ap_matches[kind].extend(
                match_detections(sc.pred_boxes, sc.confidences, sc.gt_boxes, kind, config.iou_threshold, sc.sensor_origin)
            )
        loose_matches.extend(
            match_detections(sc.pred_boxes, sc.confidences, sc.gt_boxes, "3d", config.tp_iou_threshold, sc.sensor_origin)
        )
        gt_depths.append(_bev_depth(np.asarray(sc.gt_boxes, dtype=np.float64).reshape(-1, 7), sc.sensor_origin))
    all_gt_depth = np.concatenate(gt_depths) if gt_depths else np.zeros(0)

    gt_counts = {"all": int(len(all_gt_depth))}
    for lo, hi in config.ranges:
        gt_counts[_range_key(lo, hi)] = int(np.sum((all_gt_depth >= lo) & (all_gt_depth < hi)))

    def ap_table(matches: list[MatchResult]) -> dict:
        table = {"all": average_precision(matches, gt_counts["all"])}
        for lo, hi in config.ranges:
            key = _range_key(lo, hi)
            in_range = [m for m in matches if lo <= m.depth < hi]
            table[key] = average_precision(in_range, gt_counts[key])
        return table

    tps = [m for m in loose_matches if m.is_tp]
    edges = np.linspace(0.0, 1.0, config.hist_bins + 1)
    hist_counts, _ = np.histogram([m.iou for m in loose_matches], bins=edges)
    recall = {}
    for tau in config.recall_grid:
        recall[f"{tau:g}"] = (
            float(sum(1 for m in tps if m.iou >= tau) / gt_counts["all"]) if gt_counts["all"] else None
        )

    return {
        "config": config.to_dict(),
        "num_scenes": len(scenes),
        "num_detections": int(sum(len(sc.pred_boxes) for sc in scenes)),
        "gt_counts": gt_counts,
        "ap_bev": ap_table(ap_matches["bev"]),
        "ap_3d": ap_table(ap_matches["3d"]),
        "tp_errors": tp_metrics(loose_matches),
        "mean_matched_iou_3d": float(np.mean([m.iou for m in tps])) if tps else None,
        "iou_histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in hist_counts]},
        "recall_at_iou": recall,
    }


def compare_reports(before: dict, after: dict) -> dict:
    """Improvement-positive deltas between two reports on the same split."""
    if before["config"] != after["config"]:
        raise ConfigError("cannot compare reports with different eval configs")
    if before["gt_counts"] != after["gt_counts"]:
        raise ConfigError("cannot compare reports over different splits")

    def sub(a, b):
        if a is None or b is None:
            return None
        return a - b

    delta = {"config": before["config"], "ap_bev": {}, "ap_3d": {}, "recall_at_iou": {}}
    for key in before["ap_bev"]:
        delta["ap_bev"][key] = sub(after["ap_bev"][key], before["ap_bev"][key])
    for key in before["ap_3d"]:
        delta["ap_3d"][key] = sub(after["ap_3d"][key], before["ap_3d"][key])
    for key in before["recall_at_iou"]:
        delta["recall_at_iou"][key] = sub(after["recall_at_iou"].get(key), before["recall_at_iou"][key])
    tb, ta = before.get("tp_errors"), after.get("tp_errors")
    if tb and ta:
        # errors are improvement-positive when they go down
        delta["tp_errors"] = {k: tb[k] - ta[k] for k in ("ate", "ase", "aoe")}
    else:
        delta["tp_errors"] = None
    delta["mean_matched_iou_3d"] = sub(after.get("mean_matched_iou_3d"), before.get("mean_matched_iou_3d"))
    return delta
