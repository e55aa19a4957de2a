"""Per-class binary IoU with threshold sweep, visibility masking and distance bins.

Intersections and unions are pooled over the whole split before the IoU is
taken (not averaged per image). A class whose prediction and ground truth are
both empty inside the valid region scores 1.0 and is flagged.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .synth import CLASS_NAMES, STRATA

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))


def iou(pred, gt, valid, threshold: float) -> float:
    """IoU of ``pred >= threshold`` against ``gt`` restricted to ``valid``."""
    pred, gt, valid = np.asarray(pred), np.asarray(gt, dtype=bool), np.asarray(valid, dtype=bool)
    if pred.shape != gt.shape or np.broadcast_shapes(gt.shape, valid.shape) != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, valid {valid.shape}")
    p = pred >= threshold
    inter = np.count_nonzero(p & gt & valid)
    union = np.count_nonzero((p | gt) & valid)
    return 1.0 if union == 0 else inter / union


def best_iou(pred, gt, valid, thresholds=DEFAULT_THRESHOLDS) -> tuple[float, float]:
    """Maximum IoU over the threshold grid and the lowest threshold attaining it."""
    ts = sorted(thresholds)
    if not ts:
        raise ValueError("threshold grid is empty")
    acc = IoUAccumulator(1, ts, n_bins=0)
    acc.add(np.asarray(pred)[None], np.asarray(gt)[None], np.broadcast_to(valid, np.shape(gt)))
    values = acc.iou()[0]
    k = int(np.argmax(values))
    return float(values[k]), float(ts[k])


class IoUAccumulator:
    """Pooled true-positive / false-positive / false-negative counts.

    Counts have shape ``(K, T)`` overall and ``(B, K, T)`` per distance bin.
    Accumulators merge associatively with ``+=``.
    """

    def __init__(self, n_classes: int, thresholds, n_bins: int = 0):
        self.thresholds = np.asarray(sorted(thresholds), dtype=np.float64)
        if self.thresholds.size == 0:
            raise ValueError("threshold grid is empty")
        t = self.thresholds.size
        self.n_classes = n_classes
        self.n_bins = n_bins
        self.tp = np.zeros((n_classes, t), dtype=np.int64)
        self.fp = np.zeros((n_classes, t), dtype=np.int64)
        self.pos = np.zeros((n_classes,), dtype=np.int64)
        self.bin_tp = np.zeros((n_bins, n_classes, t), dtype=np.int64)
        self.bin_fp = np.zeros((n_bins, n_classes, t), dtype=np.int64)
        self.bin_pos = np.zeros((n_bins, n_classes), dtype=np.int64)
        self.samples = 0

    def add(self, pred, gt, valid, bin_index=None):
        """Add one sample: ``pred``/``gt`` ``(K, H, W)``, ``valid`` ``(H, W)``.

        ``bin_index`` assigns every cell to a distance bin (``-1``: none).
        """
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        if pred.shape != gt.shape or pred.shape[0] != self.n_classes:
            raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}")
        if valid.shape != gt.shape[-2:] and valid.shape != gt.shape:
            raise ValueError(f"mask shape {valid.shape} does not match {gt.shape}")
        valid = np.broadcast_to(valid, gt.shape)
        t = self.thresholds.size
        # number of thresholds each prediction clears: pred >= t_m  <=>  level > m
        level = np.searchsorted(self.thresholds, pred, side="right")
        for k in range(self.n_classes):
            v = valid[k]
            g = gt[k] & v
            ng = ~gt[k] & v
            lk = level[k]
            self.pos[k] += np.count_nonzero(g)
            self.tp[k] += _cleared(lk[g], t)
            self.fp[k] += _cleared(lk[ng], t)
            if self.n_bins:
                b = bin_index
                bg, bng = b[g], b[ng]
                keep_g, keep_ng = bg >= 0, bng >= 0
                self.bin_pos[:, k] += np.bincount(bg[keep_g], minlength=self.n_bins)[:self.n_bins]
                self.bin_tp[:, k] += _cleared_binned(lk[g][keep_g], bg[keep_g], t, self.n_bins)
                self.bin_fp[:, k] += _cleared_binned(lk[ng][keep_ng], bng[keep_ng], t,
                                                     self.n_bins)
        self.samples += 1

    def __iadd__(self, other: "IoUAccumulator"):
        if not np.array_equal(self.thresholds, other.thresholds) or \
                (self.n_classes, self.n_bins) != (other.n_classes, other.n_bins):
            raise ValueError("cannot merge accumulators with different layouts")
        for name in ("tp", "fp", "pos", "bin_tp", "bin_fp", "bin_pos", "samples"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    @staticmethod
    def _iou(tp, fp, pos):
        union = pos[..., None] + fp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union == 0, 1.0, tp / np.maximum(union, 1))

    def iou(self) -> np.ndarray:
        """IoU per class and threshold, ``(K, T)``."""
        return self._iou(self.tp, self.fp, self.pos)

    def bin_iou(self) -> np.ndarray:
        return self._iou(self.bin_tp, self.bin_fp, self.bin_pos)


def _cleared(levels, t):
    hist = np.bincount(levels, minlength=t + 1)
    # count of cells whose level exceeds m, for m = 0..t-1
    return np.cumsum(hist[::-1])[::-1][1:]


def _cleared_binned(levels, bins, t, n_bins):
    hist = np.zeros((n_bins, t + 1), dtype=np.int64)
    np.add.at(hist, (bins, levels), 1)
    return np.cumsum(hist[:, ::-1], axis=1)[:, ::-1][:, 1:]


def distance_bins(range_map: np.ndarray, max_range: float = 50.0, width: float = 5.0):
    """Bin index of every cell by metric range (``-1`` beyond ``max_range``)."""
    n = int(round(max_range / width))
    idx = np.floor(range_map / width).astype(np.int64)
    idx[(idx >= n) | (range_map >= max_range)] = -1
    edges = [(i * width, (i + 1) * width) for i in range(n)]
    return idx, edges


@dataclass
class EvalReport:
    class_names: list
    per_class_iou: list
    best_threshold: list
    mean_iou: float
    strata: dict
    distance_bins: list
    samples: int
    empty_classes: list = field(default_factory=list)
    visibility_masked: bool = True
    manifest_id: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def stratum_means(values, class_names=CLASS_NAMES, strata=STRATA) -> dict:
    out = {}
    for name, members in strata.items():
        idx = [class_names.index(c) for c in members if c in class_names]
        if idx:
            out[name] = float(np.mean([values[i] for i in idx]))
    return out


def report_from(acc: IoUAccumulator, class_names=CLASS_NAMES, edges=(),
                visibility_masked: bool = True) -> EvalReport:
    table = acc.iou()
    best = table.argmax(axis=1)
    per_class = [float(table[k, best[k]]) for k in range(acc.n_classes)]
    thresholds = [float(acc.thresholds[b]) for b in best]
    fp_best = acc.fp[np.arange(acc.n_classes), best]
    empty = [class_names[k] for k in range(acc.n_classes)
             if acc.pos[k] == 0 and fp_best[k] == 0]
    bins = []
    if acc.n_bins:
        btable = acc.bin_iou()
        for b, (lo, hi) in enumerate(edges):
            vals = [float(btable[b, k, best[k]]) for k in range(acc.n_classes)]
            bfp = acc.bin_fp[b, np.arange(acc.n_classes), best]
            flagged = [class_names[k] for k in range(acc.n_classes)
                       if acc.bin_pos[b, k] == 0 and bfp[k] == 0]
            bins.append({"range": [lo, hi], "per_class_iou": vals,
                         "mean_iou": float(np.mean(vals)),
                         "strata": stratum_means(vals, class_names),
                         "gt_cells": acc.bin_pos[b].tolist(), "empty_classes": flagged})
    return EvalReport(list(class_names), per_class, thresholds, float(np.mean(per_class)),
                      stratum_means(per_class, class_names), bins, acc.samples, empty,
                      visibility_masked)


def evaluate(preds, gts, visibility=None, thresholds=DEFAULT_THRESHOLDS,
             range_map: np.ndarray | None = None, max_range: float = 50.0,
             bin_width: float = 5.0, class_names=CLASS_NAMES, ids=None,
             gt_ids=None) -> EvalReport:
    """Dataset-level evaluation.

    ``preds``/``gts`` are iterables of ``(K, H, W)`` arrays (or stacked
    arrays), ``visibility`` of ``(H, W)`` masks or ``None`` to disable masking.
    When ``ids`` and ``gt_ids`` are given they must match element-wise.
    """
    if ids is not None and gt_ids is not None and list(ids) != list(gt_ids):
        raise ValueError("prediction and ground-truth sample ids are misaligned")
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    masks = [None] * len(gts) if visibility is None else list(visibility)
    if len(masks) != len(gts):
        raise ValueError("visibility masks are misaligned with the ground truth")
    edges, bin_index, n_bins = (), None, 0
    if range_map is not None:
        bin_index, edges = distance_bins(range_map, max_range, bin_width)
        n_bins = len(edges)
    acc = IoUAccumulator(len(class_names), thresholds, n_bins)
    for p, g, v in zip(preds, gts, masks):
        if v is None:
            v = np.ones(np.shape(g)[-2:], dtype=bool)
        acc.add(p, g, v, bin_index)
    return report_from(acc, class_names, edges, visibility is not None)
