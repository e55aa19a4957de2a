"""Run the evaluation protocol on a trained checkpoint and draw report figures."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .alignment import Predictor
from .checkpoint import StageCheckpoint
from .config import ExperimentConfig
from .dataset import SplitArrays, load_split
from .geometry import fov_mask, range_map
from .metrics import EvalReport, IoUAccumulator, distance_bins, report_from

logger = logging.getLogger(__name__)


def valid_masks(split: SplitArrays, cfg: ExperimentConfig, use_visibility: bool = True):
    """Per-sample evaluation masks.

    With visibility masking off, the whole FOV wedge counts (cells outside the
    wedge can never be predicted and are excluded either way).
    """
    if use_visibility:
        return split.visibility
    wedge = fov_mask(cfg.camera_model, cfg.gspec, cfg.polar.max_range)
    return np.broadcast_to(wedge, split.visibility.shape)


def evaluate_predictions(preds, split: SplitArrays, cfg: ExperimentConfig,
                         use_visibility: bool = True) -> EvalReport:
    """Pooled report for Cartesian soft maps ``preds`` aligned with ``split``."""
    if len(preds) != len(split):
        raise ValueError(f"{len(preds)} predictions for a split of {len(split)} samples")
    masks = valid_masks(split, cfg, use_visibility)
    bins, edges = distance_bins(range_map(cfg.gspec), cfg.polar.max_range, cfg.eval.bin_width)
    acc = IoUAccumulator(len(cfg.recipe.class_names), cfg.eval.thresholds, len(edges))
    for p, g, v in zip(preds, split.bev, masks):
        acc.add(p, g, v, bins)
    return report_from(acc, list(cfg.recipe.class_names), edges, use_visibility)


def evaluate_checkpoint(ckpt: StageCheckpoint, data, split: str = "val",
                        use_visibility: bool | None = None, limit: int | None = None,
                        batch_size: int = 32) -> EvalReport:
    """Evaluate an inferable checkpoint on a dataset root or in-memory split."""
    cfg = ckpt.experiment_config
    if use_visibility is None:
        use_visibility = cfg.eval.use_visibility
    if isinstance(data, (str, Path)):
        data = load_split(data, split, limit)
    elif limit is not None:
        data = data.subset(range(min(limit, len(data))))
    predictor = Predictor(ckpt, cfg)
    masks = valid_masks(data, cfg, use_visibility)
    bins, edges = distance_bins(range_map(cfg.gspec), cfg.polar.max_range, cfg.eval.bin_width)
    acc = IoUAccumulator(len(cfg.recipe.class_names), cfg.eval.thresholds, len(edges))
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        preds = predictor.predict(data.images[sl])
        for p, g, v in zip(preds, data.bev[sl], masks[sl]):
            acc.add(p, g, v, bins)
    return report_from(acc, list(cfg.recipe.class_names), edges, use_visibility)


def random_baseline(split: SplitArrays, cfg: ExperimentConfig,
                    use_visibility: bool = True) -> np.ndarray:
    """Best IoU of a prediction carrying no information about the scene.

    A map that marks a cell positive independently of the ground truth with
    probability q has expected IoU ``pq / (p + q - pq)``, maximised at q = 1
    where it equals the class frequency p inside the valid region.
    """
    masks = np.asarray(valid_masks(split, cfg, use_visibility), dtype=bool)
    valid = masks.sum()
    pos = (split.bev & masks[:, None]).sum(axis=(0, 2, 3))
    return pos / max(valid, 1)


# -- figures -----------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path: Path, manifest_id: str | None):
    meta = {"Description": f"manifest {manifest_id}"} if manifest_id else None
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=meta)


def plot_class_bars(report: EvalReport, path, manifest_id: str | None = None) -> Path:
    plt = _pyplot()
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(report.class_names, report.per_class_iou, color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title(f"per-class IoU (mean {report.mean_iou:.3f})")
    if manifest_id:
        fig.text(0.01, 0.01, f"manifest {manifest_id}", fontsize=6, color="gray")
    fig.tight_layout()
    _save(fig, path, manifest_id)
    plt.close(fig)
    return path


def plot_distance(report: EvalReport, path, manifest_id: str | None = None) -> Path:
    plt = _pyplot()
    path = Path(path)
    mids = [sum(b["range"]) / 2 for b in report.distance_bins]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name in report.strata:
        ax.plot(mids, [b["strata"].get(name, np.nan) for b in report.distance_bins],
                marker="o", label=name)
    ax.plot(mids, [b["mean_iou"] for b in report.distance_bins], marker="s", color="k",
            label="mean")
    ax.set_xlabel("distance (m)")
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    if manifest_id:
        fig.text(0.01, 0.01, f"manifest {manifest_id}", fontsize=6, color="gray")
    fig.tight_layout()
    _save(fig, path, manifest_id)
    plt.close(fig)
    return path


_PALETTE = np.array([[0.55, 0.55, 0.55], [1.0, 1.0, 1.0], [0.9, 0.75, 0.4],
                     [0.1, 0.3, 0.9], [0.0, 0.6, 0.6], [0.9, 0.1, 0.1]])


def colorize(bev: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """RGB rendering of a ``(K, H, W)`` map, later classes drawn on top.

    The forward axis points up in the rendering.
    """
    k, h, w = bev.shape
    out = np.zeros((h, w, 3))
    for c in range(k):
        out[bev[c] >= threshold] = _PALETTE[c % len(_PALETTE)]
    return out[::-1]


def plot_sample(image: np.ndarray, pred: np.ndarray, path, gt: np.ndarray | None = None,
                visibility: np.ndarray | None = None, manifest_id: str | None = None,
                threshold: float = 0.5) -> Path:
    """Side-by-side image / prediction (/ ground truth) figure."""
    plt = _pyplot()
    path = Path(path)
    panels = 3 if gt is not None else 2
    fig, axes = plt.subplots(1, panels, figsize=(4 * panels, 3.2))
    img = image.transpose(1, 2, 0) if image.shape[0] == 3 else image
    axes[0].imshow(img.astype(np.float64) / (255.0 if img.dtype == np.uint8 else 1.0))
    axes[0].set_title("image")
    axes[1].imshow(colorize(pred, threshold))
    axes[1].set_title("prediction")
    if gt is not None:
        shown = colorize(gt.astype(np.float64))
        if visibility is not None:
            shown = shown * np.where(visibility[::-1, :, None], 1.0, 0.4)
        axes[2].imshow(shown)
        axes[2].set_title("ground truth")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    if manifest_id:
        fig.text(0.01, 0.01, f"manifest {manifest_id}", fontsize=6, color="gray")
    fig.tight_layout()
    _save(fig, path, manifest_id)
    plt.close(fig)
    return path
