"""Shared training loop, data preparation and reproducibility helpers."""
from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .checkpoint import StageCheckpoint
from .config import ExperimentConfig, StageConfig
from .dataset import SplitArrays, load_split
from .geometry import cart_to_coarse, cart_to_polar, fov_mask
from .optim import make_optimizer, warmup_cosine

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def to_targets(bev: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    """Training targets in the configured representation, shape ``(N, K, R, A)``.

    With the coordinate transform enabled this is the polar map; otherwise the
    FOV-restricted Cartesian map downsampled to the same raster size.
    """
    if cfg.ablation.cst:
        return cart_to_polar(bev, cfg.camera_model, cfg.gspec, cfg.pspec)
    masked = bev & fov_mask(cfg.camera_model, cfg.gspec, cfg.polar.max_range)
    return cart_to_coarse(masked, cfg.gspec, cfg.cspec)


@dataclass
class StageData:
    """Tensors for one split: uint8 images and float targets."""

    images: torch.Tensor
    targets: torch.Tensor
    split: SplitArrays | None = None

    def __len__(self):
        return self.targets.shape[0]


def stage_data(data, cfg: ExperimentConfig, split: str = "train",
               limit: int | None = None, need_images: bool = True) -> StageData:
    """Accept a dataset root, a :class:`SplitArrays` or a :class:`StageData`."""
    if isinstance(data, StageData):
        return data
    if isinstance(data, (str, Path)):
        data = load_split(data, split, limit)
    elif limit is not None:
        data = data.subset(range(min(limit, len(data))))
    targets = torch.from_numpy(to_targets(data.bev, cfg).astype(np.float32))
    images = torch.from_numpy(data.images) if need_images else torch.empty(0)
    return StageData(images, targets, data)


def class_frequencies(targets: torch.Tensor) -> np.ndarray:
    return targets.double().mean(dim=(0, 2, 3)).numpy()


def params_of(modules: dict[str, nn.Module]) -> dict:
    """Flatten component state dicts into hierarchical names (cloned)."""
    out = {}
    for prefix, m in modules.items():
        for k, v in m.state_dict().items():
            out[f"{prefix}.{k}"] = v.detach().clone()
    return out


def load_params(modules: dict[str, nn.Module], ckpt: StageCheckpoint):
    for prefix, m in modules.items():
        state = ckpt.component(prefix)
        if state:
            m.load_state_dict(state)


def freeze(module: nn.Module):
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


class StageTrainer:
    """Mini-batch loop with warm-up/cosine schedule, resumable state.

    ``loss_fn(idx, noise_gen)`` returns the scalar loss for the samples in
    ``idx``. Trainable modules are put in train mode before every epoch,
    frozen ones in eval mode.
    """

    def __init__(self, stage: str, modules: dict[str, nn.Module], trainable: list[str],
                 stage_cfg: StageConfig, cfg: ExperimentConfig, n_samples: int):
        self.stage = stage
        self.modules = modules
        self.trainable = trainable
        self.stage_cfg = stage_cfg
        self.cfg = cfg
        self.n = n_samples
        tc = cfg.train
        params = [p for name in trainable for p in modules[name].parameters()]
        self.optimizer = make_optimizer(params, tc.optimizer, stage_cfg.lr, tc.betas,
                                        tc.weight_decay)
        self.steps_per_epoch = math.ceil(n_samples / stage_cfg.batch_size)
        self.scheduler = warmup_cosine(self.optimizer,
                                       self.steps_per_epoch * stage_cfg.epochs,
                                       tc.warmup_frac, tc.cosine)
        self.shuffle_gen = torch.Generator().manual_seed(cfg.seed * 1000 + 1)
        self.noise_gen = torch.Generator().manual_seed(cfg.seed * 1000 + 2)
        self.epoch = 0
        self.history = {"train_loss": [], "val_loss": []}

    def state(self) -> dict:
        return {"optimizer": self.optimizer.state_dict(),
                "scheduler": self.scheduler.state_dict(),
                "rng": {"shuffle": self.shuffle_gen.get_state(),
                        "noise": self.noise_gen.get_state(),
                        "torch": torch.get_rng_state()}}

    def restore(self, ckpt: StageCheckpoint):
        if ckpt.optimizer is None:
            raise TrainingError("checkpoint carries no optimizer state to resume from")
        self.optimizer.load_state_dict(ckpt.optimizer)
        self.scheduler.load_state_dict(ckpt.scheduler)
        self.shuffle_gen.set_state(ckpt.rng["shuffle"])
        self.noise_gen.set_state(ckpt.rng["noise"])
        torch.set_rng_state(ckpt.rng["torch"])
        self.epoch = ckpt.epoch
        self.history = {k: list(v) for k, v in ckpt.history.items()}

    def _set_modes(self):
        for name, m in self.modules.items():
            if name in self.trainable:
                m.train()
            else:
                m.eval()

    def run(self, loss_fn: Callable, epochs: int | None = None,
            val_fn: Callable | None = None, on_epoch: Callable | None = None,
            snapshot_dir: str | Path | None = None):
        """Train until ``epochs`` (default: the stage's configured total)."""
        end = self.stage_cfg.epochs if epochs is None else min(epochs, self.stage_cfg.epochs)
        bs = self.stage_cfg.batch_size
        while self.epoch < end:
            self._set_modes()
            perm = torch.randperm(self.n, generator=self.shuffle_gen)
            total, count = 0.0, 0
            for b in range(self.steps_per_epoch):
                idx = perm[b * bs:(b + 1) * bs]
                loss = loss_fn(idx, self.noise_gen)
                if not torch.isfinite(loss):
                    self._snapshot(snapshot_dir, idx)
                    raise TrainingError(
                        f"non-finite loss in stage {self.stage!r} at epoch {self.epoch}, "
                        f"batch {b}")
                self.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                self.optimizer.step()
                self.scheduler.step()
                total += loss.item() * len(idx)
                count += len(idx)
            self.epoch += 1
            self.history["train_loss"].append(total / count)
            if val_fn is not None:
                for m in self.modules.values():
                    m.eval()
                with torch.no_grad():
                    self.history["val_loss"].append(float(val_fn()))
            logger.info("stage %s epoch %d/%d train %.5f%s", self.stage, self.epoch, end,
                        self.history["train_loss"][-1],
                        f" val {self.history['val_loss'][-1]:.5f}" if val_fn else "")
            if on_epoch is not None:
                on_epoch(self)
        for m in self.modules.values():
            m.eval()
        return self.history

    def _snapshot(self, snapshot_dir, idx):
        if snapshot_dir is None:
            return
        path = Path(snapshot_dir) / f"diverged-{self.stage}-epoch{self.epoch}.pt"
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"params": params_of(self.modules), "batch": idx.tolist(),
                    "epoch": self.epoch, "history": self.history}, path)
        logger.error("wrote diagnostic snapshot to %s", path)


def batched(fn, tensor: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([fn(tensor[i:i + batch_size])
                          for i in range(0, tensor.shape[0], batch_size)])
