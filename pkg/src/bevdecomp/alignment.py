"""Stages II and III: image -> BEV latent alignment and decoder fine-tuning.

The jointly trained end-to-end baseline (task decomposition ablated) lives
here too, since it shares the image pipeline.
"""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F

from .autoencoder import (autoencoder_from, build_autoencoder, compute_class_weights,
                          init_output_bias, weighted_bce)
from .checkpoint import (INFERABLE, StageCheckpoint, check_compatible, check_parent,
                         check_stage)
from .config import ExperimentConfig, PreprocConfig
from .geometry import coarse_to_cart, fov_mask, polar_to_cart
from .nets import AlignmentNet
from .training import (StageTrainer, batched, class_frequencies, freeze, load_params,
                       params_of, seed_everything, stage_data)

logger = logging.getLogger(__name__)


def preprocess(image, spec: PreprocConfig) -> torch.Tensor:
    """Resize (bilinear), bottom-crop and normalise images.

    ``image`` is ``(H, W, 3)`` / ``(N, H, W, 3)`` numpy data, or an
    ``(N, 3, H, W)`` tensor; uint8 input is scaled to [0, 1]. Returns a float32
    ``(N, 3, crop_height, resize_width)`` tensor.
    """
    if isinstance(image, np.ndarray):
        arr = image[None] if image.ndim == 3 else image
        if arr.ndim != 4 or arr.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) image data, got {image.shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    else:
        x = image if image.dim() == 4 else image[None]
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) images, got {tuple(x.shape)}")
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ValueError(f"degenerate image dimensions {tuple(x.shape[2:])}")
    x = x.float() / 255.0 if x.dtype == torch.uint8 else x.float()
    size = (spec.resize_height, spec.resize_width)
    if tuple(x.shape[2:]) != size:
        down = x.shape[2] > size[0] or x.shape[3] > size[1]
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False,
                          antialias=down)
    x = x[:, :, spec.resize_height - spec.crop_height:, :]
    mean = torch.tensor(spec.mean, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(spec.std, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - mean) / std


def build_alignment(cfg: ExperimentConfig) -> AlignmentNet:
    m = cfg.model
    return AlignmentNet(cfg.feature_shape[0], m.feature_channels, m.latent_channels,
                        cfg.ablation.cwt, m.transformer_layers, m.transformer_heads,
                        m.transformer_ff_mult, tuple(m.backbone_widths))


def extract_features(x: torch.Tensor, net: AlignmentNet, cfg: ExperimentConfig):
    """Stride-4 feature map ``f = F(x)``."""
    expect = (3, cfg.preprocess.crop_height, cfg.preprocess.resize_width)
    if x.dim() != 4 or tuple(x.shape[1:]) != expect:
        raise ValueError(f"expected input (N, {expect}), got {tuple(x.shape)}")
    return net.backbone(x)


def column_transform(f: torch.Tensor, net: AlignmentNet) -> torch.Tensor:
    """Column-wise sequence transform; identity when the transformer is ablated."""
    if f.dim() != 4:
        raise ValueError(f"expected (N, C, H, W) features, got {tuple(f.shape)}")
    return net.transformer(f)


def latent_head(t: torch.Tensor, net: AlignmentNet, cfg: ExperimentConfig) -> torch.Tensor:
    """Reduce the feature map to the latent grid: ``z_hat = conv(t)``."""
    fh, fw = cfg.feature_shape
    if t.dim() != 4 or tuple(t.shape[1:]) != (cfg.model.feature_channels, fh, fw):
        raise ValueError(f"expected features (N, {cfg.model.feature_channels}, {fh}, {fw}), "
                         f"got {tuple(t.shape)}")
    return net.head(t)


def mse_loss(z_hat: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    if z_hat.shape != z.shape:
        raise ValueError(f"shape mismatch {tuple(z_hat.shape)} vs {tuple(z.shape)}")
    return ((z_hat - z) ** 2).mean()


def predict_latent(images: torch.Tensor, net: AlignmentNet, cfg: ExperimentConfig):
    x = preprocess(images, cfg.preprocess)
    f = extract_features(x, net, cfg)
    return latent_head(column_transform(f, net), net, cfg)


def to_cartesian(soft: np.ndarray, cfg: ExperimentConfig) -> np.ndarray:
    """Map network-raster predictions ``(..., K, R, A)`` onto the Cartesian grid."""
    if cfg.ablation.cst:
        return polar_to_cart(soft, cfg.camera_model, cfg.gspec, cfg.pspec,
                             method=cfg.eval.resample).astype(np.float32)
    out = coarse_to_cart(soft, cfg.gspec, cfg.cspec)
    mask = fov_mask(cfg.camera_model, cfg.gspec, cfg.polar.max_range)
    return np.where(mask, out, 0).astype(np.float32)


def _lineage(parent: StageCheckpoint | None):
    if parent is None:
        return []
    return list(parent.lineage) + [parent.checkpoint_id]


def _ckpt_factory(stage, modules, cfg, parent, extra):
    def make(tr):
        return StageCheckpoint(
            stage, params_of(modules), cfg.to_dict(), epoch=tr.epoch,
            history={k: list(v) for k, v in tr.history.items()}, **tr.state(),
            lineage=_lineage(parent), extra=dict(extra))
    return make


def _resume(trainer, modules, resume, stage):
    if resume is None:
        return
    check_stage(resume, stage)
    load_params(modules, resume)
    trainer.restore(resume)


def train_stage2(data, ae_ckpt: StageCheckpoint, cfg: ExperimentConfig, val=None,
                 resume: StageCheckpoint | None = None, epochs: int | None = None,
                 checkpoint_path=None, snapshot_dir=None,
                 allow_mismatch: bool = False) -> StageCheckpoint:
    """Regress the frozen encoder's clean latents from images with MSE."""
    check_parent("align", ae_ckpt)
    check_compatible(ae_ckpt, cfg, allow_mismatch)
    seed_everything(cfg.seed)
    train = stage_data(data, cfg, "train")
    valid = stage_data(val, cfg, "val") if val is not None else None
    ae = autoencoder_from(ae_ckpt, cfg)
    freeze(ae)
    align = build_alignment(cfg)
    modules = {"encoder": ae.encoder, "decoder": ae.decoder, "backbone": align.backbone,
               "transformer": align.transformer, "head": align.head}
    z_train = batched(ae.encoder, train.targets)
    z_val = batched(ae.encoder, valid.targets) if valid is not None else None
    trainer = StageTrainer("align", modules, ["backbone", "transformer", "head"],
                           cfg.train.align, cfg, len(train))
    _resume(trainer, modules, resume, "align")

    def loss_fn(idx, gen):
        return mse_loss(predict_latent(train.images[idx], align, cfg), z_train[idx])

    val_fn = None
    if valid is not None:
        def val_fn():
            z_hat = batched(lambda b: predict_latent(b, align, cfg), valid.images)
            return mse_loss(z_hat, z_val).item()

    extra = {"class_weights": ae_ckpt.extra.get("class_weights"), "lr": cfg.train.align.lr}
    make = _ckpt_factory("align", modules, cfg, ae_ckpt, extra)
    on_epoch = (lambda tr: make(tr).save(checkpoint_path)) if checkpoint_path else None
    trainer.run(loss_fn, epochs, val_fn, on_epoch, snapshot_dir)
    return make(trainer)


def train_stage3_finetune(data, align_ckpt: StageCheckpoint, cfg: ExperimentConfig,
                          val=None, resume: StageCheckpoint | None = None,
                          epochs: int | None = None, checkpoint_path=None,
                          snapshot_dir=None, allow_mismatch: bool = False) -> StageCheckpoint:
    """Fine-tune only the decoder on the frozen pipeline's latents with weighted BCE."""
    check_parent("finetune", align_ckpt)
    check_compatible(align_ckpt, cfg, allow_mismatch)
    seed_everything(cfg.seed)
    train = stage_data(data, cfg, "train")
    valid = stage_data(val, cfg, "val") if val is not None else None
    ae = autoencoder_from(align_ckpt, cfg)
    align = build_alignment(cfg)
    modules = {"encoder": ae.encoder, "decoder": ae.decoder, "backbone": align.backbone,
               "transformer": align.transformer, "head": align.head}
    load_params(modules, align_ckpt)
    freeze(align)
    freeze(ae.encoder)
    # the pipeline is frozen, so its latents can be computed once
    zh_train = batched(lambda b: predict_latent(b, align, cfg), train.images)
    zh_val = (batched(lambda b: predict_latent(b, align, cfg), valid.images)
              if valid is not None else None)
    w = align_ckpt.extra.get("class_weights")
    if w is None:
        w = compute_class_weights(class_frequencies(train.targets), cfg.train.weight_clip)
    w = torch.as_tensor(np.asarray(w), dtype=torch.float32)
    eps = cfg.train.bce_eps
    trainer = StageTrainer("finetune", modules, ["decoder"], cfg.train.finetune, cfg,
                           len(train))
    _resume(trainer, modules, resume, "finetune")

    def loss_fn(idx, gen):
        return weighted_bce(torch.sigmoid(ae.decoder(zh_train[idx])), train.targets[idx], w, eps)

    val_fn = None
    if valid is not None:
        def val_fn():
            pred = batched(lambda b: torch.sigmoid(ae.decoder(b)), zh_val)
            return weighted_bce(pred, valid.targets, w, eps).item()

    extra = {"class_weights": w.tolist(), "lr": cfg.train.finetune.lr}
    make = _ckpt_factory("finetune", modules, cfg, align_ckpt, extra)
    on_epoch = (lambda tr: make(tr).save(checkpoint_path)) if checkpoint_path else None
    trainer.run(loss_fn, epochs, val_fn, on_epoch, snapshot_dir)
    return make(trainer)


def train_joint(data, cfg: ExperimentConfig, val=None, resume: StageCheckpoint | None = None,
                epochs: int | None = None, checkpoint_path=None,
                snapshot_dir=None) -> StageCheckpoint:
    """End-to-end baseline: pipeline and decoder trained together with weighted BCE."""
    check_parent("joint", None)
    seed_everything(cfg.seed)
    train = stage_data(data, cfg, "train")
    valid = stage_data(val, cfg, "val") if val is not None else None
    ae = build_autoencoder(cfg)
    align = build_alignment(cfg)
    modules = {"decoder": ae.decoder, "backbone": align.backbone,
               "transformer": align.transformer, "head": align.head}
    freqs = class_frequencies(train.targets)
    init_output_bias(ae.decoder, freqs)
    w = torch.as_tensor(compute_class_weights(freqs, cfg.train.weight_clip), dtype=torch.float32)
    eps = cfg.train.bce_eps
    trainer = StageTrainer("joint", modules, ["decoder", "backbone", "transformer", "head"],
                           cfg.train.joint, cfg, len(train))
    _resume(trainer, modules, resume, "joint")

    def forward(images):
        return torch.sigmoid(ae.decoder(predict_latent(images, align, cfg)))

    def loss_fn(idx, gen):
        return weighted_bce(forward(train.images[idx]), train.targets[idx], w, eps)

    val_fn = None
    if valid is not None:
        def val_fn():
            return weighted_bce(batched(forward, valid.images), valid.targets, w, eps).item()

    extra = {"class_weights": w.tolist(), "lr": cfg.train.joint.lr}
    make = _ckpt_factory("joint", modules, cfg, None, extra)
    on_epoch = (lambda tr: make(tr).save(checkpoint_path)) if checkpoint_path else None
    trainer.run(loss_fn, epochs, val_fn, on_epoch, snapshot_dir)
    return make(trainer)


class Predictor:
    """Frozen inference pipeline built from an ``align``/``finetune``/``joint`` checkpoint."""

    def __init__(self, ckpt: StageCheckpoint, cfg: ExperimentConfig | None = None):
        check_stage(ckpt, INFERABLE)
        self.ckpt = ckpt
        self.cfg = cfg or ckpt.experiment_config
        missing = [c for c in ("decoder", "backbone", "head") if not ckpt.component(c)]
        if missing:
            raise ValueError(f"checkpoint lacks trained components: {missing}")
        ae = build_autoencoder(self.cfg)
        self.decoder = ae.decoder
        self.align = build_alignment(self.cfg)
        load_params({"decoder": self.decoder, "backbone": self.align.backbone,
                     "transformer": self.align.transformer, "head": self.align.head}, ckpt)
        freeze(self.decoder)
        freeze(self.align)

    def latent(self, images) -> torch.Tensor:
        return batched(lambda b: predict_latent(b, self.align, self.cfg), _as_batch(images))

    def predict_raster(self, images) -> np.ndarray:
        """Soft maps on the network raster (polar or coarse Cartesian)."""
        z = self.latent(images)
        return batched(lambda b: torch.sigmoid(self.decoder(b)), z).numpy()

    def predict(self, images) -> np.ndarray:
        """Soft Cartesian maps ``(N, K, H, W)`` over the configured grid."""
        return to_cartesian(self.predict_raster(images), self.cfg)


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, np.ndarray):
        if images.ndim == 3:
            images = images[None]
        if images.shape[-1] == 3 and images.shape[1] != 3:
            images = images.transpose(0, 3, 1, 2)
        images = torch.from_numpy(np.ascontiguousarray(images))
    return images if images.dim() == 4 else images[None]


def infer(image, ckpt: StageCheckpoint) -> np.ndarray:
    """Soft Cartesian BEV map ``(K, H, W)`` for a single image."""
    return Predictor(ckpt).predict(image)[0]
