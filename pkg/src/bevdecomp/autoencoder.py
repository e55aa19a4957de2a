"""Stage I: the BEV autoencoder trained to reconstruct from noised latents."""
from __future__ import annotations

import logging
import math
import warnings

import numpy as np
import torch

from .checkpoint import StageCheckpoint, check_parent
from .config import ExperimentConfig
from .nets import BevAutoencoderNet
from .training import (StageTrainer, batched, class_frequencies, load_params, params_of,
                       seed_everything, stage_data)

logger = logging.getLogger(__name__)


def build_autoencoder(cfg: ExperimentConfig) -> BevAutoencoderNet:
    return BevAutoencoderNet(len(cfg.recipe.class_names), cfg.model.latent_channels,
                             tuple(cfg.model.ae_widths), cfg.model.latent_norm)


def _check_shape(t: torch.Tensor, shape, what: str):
    if t.dim() != 4 or tuple(t.shape[1:]) != tuple(shape):
        raise ValueError(f"{what} must have shape (N, {', '.join(map(str, shape))}), "
                         f"got {tuple(t.shape)}")


def encode(y: torch.Tensor, net: BevAutoencoderNet, cfg: ExperimentConfig) -> torch.Tensor:
    """Latent grid ``z = E(y)`` for polar maps ``y`` of shape ``(N, K, R, A)``."""
    _check_shape(y, (len(cfg.recipe.class_names),) + cfg.target_shape, "BEV map")
    return net.encoder(y)


def decode(z: torch.Tensor, net: BevAutoencoderNet, cfg: ExperimentConfig) -> torch.Tensor:
    """Soft map ``D(z)`` in (0, 1)."""
    _check_shape(z, cfg.latent_shape, "latent")
    return torch.sigmoid(net.decoder(z))


def corrupt(z: torch.Tensor, eta: float, generator: torch.Generator | None = None):
    """Mix the latent with standard normal noise: ``sqrt(1-eta) z + sqrt(eta) eps``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if eta == 0.0:
        return z.clone()
    eps = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    if eta == 1.0:
        return eps
    return math.sqrt(1.0 - eta) * z + math.sqrt(eta) * eps


def weighted_bce(y_hat: torch.Tensor, y: torch.Tensor, w, eps: float = 1e-7) -> torch.Tensor:
    """Class-weighted binary cross-entropy averaged over batch, cells and channels.

    ``y_hat`` and ``y`` are ``(N, K, H, W)`` (or ``(K, H, W)``); ``w`` holds one
    weight per channel ``K``.
    """
    if y_hat.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("targets must be binary")
    w = torch.as_tensor(w, dtype=y_hat.dtype, device=y_hat.device)
    k_axis = y.dim() - 3
    if w.numel() != y.shape[k_axis]:
        raise ValueError(f"expected {y.shape[k_axis]} class weights, got {w.numel()}")
    p = y_hat.clamp(eps, 1.0 - eps)
    per = -(y * torch.log(p) + (1 - y) * torch.log1p(-p))
    shape = [1] * y.dim()
    shape[k_axis] = -1
    return (per * w.view(shape)).mean()


def compute_class_weights(source, clip=(0.1, 10.0), representation: str = "polar"):
    """Reciprocal-frequency class weights, clipped then normalised to mean 1.

    ``source`` is a dataset manifest (frequencies are read from
    ``class_frequencies[representation]``) or a sequence of frequencies.
    """
    if isinstance(source, dict):
        freqs = source["class_frequencies"][representation]
    else:
        freqs = source
    freqs = np.asarray(freqs, dtype=np.float64)
    w_min, w_max = clip
    with np.errstate(divide="ignore", over="ignore"):
        w = np.where(freqs > 0, 1.0 / np.where(freqs > 0, freqs, 1.0), np.inf)
    if np.any(freqs <= 0):
        warnings.warn("class with zero frequency; assigning the maximum weight",
                      RuntimeWarning, stacklevel=2)
    w = np.clip(w, w_min, w_max)
    return w / w.mean()


def reconstruct(y: torch.Tensor, net: BevAutoencoderNet, cfg: ExperimentConfig,
                eta: float | None = None, seed: int = 0, batch_size: int = 64):
    """``D(corrupt(E(y)))`` in eval mode with seeded noise."""
    eta = cfg.train.eta if eta is None else eta
    gen = torch.Generator().manual_seed(seed)
    net.eval()
    return batched(lambda b: decode(corrupt(encode(b, net, cfg), eta, gen), net, cfg),
                   y, batch_size)


def init_output_bias(decoder, freqs, floor: float = 1e-4):
    """Start every output channel at its class prior, ``logit(freq)``."""
    f = np.clip(np.asarray(freqs, dtype=np.float64), floor, 1 - floor)
    with torch.no_grad():
        decoder.out.bias.copy_(torch.as_tensor(np.log(f / (1 - f)), dtype=torch.float32))


def train_stage1(data, cfg: ExperimentConfig, val=None, resume: StageCheckpoint | None = None,
                 epochs: int | None = None, checkpoint_path=None, snapshot_dir=None,
                 class_weights=None) -> StageCheckpoint:
    """Train encoder and decoder jointly on corrupt-and-reconstruct.

    ``data``/``val`` are dataset roots or in-memory splits. ``epochs`` stops
    early (the schedule still spans the configured total) so that a run can
    be interrupted and resumed from the returned checkpoint.
    """
    check_parent("ae", None)
    seed_everything(cfg.seed)
    train = stage_data(data, cfg, "train", need_images=False)
    valid = stage_data(val, cfg, "val", need_images=False) if val is not None else None
    net = build_autoencoder(cfg)
    modules = {"encoder": net.encoder, "decoder": net.decoder}
    freqs = class_frequencies(train.targets)
    init_output_bias(net.decoder, freqs)
    if class_weights is None:
        class_weights = compute_class_weights(freqs, cfg.train.weight_clip)
    w = torch.as_tensor(np.asarray(class_weights), dtype=torch.float32)
    trainer = StageTrainer("ae", modules, ["encoder", "decoder"], cfg.train.ae, cfg,
                           len(train))
    if resume is not None:
        if resume.stage != "ae":
            raise ValueError("can only resume Stage I from an 'ae' checkpoint")
        load_params(modules, resume)
        trainer.restore(resume)
    eta, eps = cfg.train.eta, cfg.train.bce_eps

    def loss_fn(idx, gen):
        y = train.targets[idx]
        z = net.encoder(y)
        y_hat = torch.sigmoid(net.decoder(corrupt(z, eta, gen)))
        return weighted_bce(y_hat, y, w, eps)

    val_fn = None
    if valid is not None:
        def val_fn():
            rec = reconstruct(valid.targets, net, cfg, seed=cfg.seed)
            return weighted_bce(rec, valid.targets, w, eps).item()

    def make_ckpt(tr):
        return StageCheckpoint(
            "ae", params_of(modules), cfg.to_dict(), epoch=tr.epoch,
            history={k: list(v) for k, v in tr.history.items()}, **tr.state(),
            extra={"class_weights": w.tolist(), "lr": cfg.train.ae.lr})

    def on_epoch(tr):
        if checkpoint_path is not None:
            make_ckpt(tr).save(checkpoint_path)

    trainer.run(loss_fn, epochs, val_fn, on_epoch, snapshot_dir)
    return make_ckpt(trainer)


def autoencoder_from(ckpt: StageCheckpoint, cfg: ExperimentConfig | None = None):
    cfg = cfg or ckpt.experiment_config
    net = build_autoencoder(cfg)
    load_params({"encoder": net.encoder, "decoder": net.decoder}, ckpt)
    net.eval()
    return net
