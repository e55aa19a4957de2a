"""Stage checkpoints and the ae -> align -> finetune lineage.

A checkpoint is a ``torch.save`` container::

    {"format": "bevdecomp-checkpoint", "version": 1,
     "stage": "ae" | "align" | "finetune" | "joint",
     "params": {"encoder.proj.weight": tensor, "decoder.out.bias": ..., ...},
     "config": {...}, "config_hash": str, "model_hash": str,
     "epoch": int, "history": {...}, "optimizer": {...} | None,
     "scheduler": {...} | None, "rng": {...}, "lineage": [...], "extra": {...}}

``joint`` marks the end-to-end baseline trained without task decomposition.
"""
from __future__ import annotations

import hashlib
import io
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import config as config_mod

FORMAT = "bevdecomp-checkpoint"
VERSION = 1
STAGES = ("ae", "align", "finetune", "joint")
# stage -> stage tag its parent checkpoint must carry
PARENT = {"ae": None, "joint": None, "align": "ae", "finetune": "align"}
INFERABLE = ("align", "finetune", "joint")


class CheckpointError(RuntimeError):
    pass


class LineageError(CheckpointError):
    pass


def tensor_hash(tensors: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()[:16]


def module_hashes(params: dict) -> dict[str, str]:
    """Hash per top-level component (``encoder``, ``decoder``, ``backbone``...)."""
    groups: dict[str, dict] = {}
    for name, t in params.items():
        groups.setdefault(name.split(".", 1)[0], {})[name] = t
    return {g: tensor_hash(ts) for g, ts in sorted(groups.items())}


@dataclass
class StageCheckpoint:
    stage: str
    params: dict
    config: dict
    epoch: int = 0
    history: dict = field(default_factory=dict)
    optimizer: dict | None = None
    scheduler: dict | None = None
    rng: dict = field(default_factory=dict)
    lineage: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage tag {self.stage!r}")

    @property
    def experiment_config(self) -> "config_mod.ExperimentConfig":
        return config_mod.from_dict(self.config)

    @property
    def config_hash(self) -> str:
        return self.experiment_config.hash()

    @property
    def model_hash(self) -> str:
        return self.experiment_config.model_hash()

    @property
    def checkpoint_id(self) -> str:
        return f"{self.stage}-{tensor_hash(self.params)}"

    def component(self, prefix: str) -> dict:
        """State dict of one component with its prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    def hashes(self) -> dict[str, str]:
        return module_hashes(self.params)

    def to_container(self) -> dict:
        return {
            "format": FORMAT, "version": VERSION, "stage": self.stage,
            "params": self.params, "config": self.config,
            "config_hash": self.config_hash, "model_hash": self.model_hash,
            "epoch": self.epoch, "history": self.history, "optimizer": self.optimizer,
            "scheduler": self.scheduler, "rng": self.rng, "lineage": self.lineage,
            "extra": self.extra,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        torch.save(self.to_container(), buf)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(buf.getvalue())
        tmp.replace(path)
        return path


def load(path: str | Path, expected: str | tuple[str, ...] | None = None,
         config: "config_mod.ExperimentConfig | None" = None,
         allow_mismatch: bool = False) -> StageCheckpoint:
    """Load a checkpoint, enforcing stage tag and config compatibility.

    ``expected`` restricts the accepted stage tags. When ``config`` is given,
    its model hash must match the checkpoint's unless ``allow_mismatch``.
    """
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(blob, dict) or blob.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if blob.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('version')}")
    ckpt = StageCheckpoint(
        stage=blob["stage"], params=blob["params"], config=blob["config"],
        epoch=blob["epoch"], history=blob["history"], optimizer=blob["optimizer"],
        scheduler=blob["scheduler"], rng=blob["rng"], lineage=blob["lineage"],
        extra=blob.get("extra", {}))
    if blob["config_hash"] != ckpt.config_hash:
        raise CheckpointError(f"{path}: stored config hash does not match its config")
    check_stage(ckpt, expected)
    if config is not None:
        check_compatible(ckpt, config, allow_mismatch)
    return ckpt


def check_stage(ckpt: StageCheckpoint, expected):
    if expected is None:
        return
    if isinstance(expected, str):
        expected = (expected,)
    if ckpt.stage not in expected:
        raise LineageError(
            f"checkpoint stage {ckpt.stage!r} is not accepted here "
            f"(expected {' or '.join(expected)})")


def check_parent(stage: str, parent: StageCheckpoint | None):
    """Enforce the ae -> align -> finetune state machine."""
    want = PARENT[stage]
    if want is None:
        if parent is not None:
            raise LineageError(f"stage {stage!r} does not take a parent checkpoint")
        return
    if parent is None:
        raise LineageError(f"stage {stage!r} requires a {want!r} checkpoint")
    if parent.stage != want:
        raise LineageError(
            f"stage {stage!r} requires a {want!r} checkpoint, got {parent.stage!r}")


def check_compatible(ckpt: StageCheckpoint, cfg, allow_mismatch: bool = False):
    if ckpt.model_hash != cfg.model_hash() and not allow_mismatch:
        raise CheckpointError(
            f"checkpoint model hash {ckpt.model_hash} does not match the config "
            f"({cfg.model_hash()}); pass allow_mismatch to override")
