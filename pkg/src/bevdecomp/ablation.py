"""Component ablations: each group toggles the coordinate transform (cst), task
decomposition (td), column transformer (cwt) and decoder fine-tuning (ft).

Groups without td are trained end to end (``joint``); a group with ft reuses
the alignment checkpoint of the same configuration without ft.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .alignment import train_joint, train_stage2, train_stage3_finetune
from .autoencoder import train_stage1
from .config import ExperimentConfig
from .evaluation import evaluate_checkpoint

logger = logging.getLogger(__name__)

GROUPS = {
    "I": dict(cst=False, td=False, cwt=False, ft=False),
    "II": dict(cst=False, td=True, cwt=False, ft=False),
    "III": dict(cst=True, td=False, cwt=False, ft=False),
    "IV": dict(cst=True, td=True, cwt=False, ft=False),
    "V": dict(cst=True, td=False, cwt=True, ft=False),
    "VI": dict(cst=True, td=True, cwt=True, ft=False),
    "VII": dict(cst=True, td=True, cwt=True, ft=True),
}
DEFAULT_GROUPS = ("I", "III", "V", "VI", "VII")
COLUMNS = (("layout", "Layout"), ("large_object", "Large Obj."),
           ("small_object", "Small Obj."), ("mean", "Mean"))


def group_config(cfg: ExperimentConfig, group: str, seed: int | None = None):
    if group not in GROUPS:
        raise ValueError(f"unknown ablation group {group!r}; choose from {', '.join(GROUPS)}")
    over = {f"ablation__{k}": v for k, v in GROUPS[group].items()}
    if seed is not None:
        over["seed"] = seed
    return cfg.replace(**over)


def train_group(cfg: ExperimentConfig, group: str, train, val=None, cache=None):
    """Final checkpoint of one group; ``cache`` shares stage checkpoints."""
    cache = {} if cache is None else cache
    gcfg = group_config(cfg, group)
    flags = GROUPS[group]
    if not flags["td"]:
        key = ("joint", gcfg.hash())
        if key not in cache:
            cache[key] = train_joint(train, gcfg, val)
        return cache[key]
    base = gcfg.replace(ablation__ft=False)
    ae_key = ("ae", base.hash())
    if ae_key not in cache:
        cache[ae_key] = train_stage1(train, base, val)
    al_key = ("align", base.hash())
    if al_key not in cache:
        cache[al_key] = train_stage2(train, cache[ae_key], base, val)
    if not flags["ft"]:
        return cache[al_key]
    ft_key = ("finetune", gcfg.hash())
    if ft_key not in cache:
        cache[ft_key] = train_stage3_finetune(train, cache[al_key], gcfg, val)
    return cache[ft_key]


@dataclass
class AblationResult:
    groups: list
    seeds: list
    reports: dict = field(default_factory=dict)  # group -> [report dict per seed]

    def row(self, group: str) -> dict:
        reps = self.reports[group]
        out = {}
        for key, _ in COLUMNS:
            vals = [r["mean_iou"] if key == "mean" else r["strata"][key] for r in reps]
            out[key] = float(np.mean(vals))
        return out

    def table(self) -> str:
        head = "| Group | CST | TD | CWT | FT | " + " | ".join(c for _, c in COLUMNS) + " |"
        sep = "|" + "---|" * (5 + len(COLUMNS))
        lines = [head, sep]
        for g in self.groups:
            flags = " | ".join("x" if GROUPS[g][k] else "" for k in ("cst", "td", "cwt", "ft"))
            r = self.row(g)
            vals = " | ".join(f"{100 * r[k]:.1f}" for k, _ in COLUMNS)
            lines.append(f"| {g} | {flags} | {vals} |")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"groups": self.groups, "seeds": self.seeds, "reports": self.reports,
                "rows": {g: self.row(g) for g in self.groups}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def run_ablation(cfg: ExperimentConfig, train, val, groups=DEFAULT_GROUPS,
                 seeds=(0, 1, 2), cache=None, use_visibility: bool | None = None):
    """Train and evaluate every group for every seed on the given splits."""
    groups = list(groups)
    for g in groups:
        if g not in GROUPS:
            raise ValueError(f"unknown ablation group {g!r}")
    cache = {} if cache is None else cache
    result = AblationResult(groups, list(seeds))
    for seed in seeds:
        scfg = cfg.replace(seed=seed)
        for g in groups:
            logger.info("ablation group %s seed %d", g, seed)
            ckpt = train_group(scfg, g, train, val, cache)
            rep = evaluate_checkpoint(ckpt, val, use_visibility=use_visibility)
            result.reports.setdefault(g, []).append(rep.to_dict())
    return result
