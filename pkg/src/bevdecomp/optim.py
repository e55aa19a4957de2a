"""Sign-momentum optimizer and the warm-up + cosine learning-rate schedule."""
from __future__ import annotations

import math

import torch
from torch.optim import Optimizer
from torch.optim.lr_scheduler import LambdaLR


class Lion(Optimizer):
    """Sign of interpolated momentum with decoupled weight decay.

    Per step, for gradient ``g`` and momentum ``m``::

        p <- p - lr * (sign(b1 * m + (1 - b1) * g) + wd * p)
        m <- b2 * m + (1 - b2) * g
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.99), weight_decay=0.0):
        if lr <= 0:
            raise ValueError(f"invalid learning rate {lr}")
        if not all(0.0 <= b < 1.0 for b in betas):
            raise ValueError(f"invalid betas {betas}")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            lr, wd = group["lr"], group["weight_decay"]
            b1, b2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["exp_avg"] = torch.zeros_like(p)
                m = state["exp_avg"]
                update = (m * b1).add_(p.grad, alpha=1 - b1).sign_()
                p.mul_(1 - lr * wd)
                p.add_(update, alpha=-lr)
                m.mul_(b2).add_(p.grad, alpha=1 - b2)
        return loss


def make_optimizer(params, name: str, lr: float, betas=(0.9, 0.99), weight_decay=0.01):
    params = [p for p in params if p.requires_grad]
    if name == "lion":
        return Lion(params, lr=lr, betas=betas, weight_decay=weight_decay)
    if name == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {name!r}")


def warmup_cosine(optimizer, total_steps: int, warmup_frac: float = 0.05,
                  cosine: bool = True) -> LambdaLR:
    """Linear warm-up over ``warmup_frac`` of the steps, then cosine decay to 0."""
    total_steps = max(int(total_steps), 1)
    warmup = int(round(warmup_frac * total_steps))

    def factor(step):
        if warmup and step < warmup:
            return (step + 1) / warmup
        if not cosine:
            return 1.0
        progress = (step - warmup) / max(total_steps - warmup, 1)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return LambdaLR(optimizer, factor)
