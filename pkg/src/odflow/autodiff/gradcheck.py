"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    per_block: bool = False,
    mode: str = "entries",
    directions: int = 3,
    seed: int = 0,
):
    """Max relative error |a - n| / max(|a|, |n|, 1e-12) of autodiff vs central differences.

    ``mode="entries"`` perturbs every scalar separately. ``mode="directions"``
    perturbs each parameter block along ``directions`` random sign vectors and
    compares directional derivatives; directions whose projection onto the
    analytic gradient is below a tenth of its norm are redrawn.

    ``fn`` rebuilds the scalar loss from the current parameter values.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    if mode not in ("entries", "directions"):
        raise ValueError(f"unknown mode {mode!r}")
    for p in params.values():
        p.grad = None
    backward(fn())
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()
    }
    rng = np.random.default_rng(seed)

    worst = 0.0
    blocks = {}
    for name, p in params.items():
        g = analytic[name]
        block_worst = 0.0
        if mode == "entries":
            for idx in np.ndindex(p.data.shape):
                orig = p.data[idx]
                p.data[idx] = orig + eps
                up = fn().item()
                p.data[idx] = orig - eps
                down = fn().item()
                p.data[idx] = orig
                block_worst = max(block_worst, _rel(g[idx], (up - down) / (2 * eps)))
        else:
            norm = float(np.sqrt((g * g).sum()))
            for _ in range(directions):
                for _attempt in range(50):
                    v = rng.choice([-1.0, 1.0], size=p.data.shape)
                    a = float((g * v).sum())
                    if abs(a) >= 0.1 * norm:
                        break
                orig = p.data.copy()
                p.data = orig + eps * v
                up = fn().item()
                p.data = orig - eps * v
                down = fn().item()
                p.data = orig
                block_worst = max(block_worst, _rel(a, (up - down) / (2 * eps)))
        blocks[name] = block_worst
        worst = max(worst, block_worst)
    if per_block:
        return worst, blocks
    return worst
