"""AdamW with decoupled weight decay, cosine LR schedule, gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWState:
    """Per-parameter moment accumulators plus shared hyperparameters."""

    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.0
    no_decay: frozenset[str] = frozenset()
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_init(
    params: dict[str, Tensor],
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    no_decay: frozenset[str] | set[str] = frozenset(),
) -> AdamWState:
    state = AdamWState(beta1, beta2, eps, weight_decay, frozenset(no_decay))
    for name, p in params.items():
        if p.requires_grad:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
) -> tuple[dict[str, Tensor], AdamWState]:
    """One AdamW update, in place.

    Decoupled decay: p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p),
    so a zero-gradient parameter shrinks by exactly (1 - lr * wd).
    """
    if lr < 0:
        raise ValueError(f"negative learning rate {lr}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if g.size and not (np.isfinite(g.min()) and np.isfinite(g.max())):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and name not in state.no_decay:
            update = update + state.weight_decay * p.data
        p.data = p.data - lr * update
    return params, state


def cosine_lr(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear ramp 0 -> peak over `warmup`, then cosine decay to 0 at `total`."""
    if warmup >= total:
        raise ValueError(f"warmup {warmup} must be < total {total}")
    step = min(step, total)
    if step < warmup:
        return peak * step / warmup if warmup > 0 else peak
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_grad_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> dict[str, np.ndarray]:
    """Scale all grads by max_norm/norm when the global L2 norm exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    sq = 0.0
    for g in grads.values():
        sq += float((g * g).sum())
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}
