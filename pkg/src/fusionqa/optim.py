"""AdamW and RAdam over dicts of numpy arrays, updating in place."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # RAdam uses the adaptive step only once the SMA length exceeds this
    rectify_threshold: float = 5.0


def init_state(params: dict[str, np.ndarray]) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def _check_finite(grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict, hp: OptimizerConfig):
    """Adam with decoupled weight decay (decay is applied to the weights, not the moments)."""
    _check_finite(grads)
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - hp.beta1 ** t
    bc2 = 1.0 - hp.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state["m"][name], state["v"][name]
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * g * g
        if hp.weight_decay:
            p *= 1.0 - hp.lr * hp.weight_decay
        p -= hp.lr * (m / bc1) / (np.sqrt(v / bc2) + hp.eps)
    return params, state


def radam_rectification(t: int, beta2: float) -> tuple[float, float]:
    """Return (rho_t, r_t) for step ``t``; r_t is nan when the variance is intractable.

    rho_inf = 2 / (1 - beta2) - 1
    rho_t   = rho_inf - 2 t beta2^t / (1 - beta2^t)
    r_t     = sqrt((rho_t - 4)(rho_t - 2) rho_inf / ((rho_inf - 4)(rho_inf - 2) rho_t))
    """
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** t
    rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t)
    if rho_t <= 4.0:
        return rho_t, math.nan
    r = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
    return rho_t, r


def radam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: dict, hp: OptimizerConfig):
    """Rectified Adam. While rho_t <= threshold the update is bias-corrected momentum only."""
    _check_finite(grads)
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - hp.beta1 ** t
    bc2 = 1.0 - hp.beta2 ** t
    rho_t, r_t = radam_rectification(t, hp.beta2)
    adaptive = rho_t > hp.rectify_threshold
    state["adaptive"] = adaptive
    for name, p in params.items():
        g = grads[name]
        m, v = state["m"][name], state["v"][name]
        m *= hp.beta1
        m += (1.0 - hp.beta1) * g
        v *= hp.beta2
        v += (1.0 - hp.beta2) * g * g
        if hp.weight_decay:
            p *= 1.0 - hp.lr * hp.weight_decay
        m_hat = m / bc1
        if adaptive:
            p -= hp.lr * r_t * m_hat / (np.sqrt(v / bc2) + hp.eps)
        else:
            p -= hp.lr * m_hat
    return params, state


STEPS = {"adamw": adamw_step, "radam": radam_step}


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to global L2 norm <= max_norm; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total
