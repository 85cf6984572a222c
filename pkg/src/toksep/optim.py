"""AdamW with decoupled weight decay, plus the finite-difference checker."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import NonFiniteError, Tensor, no_grad, zero_grads


def adamw_update(theta, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """One functional AdamW step; returns (theta, m, v) as new arrays.

    Decay is applied directly to the parameters (never folded into the
    gradient), then the bias-corrected moment update.
    """
    theta = theta * (1.0 - lr * weight_decay)
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v


class AdamW:
    """AdamW over a named parameter dict of Tensors."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
            grads[name] = g
        self.step_count += 1
        for name, p in self.params.items():
            p.data, self.m[name], self.v[name] = adamw_update(
                p.data, grads[name], self.m[name], self.v[name],
                self.step_count, self.lr, self.beta1, self.beta2,
                self.eps, self.weight_decay,
            )

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name in self.params:
            self.m[name] = np.asarray(state["m"][name], dtype=np.float64).reshape(self.m[name].shape)
            self.v[name] = np.asarray(state["v"][name], dtype=np.float64).reshape(self.v[name].shape)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> tuple[float, bool]:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return norm, False
    scale = max_norm / norm
    for p in params.values():
        if p.grad is not None:
            p.grad *= scale
    return norm, True


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    per_group: bool = False,
):
    """Compare reverse-mode gradients of f against central differences.

    Perturbs every element of every parameter by +-h, evaluates
    (f(theta+h) - f(theta-h)) / 2h, and reports the worst relative error
    |a - n| / max(|a|, |n|, 1e-8).  Returns that maximum, or a
    (maximum, per-parameter dict) pair when per_group is set.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    zero_grads(params)
    loss = f(params)
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    worst: dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            ga = analytic[name].reshape(-1)
            err = 0.0
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                f_plus = f(params).item()
                flat[j] = orig - h
                f_minus = f(params).item()
                flat[j] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                rel = abs(ga[j] - numeric) / max(abs(ga[j]), abs(numeric), 1e-8)
                err = max(err, rel)
            worst[name] = err
    top = max(worst.values()) if worst else 0.0
    if per_group:
        return top, worst
    return top
