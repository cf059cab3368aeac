"""Adam optimizer with a warmup/decay learning-rate schedule.

The schedule is the transformer ramp normalized to its peak:
``lr(n) = peak_lr * min(n / warmup, sqrt(warmup / n))``, continuous in ``n``
and equal to ``peak_lr`` exactly at ``n == warmup``.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor
from .errors import ContractViolation


def warmup_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    if step < 1:
        raise ContractViolation(f"schedule step must be >= 1, got {step}")
    if warmup_steps < 1:
        raise ContractViolation(f"warmup_steps must be >= 1, got {warmup_steps}")
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))


class Adam:
    """Standard Adam with bias correction over named parameter tensors."""

    def __init__(self, params: list[tuple[str, Tensor]], peak_lr: float = 1e-3,
                 warmup_steps: int = 500, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.params = list(params)
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        """Apply one update from the gradients stored on the parameters."""
        self.step_count += 1
        n = self.step_count
        lr = warmup_lr(n, self.peak_lr, self.warmup_steps)
        bc1 = 1.0 - self.beta1 ** n
        bc2 = 1.0 - self.beta2 ** n
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ContractViolation(
                    f"gradient shape {g.shape} does not match parameter {name!r} {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
        return lr

    # -- checkpoint support --------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.m:
            out[f"opt/m/{name}"] = self.m[name]
            out[f"opt/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int):
        for name in self.m:
            mk, vk = f"opt/m/{name}", f"opt/v/{name}"
            if mk not in arrays or vk not in arrays:
                raise ContractViolation(f"optimizer state missing for {name!r}")
            if arrays[mk].shape != self.m[name].shape:
                raise ContractViolation(f"optimizer moment shape mismatch for {name!r}")
            self.m[name] = arrays[mk].copy()
            self.v[name] = arrays[vk].copy()
        self.step_count = step_count
