"""Adam optimizer over named parameter stores."""

from __future__ import annotations

import numpy as np

from .array import Array


class Adam:
    """Standard Adam with bias correction; deterministic given its state.

    Parameters are a name -> Array mapping so optimizer state can be
    checkpointed alongside the weights under stable names.
    """

    def __init__(
        self,
        params: dict[str, Array],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            p.data = p.data - (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    # checkpointable state --------------------------------------------------

    def state_entries(self, prefix: str = "optim") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {f"{prefix}/step": np.asarray(float(self.step_count))}
        for k in self.params:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        return out

    def load_state_entries(self, entries: dict[str, np.ndarray], prefix: str = "optim") -> None:
        self.step_count = int(entries[f"{prefix}/step"])
        for k in self.params:
            self.m[k] = np.array(entries[f"{prefix}/m/{k}"])
            self.v[k] = np.array(entries[f"{prefix}/v/{k}"])
