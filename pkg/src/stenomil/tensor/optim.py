"""Training configuration and the adaptive-moment optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


@dataclass
class TrainConfig:
    l2: float = 0.001
    dropout: float = 0.5
    learning_rate: float = 1e-4
    iterations: int = 20_000
    checkpoint_interval: int = 1000
    precision: str = "f32"
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.l2 < 0:
            raise ValueError(f"l2 must be >= 0, got {self.l2}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.iterations <= 0:
            raise ValueError(f"iterations must be > 0, got {self.iterations}")
        if self.checkpoint_interval <= 0 or self.iterations % self.checkpoint_interval:
            raise ValueError(
                f"checkpoint_interval {self.checkpoint_interval} must divide iterations {self.iterations}"
            )
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class Adam:
    """Adam with an L2 term ``l2 * w`` added to the gradient of decaying weights."""

    params: dict[str, Parameter]
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    l2: float = 0.0
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p.data))
            self.v.setdefault(k, np.zeros_like(p.data))

    @classmethod
    def from_config(cls, params: dict[str, Parameter], cfg: TrainConfig) -> Adam:
        return cls(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps, l2=cfg.l2)

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.l2 and p.decay:
                g = g + self.l2 * p.data
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            sq = g * g
            sq *= 1.0 - b2
            v += sq
            denom = np.sqrt(v / c2)
            denom += self.eps
            step = m / denom
            step *= self.lr / c1
            p.data = p.data - step.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"optim.m.{k}": a.copy() for k, a in self.m.items()}
        state.update({f"optim.v.{k}": a.copy() for k, a in self.v.items()})
        state["optim.step"] = np.array(self.step_count, dtype=np.int64)
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.m[k] = np.array(state[f"optim.m.{k}"], copy=True)
            self.v[k] = np.array(state[f"optim.v.{k}"], copy=True)
        self.step_count = int(state["optim.step"])
