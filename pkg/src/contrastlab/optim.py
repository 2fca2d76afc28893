"""SGD with momentum, Adam, and the learning-rate schedules used for training."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DimensionError

SCHEDULE_KINDS = ("cosine", "step")


@dataclass
class SgdConfig:
    base_lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class AdamConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for b in (self.beta1, self.beta2):
            if not 0 <= b < 1:
                raise ValueError(f"betas must be in [0, 1), got {b}")


@dataclass
class ScheduleConfig:
    total_epochs: int
    warmup_epochs: int = 0
    batch_size: int = 128
    lr_scaling: bool = False
    kind: str = "cosine"
    step_milestones: tuple[float, float] = (0.6, 0.8)
    step_gamma: float = 0.1

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"warmup_epochs must be in [0, total_epochs), got {self.warmup_epochs}")
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")

    @classmethod
    def large_batch_protocol(cls, total_epochs: int, batch_size: int, **kw) -> "ScheduleConfig":
        """lr scaled by batch_size/128, with a 10-epoch warmup only above batch size 256."""
        warmup = 10 if batch_size > 256 else 0
        return cls(total_epochs=total_epochs, warmup_epochs=warmup, batch_size=batch_size,
                   lr_scaling=True, **kw)


def peak_lr(cfg: ScheduleConfig, base_lr: float) -> float:
    return base_lr * cfg.batch_size / 128 if cfg.lr_scaling else base_lr


def _check_epoch(t: float, cfg: ScheduleConfig) -> None:
    if not 0 <= t <= cfg.total_epochs:
        raise ValueError(f"epoch {t} outside [0, {cfg.total_epochs}]")


def cosine_lr(t: float, cfg: ScheduleConfig, sgd: SgdConfig) -> float:
    """Learning rate at fractional epoch ``t``: linear warmup, then half-cosine to 0."""
    _check_epoch(t, cfg)
    lr0 = peak_lr(cfg, sgd.base_lr)
    w, total = cfg.warmup_epochs, cfg.total_epochs
    if t < w:
        return lr0 * t / w
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * (t - w) / (total - w)))


def step_lr(t: float, cfg: ScheduleConfig, sgd: SgdConfig) -> float:
    """Staircase: multiply by ``step_gamma`` at each milestone fraction of training."""
    _check_epoch(t, cfg)
    lr0 = peak_lr(cfg, sgd.base_lr)
    w = cfg.warmup_epochs
    if t < w:
        return lr0 * t / w
    passed = sum(t >= m * cfg.total_epochs for m in cfg.step_milestones)
    return lr0 * cfg.step_gamma ** passed


def scheduled_lr(t: float, cfg: ScheduleConfig, sgd: SgdConfig) -> float:
    return cosine_lr(t, cfg, sgd) if cfg.kind == "cosine" else step_lr(t, cfg, sgd)


def _check_shapes(params, grads, state) -> None:
    if len(params) != len(grads) or len(params) != len(state):
        raise DimensionError("params, grads and optimizer state differ in length")
    for p, g, s in zip(params, grads, state):
        if p.shape != g.shape or p.shape != s.shape:
            raise DimensionError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {s.shape}")


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], velocity: list[np.ndarray],
             lr: float, cfg: SgdConfig) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """One momentum step with L2 weight decay folded into the gradient.

    ``g' = g + wd * p``, ``v = momentum * v + g'``, ``p = p - lr * v``.
    """
    _check_shapes(params, grads, velocity)
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        v = cfg.momentum * v + (g + cfg.weight_decay * p)
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              cfg: AdamConfig, lr: float | None = None) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected Adam update. ``state.step`` counts completed steps."""
    _check_shapes(params, grads, state.m)
    step = state.step + 1
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, step)


class SGD:
    """Stateful wrapper over :func:`sgd_step` for a list of tensors."""

    def __init__(self, params, cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new_p, self.velocity = sgd_step([p.data for p in self.params], grads, self.velocity, lr, self.cfg)
        for p, d in zip(self.params, new_p):
            p.data = d.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params, cfg: AdamConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def step(self, lr: float | None = None) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new_p, self.state = adam_step([p.data for p in self.params], grads, self.state, self.cfg, lr)
        for p, d in zip(self.params, new_p):
            p.data = d.astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
