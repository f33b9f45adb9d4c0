"""AdamW, global-norm clipping, cosine schedules and the EMA teacher update."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError


@dataclass(frozen=True)
class OptimConfig:
    start_lr: float = 2e-4
    peak_lr: float = 6.25e-4
    final_lr: float = 1e-6
    warmup_steps: int = 10_000
    total_steps: int = 240_000
    start_wd: float = 0.04
    end_wd: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 0.02

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} must lie in [0, total_steps]")
        if min(self.start_lr, self.peak_lr, self.final_lr) < 0 or min(self.start_wd, self.end_wd) < 0:
            raise ConfigError("learning rates and weight decays must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.grad_clip <= 0:
            raise ConfigError("eps and grad_clip must be positive")

    def replace(self, **kw) -> "OptimConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown optim keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, total_steps: int, **kw) -> "OptimConfig":
        """Paper schedule shape squeezed into a short run (warmup = 1/24 of total, as 10k of 240k)."""
        warm = max(1, round(total_steps * 10_000 / 240_000))
        base = dict(start_lr=2e-4, peak_lr=1e-3, warmup_steps=warm, total_steps=total_steps)
        base.update(kw)
        return cls(**base)


def _check_step(step: int, cfg: OptimConfig) -> None:
    if step < 0 or step > cfg.total_steps:
        raise ContractError(f"step {step} outside schedule [0, {cfg.total_steps}]")


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Linear warmup start_lr -> peak_lr, then cosine peak_lr -> final_lr."""
    _check_step(step, cfg)
    if step < cfg.warmup_steps:
        return cfg.start_lr + (cfg.peak_lr - cfg.start_lr) * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.peak_lr
    frac = (step - cfg.warmup_steps) / span
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * frac))


def wd_at(step: int, cfg: OptimConfig) -> float:
    """Cosine ramp start_wd -> end_wd over the whole run."""
    _check_step(step, cfg)
    frac = step / cfg.total_steps
    return cfg.end_wd + 0.5 * (cfg.start_wd - cfg.end_wd) * (1.0 + math.cos(math.pi * frac))


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                         for g in grads))


def clip_gradients(grads: list[np.ndarray], max_norm: float = 0.02) -> tuple[list[np.ndarray], float]:
    """Scale all gradients jointly so the global L2 norm is at most ``max_norm``.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError(f"non-finite gradient norm {norm}")
    if norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return [g * g.dtype.type(factor) for g in grads], norm


@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def decay_mask(params) -> list[bool]:
    """Weight decay applies to matrices only; biases, gains and single vectors are exempt."""
    return [p.data.ndim >= 2 for p in params]


def adamw_step(params, grads: list[np.ndarray], state: AdamState, lr: float, wd: float,
               cfg: OptimConfig, decay: list[bool] | None = None) -> AdamState:
    """Decoupled-weight-decay Adam with bias correction, updating ``params`` in place.

    ``decay`` selects which tensors receive weight decay (default: all).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimiser state differ in length")
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    decay = decay if decay is not None else [True] * len(params)
    for p, g, m, v, dec in zip(params, grads, state.m, state.v, decay):
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient {g.shape} vs parameter {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {p.name or 'parameter'} at step {state.step}")
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        upd = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(cfg.eps))
        if dec and wd:
            p.data -= dt(lr * wd) * p.data + dt(lr) * upd
        else:
            p.data -= dt(lr) * upd
    return state


@dataclass(frozen=True)
class EmaSchedule:
    start: float = 0.996
    end: float = 1.0
    total_steps: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.start <= self.end <= 1.0:
            raise ConfigError(f"EMA momenta must satisfy 0 <= start <= end <= 1, got {self.start}, {self.end}")
        if self.total_steps < 1:
            raise ConfigError("EMA schedule needs total_steps >= 1")

    def momentum(self, step: int) -> float:
        """Linear interpolation start -> end; clamps past the end."""
        frac = min(max(step / self.total_steps, 0.0), 1.0)
        return self.start + (self.end - self.start) * frac


def ema_update(teacher, student, m: float) -> None:
    """teacher <- m * teacher + (1 - m) * student, elementwise and in place."""
    if set(teacher) != set(student):
        raise DimensionError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name].data
        if s.shape != t.data.shape:
            raise DimensionError(f"{name}: {t.data.shape} vs {s.shape}")
        dt = t.data.dtype.type
        if m == 0.0:
            new = s.copy()
        elif m == 1.0:
            continue
        else:
            new = dt(m) * t.data + dt(1.0 - m) * s
        writeable = t.data.flags.writeable
        t.data.flags.writeable = True
        t.data[...] = new
        t.data.flags.writeable = writeable
