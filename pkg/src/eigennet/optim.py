"""Composite losses and parameter-update rules.

Two rules are provided: plain SGD with momentum, and an adaptive rule with
decoupled weight decay (decay multiplies the parameter before the gradient
step and applies to factor matrices, scaling vectors and head weights, never
to biases).

Updates are two-phase: ``prepare`` computes new parameter and state arrays
from (params, grads, state, config) without touching anything, ``commit``
swaps them in. Block workers prepare concurrently; commits happen after all
of them succeed, so a failed worker leaves every parameter untouched.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError, OptimizerError

RULES = ("sgd-momentum", "adaptive-decoupled")


@dataclass
class OptimConfig:
    rule: str = "adaptive-decoupled"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float = 0.0  # 0 disables clipping; the retrieval recipe uses 1.0

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown optimizer rule {self.rule!r}, expected one of {RULES}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        for label, b in (("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                raise ConfigError(f"{label} must lie in [0, 1), got {b}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.weight_decay < 0 or self.clip_norm < 0:
            raise ConfigError("weight_decay and clip_norm must be non-negative")


def global_loss(task_loss, orth_sum, lam):
    """task + lam * penalty, the end-to-end objective."""
    if lam < 0:
        raise ConfigError(f"orthogonality weight must be non-negative, got {lam}")
    return ag.add(task_loss, ag.scale(orth_sum, lam))


def local_loss(cls_loss, orth, lam):
    """Per-block objective; same combination with block-local inputs."""
    if lam < 0:
        raise ConfigError(f"orthogonality weight must be non-negative, got {lam}")
    return ag.add(cls_loss, ag.scale(orth, lam))


class Optimizer:
    """Update rule over one parameter group (one block, or the whole model)."""

    def __init__(self, params, cfg):
        # params: iterable of (tensor, decays) pairs
        self.params = [(p, bool(decays)) for p, decays in params]
        self.cfg = cfg
        self.t = 0
        if cfg.rule == "adaptive-decoupled":
            self.state = [
                {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)} for p, _ in self.params
            ]
        else:
            self.state = [{"vel": np.zeros_like(p.data)} for p, _ in self.params]

    def zero_grad(self):
        for p, _ in self.params:
            p.grad = None

    def _grads(self):
        grads = []
        for p, _ in self.params:
            if p.grad is None:
                raise OptimizerError(f"missing gradient for parameter {p.name or '<unnamed>'}")
            grads.append(p.grad)
        if self.cfg.clip_norm > 0:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if total > self.cfg.clip_norm:
                factor = self.cfg.clip_norm / total
                grads = [g * factor for g in grads]
        return grads

    def prepare(self):
        """New (data, state) arrays per parameter; pure in its inputs."""
        cfg = self.cfg
        t = self.t + 1
        staged = []
        for (p, decays), st, g in zip(self.params, self.state, self._grads()):
            data = p.data
            if decays and cfg.weight_decay > 0:
                data = data * (1.0 - cfg.lr * cfg.weight_decay)
            if cfg.rule == "adaptive-decoupled":
                m = cfg.beta1 * st["m"] + (1.0 - cfg.beta1) * g
                v = cfg.beta2 * st["v"] + (1.0 - cfg.beta2) * (g * g)
                m_hat = m / (1.0 - cfg.beta1**t)
                v_hat = v / (1.0 - cfg.beta2**t)
                data = data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
                staged.append((data, {"m": m, "v": v}))
            else:
                vel = cfg.momentum * st["vel"] + g
                data = data - cfg.lr * vel
                staged.append((data, {"vel": vel}))
        return staged

    def commit(self, staged):
        for (p, _), (data, st) in zip(self.params, staged):
            p.data = data
        for i, (_, st) in enumerate(staged):
            self.state[i] = st
        self.t += 1

    def step(self):
        self.commit(self.prepare())
