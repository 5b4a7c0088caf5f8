"""SGD, Adam and LARS as pure state transitions, plus cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import InvalidConfig, ShapeMismatch, StepOutOfRange
from .models import ModelParams, is_decay_exempt

KINDS = ("sgd", "adam", "lars")


@dataclass(frozen=True)
class OptimizerState:
    kind: str = "sgd"
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.9
    trust_coefficient: float = 1e-3
    # Adam: "m/<name>" and "v/<name>"; LARS: "mom/<name>".
    slots: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown optimizer {self.kind!r}", "kind")

    def hyperparams(self) -> dict:
        return {k: getattr(self, k) for k in
                ("kind", "step", "beta1", "beta2", "eps", "weight_decay", "momentum",
                 "trust_coefficient")}


def make_optimizer(kind: str = "sgd", **hyper) -> OptimizerState:
    return OptimizerState(kind=kind, **hyper)


def _decayed(name, p, g, wd):
    if wd and not is_decay_exempt(name):
        return g + wd * p
    return g


def _lars_trust(state, name, p, g):
    wd = 0.0 if is_decay_exempt(name) else state.weight_decay
    p_norm = float(np.linalg.norm(p))
    u_norm = float(np.linalg.norm(g + wd * p)) if wd else float(np.linalg.norm(g))
    if p_norm == 0.0 or u_norm == 0.0:
        return 1.0
    return state.trust_coefficient * p_norm / u_norm


def apply(state: OptimizerState, params: ModelParams, grads: Mapping[str, np.ndarray],
          lr: float) -> tuple[OptimizerState, ModelParams]:
    """One optimizer step. Returns the new state and new params; inputs untouched.

    SGD:  ``p - lr * g``
    Adam: bias-corrected first/second moments, ``p - lr * m_hat / (sqrt(v_hat) + eps)``
    LARS: ``mom = momentum * mom + lr * trust * (g + wd * p)``, ``p - mom`` with
    ``trust = trust_coefficient * |p| / |g + wd * p|`` per parameter tensor
    (1 when either norm is zero).
    """
    if lr < 0:
        raise InvalidConfig("learning rate must be >= 0", "lr")
    if list(params.keys()) != list(grads.keys()):
        raise ShapeMismatch("gradient names do not match parameters")
    for name, p in params.items():
        if np.shape(grads[name]) != p.shape:
            raise ShapeMismatch(f"{name}: grad {np.shape(grads[name])} vs param {p.shape}")

    step = state.step + 1
    slots = dict(state.slots)
    new = ModelParams(config=params.config)
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if state.kind == "sgd":
            new[name] = p - lr * _decayed(name, p, g, state.weight_decay)
        elif state.kind == "adam":
            g = _decayed(name, p, g, state.weight_decay)
            m = slots.get(f"m/{name}", np.zeros_like(p))
            v = slots.get(f"v/{name}", np.zeros_like(p))
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            m_hat = m / (1.0 - state.beta1 ** step)
            v_hat = v / (1.0 - state.beta2 ** step)
            slots[f"m/{name}"], slots[f"v/{name}"] = m, v
            new[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            trust = _lars_trust(state, name, p, g)
            mom = slots.get(f"mom/{name}", np.zeros_like(p))
            mom = state.momentum * mom + lr * trust * _decayed(name, p, g, state.weight_decay)
            slots[f"mom/{name}"] = mom
            new[name] = p - mom
    return replace(state, step=step, slots=slots), new


def cosine_lr(base: float, step: int, total_steps: int) -> float:
    """``base * 0.5 * (1 + cos(pi * step / total_steps))``."""
    if total_steps < 1:
        raise StepOutOfRange(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps}]")
    if step == total_steps:
        return 0.0
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
