"""Vanilla softmax head and evidential (Dirichlet) head."""
from __future__ import annotations

from dataclasses import dataclass

from . import diffcore as dc
from .errors import ConfigError, ShapeError

ACTIVATIONS = ("softplus", "relu", "exp")
EXP_CLAMP = 10.0


@dataclass
class EvidentialOutputs:
    evidence: dc.DiffValue     # e_ik >= 0, [N,K,H,W]
    alpha: dc.DiffValue        # e_ik + 1
    strength: dc.DiffValue     # S_i, [N,1,H,W]
    prob: dc.DiffValue         # alpha / S
    uncertainty: dc.DiffValue  # K / S, [N,1,H,W]
    weight: dc.DiffValue       # 1 - u, [N,1,H,W]


def _check_logits(logits):
    if logits.ndim != 4:
        raise ShapeError(f"logits must be [N,K,H,W], got {logits.shape}")
    if logits.shape[1] < 2:
        raise ConfigError(f"need at least 2 classes, got K={logits.shape[1]}")


def vanilla_head(logits: dc.DiffValue) -> dc.DiffValue:
    _check_logits(logits)
    return dc.softmax(logits, axis=1)


def evidence(logits: dc.DiffValue, activation="softplus") -> dc.DiffValue:
    if activation == "softplus":
        return dc.softplus(logits)
    if activation == "relu":
        return dc.relu(logits)
    if activation == "exp":
        return dc.exp(dc.clip(logits, hi=EXP_CLAMP))
    raise ConfigError(f"unknown evidence activation {activation!r}; choose from {ACTIVATIONS}")


def evidential_head(logits: dc.DiffValue, activation="softplus") -> EvidentialOutputs:
    _check_logits(logits)
    k = logits.shape[1]
    e = evidence(logits, activation)
    alpha = e + 1.0
    strength = dc.sum(alpha, axes=1, keepdims=True)
    prob = alpha / dc.expand(strength, alpha.shape)
    u = k / strength
    return EvidentialOutputs(e, alpha, strength, prob, u, 1.0 - u)


def fuse_predictions(p_v: dc.DiffValue, p_e: dc.DiffValue) -> dc.DiffValue:
    """Per-pixel arithmetic mean of the two class distributions."""
    if p_v.shape != p_e.shape:
        raise ShapeError(f"cannot fuse {p_v.shape} with {p_e.shape}")
    return (p_v + p_e) * 0.5
