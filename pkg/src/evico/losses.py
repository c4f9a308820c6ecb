"""Supervised, evidential and cross-classifier consistency losses.

Every loss is reduced by the mean over pixels (and batch), so magnitudes do
not depend on image resolution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, EmptyBatchError, InvalidLabelError, ShapeError
from .heads import EvidentialOutputs

CE_LOG_FLOOR = 1e-12


@dataclass
class ScheduleState:
    t: float = 0.0
    kl_denominator: float = 150.0
    con_denominator: float = 40.0
    con_amplitude: float = 0.1

    def __post_init__(self):
        if self.t < 0:
            raise ConfigError(f"schedule step must be >= 0, got {self.t}")
        if self.kl_denominator <= 0 or self.con_denominator <= 0:
            raise ConfigError("schedule denominators must be > 0")


@dataclass(frozen=True)
class LossToggles:
    ce: bool = True
    enc: bool = True
    uegv: bool = True
    uvge: bool = True

    @property
    def uses_unlabeled(self):
        return self.uegv or self.uvge


def one_hot(labels, num_classes) -> np.ndarray:
    """``[N,H,W]`` class indices to a ``[N,K,H,W]`` float indicator."""
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ShapeError(f"label map must be [N,H,W], got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidLabelError(f"label indices must lie in [0, {num_classes})")
    hot = np.arange(num_classes)[None, :, None, None] == labels[:, None, :, :]
    return hot.astype(np.float64)


def _labels_for(p: dc.DiffValue, labels):
    y = one_hot(labels, p.shape[1])
    if y.shape != p.shape:
        raise ShapeError(f"labels {np.shape(labels)} do not match prediction {p.shape}")
    return y


def _pixel_count(x: dc.DiffValue):
    n, _, h, w = x.shape
    return n * h * w


def lambda_kl(sched: ScheduleState) -> float:
    return min(1.0, sched.t / sched.kl_denominator)


def lambda_con(sched: ScheduleState) -> float:
    """Gaussian ramp-up, held at its peak once ``t`` reaches the ramp length."""
    t = min(sched.t, sched.con_denominator)
    return sched.con_amplitude * math.exp(-5.0 * (1.0 - t / sched.con_denominator) ** 2)


def loss_ce(p: dc.DiffValue, labels) -> dc.DiffValue:
    y = _labels_for(p, labels)
    logp = dc.log(dc.clip(p, lo=CE_LOG_FLOOR))
    return -dc.sum(logp * y) / _pixel_count(p)


def loss_ece(alpha: dc.DiffValue, labels) -> dc.DiffValue:
    """Bayes risk of cross-entropy under Dir(alpha): psi(S) - psi(alpha_y)."""
    y = _labels_for(alpha, labels)
    strength = dc.sum(alpha, axes=1, keepdims=True)
    gap = dc.expand(dc.digamma(strength), alpha.shape) - dc.digamma(alpha)
    return dc.sum(gap * y) / _pixel_count(alpha)


def loss_kl(alpha: dc.DiffValue, labels) -> dc.DiffValue:
    """KL[Dir(alpha_tilde) || Dir(1,...,1)] with the true-class evidence removed."""
    y = _labels_for(alpha, labels)
    k = alpha.shape[1]
    a_t = y + (1.0 - y) * alpha
    s_t = dc.sum(a_t, axes=1, keepdims=True)
    log_norm = dc.lgamma(s_t) - math.lgamma(k) - dc.sum(dc.lgamma(a_t), axes=1, keepdims=True)
    spread = (a_t - 1.0) * (dc.digamma(a_t) - dc.expand(dc.digamma(s_t), a_t.shape))
    per_pixel = log_norm + dc.sum(spread, axes=1, keepdims=True)
    return dc.sum(per_pixel) / _pixel_count(alpha)


def loss_enc(alpha: dc.DiffValue, labels, sched: ScheduleState) -> dc.DiffValue:
    return loss_ece(alpha, labels) + lambda_kl(sched) * loss_kl(alpha, labels)


def loss_consistency_directed(p_guide, p_student, w, stop_gradient_on_guide=True) -> dc.DiffValue:
    """Confidence-weighted L1 pulling ``p_student`` toward ``p_guide``."""
    if p_guide.shape != p_student.shape:
        raise ShapeError(f"guide {p_guide.shape} vs student {p_student.shape}")
    n, k, h, wd = p_student.shape
    if w.shape != (n, 1, h, wd):
        raise ShapeError(f"weight map must be {(n, 1, h, wd)}, got {w.shape}")
    if stop_gradient_on_guide:
        p_guide, w = dc.detach(p_guide), dc.detach(w)
    diff = dc.abs(p_guide - p_student)
    return dc.sum(dc.expand(w, diff.shape) * diff) / (_pixel_count(p_student) * k)


def loss_uegv(p_e, p_v, w, stop_gradient=True):
    return loss_consistency_directed(p_e, p_v, w, stop_gradient)


def loss_uvge(p_e, p_v, w, stop_gradient=True):
    return loss_consistency_directed(p_v, p_e, w, stop_gradient)


def loss_con(p_e, p_v, w, stop_gradient=True) -> dc.DiffValue:
    return loss_uegv(p_e, p_v, w, stop_gradient) + loss_uvge(p_e, p_v, w, stop_gradient)


def loss_seg(p_v, alpha, labels, sched: ScheduleState) -> dc.DiffValue:
    if p_v.shape[0] == 0 or np.shape(labels)[0] == 0:
        raise EmptyBatchError("supervised loss needs at least one labeled sample")
    return loss_ce(p_v, labels) + loss_enc(alpha, labels, sched)


@dataclass
class LossTerms:
    ce: dc.DiffValue
    ece: dc.DiffValue
    kl: dc.DiffValue
    uegv: dc.DiffValue
    uvge: dc.DiffValue
    total: dc.DiffValue
    lambda_kl: float
    lambda_c: float

    def values(self):
        return {name: getattr(self, name).item()
                for name in ("ce", "ece", "kl", "uegv", "uvge", "total")}


def dcnet_terms(p_v: dc.DiffValue, evid: EvidentialOutputs, labels, sched: ScheduleState,
                toggles: LossToggles = LossToggles(), stop_gradient=True) -> LossTerms:
    """All loss components for one batch whose first ``len(labels)`` samples are labeled.

    Supervised terms average over the labeled samples, consistency terms over
    the whole batch.  Disabled components are still evaluated for logging but
    do not enter ``total``.
    """
    n_lab = int(np.shape(labels)[0])
    if n_lab == 0:
        raise EmptyBatchError("batch has no labeled samples")
    if n_lab > p_v.shape[0]:
        raise ShapeError(f"{n_lab} labels for a batch of {p_v.shape[0]}")
    lab = np.arange(n_lab)
    if n_lab == p_v.shape[0]:
        pv_l, alpha_l = p_v, evid.alpha
    else:
        pv_l, alpha_l = dc.take(p_v, lab), dc.take(evid.alpha, lab)

    lam_kl, lam_c = lambda_kl(sched), lambda_con(sched)
    ce = loss_ce(pv_l, labels)
    ece = loss_ece(alpha_l, labels)
    kl = loss_kl(alpha_l, labels)
    uegv = loss_uegv(evid.prob, p_v, evid.weight, stop_gradient)
    uvge = loss_uvge(evid.prob, p_v, evid.weight, stop_gradient)

    total = dc.constant(0.0)
    if toggles.ce:
        total = total + ce
    if toggles.enc:
        total = total + ece + lam_kl * kl
    con = None
    if toggles.uegv:
        con = uegv
    if toggles.uvge:
        con = uvge if con is None else con + uvge
    if con is not None:
        total = total + lam_c * con
    return LossTerms(ce, ece, kl, uegv, uvge, total, lam_kl, lam_c)


def loss_dcnet(p_v, evid, labels, sched, toggles=LossToggles(), stop_gradient=True):
    return dcnet_terms(p_v, evid, labels, sched, toggles, stop_gradient).total
