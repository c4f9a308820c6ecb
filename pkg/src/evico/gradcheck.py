"""Central finite-difference gradient checking for tape-built functions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class GradCheck:
    worst_rel: float   # largest entry-wise error relative to max(|a|, |n|, atol)
    worst_abs: float
    ok: bool


def analytic_grads(fn, inputs):
    tape = dc.Tape()
    leaves = {k: tape.leaf(v) for k, v in inputs.items()}
    loss = fn(leaves)
    grads = tape.backward(loss)
    return loss.item(), {k: grads[leaf] for k, leaf in leaves.items()}


def numeric_grads(fn, inputs, eps=1e-5, only=None):
    """Central differences, evaluating ``fn`` on plain constants.

    ``only`` restricts the work: a list of input names, or a mapping of
    name -> flat entry indices.  Entries that are not probed come back NaN
    and are skipped by :func:`compare`.
    """
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    if only is None:
        only = list(base)
    if not isinstance(only, dict):
        only = {name: None for name in only}
    out = {}
    for name, idx in only.items():
        arr = base[name]
        flat = arr.reshape(-1)
        gflat = np.full(flat.size, np.nan)
        for i in (range(flat.size) if idx is None else idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn({k: dc.constant(v) for k, v in base.items()}).item()
            flat[i] = orig - eps
            lo = fn({k: dc.constant(v) for k, v in base.items()}).item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
        out[name] = gflat.reshape(arr.shape)
    return out


def compare(analytic, numeric, rtol=1e-4, atol=1e-7) -> GradCheck:
    """Entry-wise error |a - n| / max(|a|, |n|, atol) must stay below ``rtol``.

    ``atol`` is the magnitude below which an entry is judged on absolute
    error (``rtol * atol``) instead, since finite differences cannot resolve
    the relative error of a near-zero derivative.
    """
    worst_rel = worst_abs = 0.0
    for name, num in numeric.items():
        probed = ~np.isnan(num)
        ana, num = analytic[name][probed], num[probed]
        diff = np.abs(ana - num)
        scale = np.maximum(np.maximum(np.abs(ana), np.abs(num)), atol)
        worst_abs = max(worst_abs, float(diff.max(initial=0.0)))
        worst_rel = max(worst_rel, float((diff / scale).max(initial=0.0)))
    return GradCheck(worst_rel, worst_abs, worst_rel < rtol)


def check(fn, inputs, eps=1e-5, rtol=1e-4, atol=1e-7, only=None) -> GradCheck:
    _, ana = analytic_grads(fn, inputs)
    num = numeric_grads(fn, inputs, eps, only)
    return compare(ana, num, rtol, atol)
