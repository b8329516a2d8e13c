"""Auxiliary losses that push per-layer head importances toward uniform.

The scratch form penalizes lambda * sum_l N_h * CV^2 over all heads; the
fine-tune form exempts a frozen set of shared heads per layer and weighs
the rest by (N_h - m). Both are built from tape primitives on the current
minibatch's gates, so gradients reach sinks, gate projections, and (for
vanilla) the q/k weights that shape the first-token mass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import NumericError, Tensor

OFF, SCRATCH, FINETUNE = "off", "scratch", "finetune"
MODES = (OFF, SCRATCH, FINETUNE)


@dataclass
class BalanceConfig:
    lam: float = 0.0
    mode: str = OFF
    m: int = 0  # shared heads per layer, finetune mode only

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode {self.mode!r} not one of {MODES}")
        if self.lam < 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.m < 0:
            raise ValueError(f"m must be non-negative, got {self.m}")


def minibatch_importance(records) -> list[Tensor]:
    """Per-layer differentiable head importances from forward records.

    Flat mean of the gate over every (sample, position) of the minibatch;
    the stochastic estimate the losses are defined on.
    """
    return [ag.mean_(rec.gate, axis=(0, 2)) for rec in records]


def _cv_squared(imp: Tensor) -> Tensor:
    """Population CV^2 of a 1-d importance vector, as a taped scalar."""
    mean = ag.mean_(imp)
    if mean.data < 1e-12:
        return ag.constant(np.zeros(()), imp.dtype)
    var = ag.mean_((imp - mean) ** 2)
    return ag.div(var, mean * mean)


def aux_loss_scratch(imp_per_layer, lam: float) -> Tensor:
    """lambda * sum_l N_h * CV^2 over all heads of each layer."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    total = None
    for imp in imp_per_layer:
        n_h = imp.shape[0]
        term = ag.mul(_cv_squared(imp), ag.constant(float(n_h), imp.dtype))
        total = term if total is None else ag.add(total, term)
    if total is None:
        raise ValueError("no layers given")
    return ag.mul(total, ag.constant(lam, total.dtype))


def aux_loss_finetune(imp_per_layer, lam: float, shared_sets) -> Tensor:
    """lambda * sum_l (N_h - m) * CV^2 over heads outside the shared set.

    shared_sets is one index list per layer (see select_top_m_heads);
    layers left with fewer than two routed heads contribute exactly 0.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if len(shared_sets) != len(imp_per_layer):
        raise ValueError("one shared set per layer required")
    total = None
    for imp, shared in zip(imp_per_layer, shared_sets):
        n_h = imp.shape[0]
        routed = np.setdiff1d(np.arange(n_h), np.asarray(shared, dtype=int))
        if routed.size <= 1:
            term = ag.constant(np.zeros(()), imp.dtype)
        else:
            cv2 = _cv_squared(imp[routed])
            term = ag.mul(cv2, ag.constant(float(routed.size), imp.dtype))
        total = term if total is None else ag.add(total, term)
    if total is None:
        raise ValueError("no layers given")
    return ag.mul(total, ag.constant(lam, total.dtype))


def total_loss(base: Tensor, aux: Tensor) -> Tensor:
    """Training objective: base + aux, with a finiteness gate."""
    if not np.isfinite(base.data).all() or not np.isfinite(aux.data).all():
        raise NumericError(
            f"non-finite loss term: base={base.data!r}, aux={aux.data!r}"
        )
    return ag.add(base, aux)
