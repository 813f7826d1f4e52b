"""Trainable edge-filtering layer.

Maps an edge strength w in [0, 1] to

    f(w) = out_scale * w**p / (1 + exp(beta * (tau - w)))

i.e. a soft threshold at tau (sigmoid of scale beta) times a power transform
that sets the contrast between strong and weak edges. p and tau are trained
with the rest of the network; beta stays fixed, large enough that the
sigmoid approximates hard thresholding. The layer output is linearly scaled
by out_scale.

Background pixels (w == 0) carry no signal: the value and every partial
derivative are defined as exactly 0 there, which also sidesteps the
blow-up of w**(p-1) at zero for p < 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edgemap import EdgeMap
from .errors import ShapeError

# cap on the sigmoid exponent; beyond this exp() would overflow while the
# gate is saturated anyway
_EXP_CAP = 700.0

# floor inside w**p * log(w); the limit at w -> 0 is 0 so the guard is benign
_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class FilterParams:
    """Edge-filter parameters. ``p`` and ``tau`` are trainable; ``beta`` never is."""

    p: float = 0.5
    tau: float = 0.1
    beta: float = 500.0
    out_scale: float = 10.0

    def __post_init__(self):
        if not self.p > 0.0:
            raise ValueError(f"p must be > 0, got {self.p}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must be in [0, 1], got {self.tau}")
        if not self.beta > 0.0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if not self.out_scale > 0.0:
            raise ValueError(f"out_scale must be > 0, got {self.out_scale}")


def _strengths(m) -> np.ndarray:
    if isinstance(m, EdgeMap):
        return m.strengths
    return np.asarray(m, dtype=np.float64)


def _gate(w: np.ndarray, params: FilterParams) -> np.ndarray:
    z = np.clip(params.beta * (params.tau - w), -_EXP_CAP, _EXP_CAP)
    return 1.0 / (1.0 + np.exp(z))


def filter_forward(m, params: FilterParams) -> np.ndarray:
    """Apply the filter elementwise; accepts an EdgeMap or a raw float grid."""
    w = _strengths(m)
    return (w ** params.p) * _gate(w, params) * params.out_scale


def filter_backward(m, params: FilterParams, upstream) -> tuple[float, float, np.ndarray]:
    """Exact partial derivatives of the scaled filter, contracted with ``upstream``.

    Returns (grad_p, grad_tau, grad_input) where grad_input has the shape of
    the input grid. With s = 1 / (1 + exp(beta*(tau - w))):

        df/dtau = -beta * w**p * s * (1 - s) * out_scale
        df/dw   = (p * w**(p-1) * s + beta * w**p * s * (1-s)) * out_scale
        df/dp   = w**p * log(w) * s * out_scale

    All partials are 0 where w == 0.
    """
    w = _strengths(m)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != w.shape:
        raise ShapeError(f"upstream shape {g.shape} != input shape {w.shape}")
    pos = w > 0.0
    s = _gate(w, params)
    sig = s * (1.0 - s)
    wp = np.where(pos, w ** params.p, 0.0)
    d_tau = -params.beta * wp * sig * params.out_scale
    d_p = wp * np.log(np.maximum(w, _LOG_FLOOR)) * s * params.out_scale
    d_p = np.where(pos, d_p, 0.0)
    wpm1 = np.where(pos, np.maximum(w, _LOG_FLOOR) ** (params.p - 1.0), 0.0)
    d_w = (params.p * wpm1 * s + params.beta * wp * sig) * params.out_scale
    grad_p = float(np.sum(d_p * g))
    grad_tau = float(np.sum(d_tau * g))
    return grad_p, grad_tau, d_w * g
