"""Robust kernel family kappa(eps) and the IRLS weights omega(eps) they induce.

These are the classical per-residual baselines that the masked losses are
compared against: a kernel maps a residual magnitude to a loss value, and its
IRLS weight omega(eps) = kappa'(eps) / eps turns the robust objective into a
sequence of weighted least-squares problems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KERNEL_KINDS = ("l2", "l1", "charbonnier", "geman_mcclure")

# 1/|eps| blows up at zero; same guard conventional IRLS implementations use.
_L1_EPS = 1e-8
_L1_CLAMP = 1e8


@dataclass(frozen=True)
class RobustKernel:
    """A symmetric robust kernel, selected by kind with one scale parameter.

    kind: one of "l2", "l1", "charbonnier", "geman_mcclure".
    scale_c: kernel scale in residual units; must be > 0 for the scaled kinds.
    """

    kind: str
    scale_c: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind in ("charbonnier", "geman_mcclure") and not self.scale_c > 0:
            raise ValueError(f"{self.kind} requires scale_c > 0, got {self.scale_c}")


def _check_finite(eps):
    if not np.all(np.isfinite(eps)):
        raise ValueError("residuals must be finite")


def kernel_value(kernel: RobustKernel, eps):
    """kappa(|eps|); accepts scalars or arrays.

    L2: eps^2 / 2 (halved so the IRLS weight is identically 1).
    L1: |eps|.
    Charbonnier: sqrt(eps^2 + c^2) - c.
    Geman-McClure: (eps^2 / 2) / (1 + eps^2 / c^2).
    """
    eps = np.asarray(eps, dtype=np.float64)
    _check_finite(eps)
    e2 = eps * eps
    c = kernel.scale_c
    if kernel.kind == "l2":
        out = 0.5 * e2
    elif kernel.kind == "l1":
        out = np.abs(eps)
    elif kernel.kind == "charbonnier":
        out = np.sqrt(e2 + c * c) - c
    else:  # geman_mcclure
        out = (0.5 * e2) / (1.0 + e2 / (c * c))
    return float(out) if out.ndim == 0 else out


def kernel_derivative(kernel: RobustKernel, eps):
    """d kappa / d eps, the signed influence function."""
    eps = np.asarray(eps, dtype=np.float64)
    _check_finite(eps)
    c = kernel.scale_c
    if kernel.kind == "l2":
        out = eps.copy()
    elif kernel.kind == "l1":
        out = np.sign(eps)
    elif kernel.kind == "charbonnier":
        out = eps / np.sqrt(eps * eps + c * c)
    else:  # geman_mcclure
        out = eps / (1.0 + eps * eps / (c * c)) ** 2
    return float(out) if out.ndim == 0 else out


def irls_weight(kernel: RobustKernel, eps):
    """omega(eps) = kappa'(eps) / eps, extended by its limit at eps = 0.

    L2 -> 1; L1 -> 1/|eps| clamped to 1e8 below |eps| = 1e-8;
    Charbonnier -> 1/sqrt(eps^2 + c^2); Geman-McClure -> 1/(1 + eps^2/c^2)^2.
    """
    eps = np.asarray(eps, dtype=np.float64)
    _check_finite(eps)
    e2 = eps * eps
    c = kernel.scale_c
    if kernel.kind == "l2":
        out = np.ones_like(eps)
    elif kernel.kind == "l1":
        out = np.where(np.abs(eps) < _L1_EPS, _L1_CLAMP, 1.0 / np.maximum(np.abs(eps), _L1_EPS))
    elif kernel.kind == "charbonnier":
        out = 1.0 / np.sqrt(e2 + c * c)
    else:  # geman_mcclure
        out = 1.0 / (1.0 + e2 / (c * c)) ** 2
    return float(out) if out.ndim == 0 else out


def kernel_from_config(kind: str, scale_c: float) -> RobustKernel:
    """Build a kernel from the `loss.kernel` / `loss.kernel_scale` config pair."""
    return RobustKernel(kind=kind.lower(), scale_c=scale_c)


def finite_difference_derivative(kernel: RobustKernel, eps: float, step: float = 1e-5) -> float:
    """Central finite-difference estimate of kappa'(eps); test oracle."""
    hi = kernel_value(kernel, eps + step)
    lo = kernel_value(kernel, eps - step)
    return (hi - lo) / (2.0 * step)
