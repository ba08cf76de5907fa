"""Training objectives and their analytic gradients.

Every loss here is a pure function; gradients are returned by the paired
``*_grad`` functions and are verifiable with ``finite_difference_check``.
Hinge losses use subgradient 0 at the kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..core import BinaryMask, IceError, ImageTensor, _require
from .ot import (
    SINKHORN_MAX_ITER,
    SINKHORN_REG,
    SINKHORN_TOL,
    DegenerateDistributionError,
    grid_ground_cost,
    kernel_backend,
    sinkhorn_cost,
    sinkhorn_cost_grad,
    wasserstein_attention_grad,
    wasserstein_attention_loss,
)

__all__ = [
    "LossWeights",
    "LossBreakdown",
    "DegenerateRegionError",
    "DegenerateDistributionError",
    "MarginError",
    "recon_loss",
    "recon_loss_grad",
    "triplet_loss",
    "triplet_loss_grad",
    "intrinsic_triplet_loss",
    "intrinsic_triplet_loss_grad",
    "prior_preservation_loss",
    "prior_preservation_loss_grad",
    "total_loss",
    "finite_difference_check",
    "wasserstein_attention_loss",
    "wasserstein_attention_grad",
    "sinkhorn_cost",
    "sinkhorn_cost_grad",
    "grid_ground_cost",
    "kernel_backend",
    "SINKHORN_REG",
    "SINKHORN_MAX_ITER",
    "SINKHORN_TOL",
]


class DegenerateRegionError(IceError, ValueError):
    """Masked reconstruction was asked for over an empty region."""


class MarginError(IceError, KeyError):
    """A required triplet margin entry is missing or malformed."""


# ---------------------------------------------------------------------------
# Weights and breakdown


@dataclass(frozen=True)
class LossWeights:
    """Objective weights; phase-two margins are keyed by axis-name pairs."""

    lambda_att: float = 1e-5
    lambda_triplet: float = 1.0
    gamma_phase1: float = 0.05
    gamma_phase2: Mapping = field(default_factory=dict)

    def __post_init__(self):
        _require(self.lambda_att >= 0.0, "lambda_att must be >= 0")
        _require(self.lambda_triplet >= 0.0, "lambda_triplet must be >= 0")
        _require(self.gamma_phase1 >= 0.0, "gamma_phase1 must be >= 0")
        table = {}
        for (j, k), value in dict(self.gamma_phase2).items():
            value = float(value)
            _require(value >= 0.0, "phase-two margins must be >= 0")
            if j == k:
                _require(value == 0.0, "phase-two margin diagonal must be zero")
            table[(j, k)] = value
            table[(k, j)] = value
        object.__setattr__(self, "gamma_phase2", table)

    def margin(self, j: str, k: str) -> float:
        if (j, k) not in self.gamma_phase2:
            raise MarginError(f"no phase-two margin for axis pair ({j!r}, {k!r})")
        return self.gamma_phase2[(j, k)]


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term values of one training step; ``total`` per the combining rule."""

    recon: float
    att: float
    triplet: float
    prior: float
    total: float

    def consistent_with(self, w: LossWeights, tol: float = 1e-9) -> bool:
        expected = self.recon + w.lambda_att * self.att + w.lambda_triplet * self.triplet + self.prior
        return abs(expected - self.total) <= tol


def total_loss(recon: float, att: float, triplet: float, w: LossWeights, prior: float = 0.0) -> LossBreakdown:
    """Weighted combination of the objective terms.

    The triplet argument is already the phase-appropriate sum (over concepts
    in phase one, over axes in phase two). Prior preservation enters with
    fixed weight 1.0; pass 0.0 when disabled.
    """
    for name, v in (("recon", recon), ("att", att), ("triplet", triplet), ("prior", prior)):
        _require(np.isfinite(v), f"{name} loss must be finite")
    total = float(recon + w.lambda_att * att + w.lambda_triplet * triplet + prior)
    return LossBreakdown(recon=float(recon), att=float(att), triplet=float(triplet), prior=float(prior), total=total)


# ---------------------------------------------------------------------------
# Reconstruction


def _as_data(x) -> np.ndarray:
    if isinstance(x, ImageTensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _region_index(shape, region: "BinaryMask | None"):
    if region is None:
        return None
    _require(
        region.height == shape[0] and region.width == shape[1],
        "region dimensions must match the tensors",
    )
    if region.count() == 0:
        raise DegenerateRegionError("reconstruction region is empty")
    return region.bits


def recon_loss(eps_true, eps_pred, region: "BinaryMask | None" = None) -> float:
    """Mean squared error between noise tensors, optionally over a region."""
    t, p = _as_data(eps_true), _as_data(eps_pred)
    _require(t.shape == p.shape, "eps tensors must share shapes")
    bits = _region_index(t.shape, region)
    diff = p - t
    if bits is None:
        return float(np.mean(diff**2))
    return float(np.mean(diff[bits] ** 2))


def recon_loss_grad(eps_true, eps_pred, region: "BinaryMask | None" = None) -> tuple:
    """Loss plus gradient with respect to ``eps_pred``."""
    t, p = _as_data(eps_true), _as_data(eps_pred)
    _require(t.shape == p.shape, "eps tensors must share shapes")
    bits = _region_index(t.shape, region)
    diff = p - t
    grad = np.zeros_like(diff)
    if bits is None:
        n = diff.size
        grad[...] = 2.0 * diff / n
        return float(np.mean(diff**2)), grad
    n = int(np.count_nonzero(bits)) * (diff.shape[2] if diff.ndim == 3 else 1)
    grad[bits] = 2.0 * diff[bits] / n
    return float(np.mean(diff[bits] ** 2)), grad


def prior_preservation_loss(eps_true, eps_pred_on_prior) -> float:
    """Unmasked MSE on a prior-class sample; combining weight is fixed at 1."""
    return recon_loss(eps_true, eps_pred_on_prior, region=None)


def prior_preservation_loss_grad(eps_true, eps_pred_on_prior) -> tuple:
    return recon_loss_grad(eps_true, eps_pred_on_prior, region=None)


# ---------------------------------------------------------------------------
# Triplet objectives


def _vec(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).ravel()
    _require(np.all(np.isfinite(v)), "triplet vectors must be finite")
    return v


def triplet_loss(anchor, positive, negative, gamma: float) -> float:
    """max(0, ||a-p||^2 - ||a-n||^2 + gamma) with squared Euclidean distances."""
    a, p, n = _vec(anchor), _vec(positive), _vec(negative)
    _require(a.size == p.size == n.size, "triplet vectors must share dimensions")
    _require(gamma >= 0.0, "gamma must be >= 0")
    pre = float(((a - p) ** 2).sum() - ((a - n) ** 2).sum() + gamma)
    return max(0.0, pre)


def triplet_loss_grad(anchor, positive, negative, gamma: float) -> tuple:
    """Loss plus gradients with respect to (anchor, positive, negative)."""
    a, p, n = _vec(anchor), _vec(positive), _vec(negative)
    _require(a.size == p.size == n.size, "triplet vectors must share dimensions")
    _require(gamma >= 0.0, "gamma must be >= 0")
    pre = float(((a - p) ** 2).sum() - ((a - n) ** 2).sum() + gamma)
    if pre <= 0.0:
        z = np.zeros_like(a)
        return 0.0, (z, z.copy(), z.copy())
    ga = 2.0 * (n - p)
    gp = 2.0 * (p - a)
    gn = 2.0 * (a - n)
    return pre, (ga, gp, gn)


def _gamma_entries(others_len: int, gamma_row) -> list:
    if isinstance(gamma_row, Mapping):
        try:
            return [float(gamma_row[k]) for k in range(others_len)]
        except KeyError as exc:
            raise MarginError(f"missing margin entry for negative index {exc.args[0]}") from exc
    entries = [float(v) for v in gamma_row]
    if len(entries) != others_len:
        raise MarginError(f"expected {others_len} margin entries, got {len(entries)}")
    return entries


def intrinsic_triplet_loss(anchor, own, others: Sequence, gamma_row) -> float:
    """Sum over negatives k of max(0, ||a-own||^2 - ||a-other_k||^2 + gamma_k)."""
    _require(len(others) > 0, "others must be nonempty")
    a, o = _vec(anchor), _vec(own)
    gammas = _gamma_entries(len(others), gamma_row)
    base = float(((a - o) ** 2).sum())
    value = 0.0
    for other, gamma in zip(others, gammas):
        x = _vec(other)
        value += max(0.0, base - float(((a - x) ** 2).sum()) + gamma)
    return value


def intrinsic_triplet_loss_grad(anchor, own, others: Sequence, gamma_row) -> tuple:
    """Loss plus gradients: (g_anchor, g_own, [g_other_k...])."""
    _require(len(others) > 0, "others must be nonempty")
    a, o = _vec(anchor), _vec(own)
    gammas = _gamma_entries(len(others), gamma_row)
    base = float(((a - o) ** 2).sum())
    value = 0.0
    ga = np.zeros_like(a)
    go = np.zeros_like(o)
    gothers = []
    for other, gamma in zip(others, gammas):
        x = _vec(other)
        pre = base - float(((a - x) ** 2).sum()) + gamma
        if pre > 0.0:
            value += pre
            ga += 2.0 * (x - o)
            go += 2.0 * (o - a)
            gothers.append(2.0 * (a - x))
        else:
            gothers.append(np.zeros_like(x))
    return value, (ga, go, gothers)


# ---------------------------------------------------------------------------
# Gradient verification harness


def finite_difference_check(loss_fn, params: np.ndarray, analytic_grad: np.ndarray, h: float) -> float:
    """Max relative error between central differences and an analytic gradient.

    Relative error per coordinate is |fd - an| / max(1e-8, |fd| + |an|).
    """
    _require(h > 0.0, "h must be > 0")
    params = np.asarray(params, dtype=np.float64).ravel()
    analytic = np.asarray(analytic_grad, dtype=np.float64).ravel()
    _require(params.size == analytic.size, "params and gradient must share sizes")
    worst = 0.0
    for i in range(params.size):
        up = params.copy()
        up[i] += h
        down = params.copy()
        down[i] -= h
        fd = (float(loss_fn(up)) - float(loss_fn(down))) / (2.0 * h)
        err = abs(fd - analytic[i]) / max(1e-8, abs(fd) + abs(analytic[i]))
        worst = max(worst, err)
    return worst
