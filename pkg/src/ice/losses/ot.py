"""Entropic optimal transport between attention maps and masks.

The solver is log-domain Sinkhorn with the regularizer fixed at 0.01,
ground cost the Euclidean distance between grid-cell centers normalized to
the unit square, and 200 iterations or an L1 marginal residual below 1e-6.
Plain Sinkhorn converges slowly at this regularizer, so the solver anneals
the regularizer geometrically from 1.0 down to the target over the first
iterations (epsilon scaling) and then switches to overrelaxed updates;
early stopping on the residual only engages once the target regularizer is
reached. The default iteration cap is sized so the residual stop, not the
cap, normally terminates the solve. The returned value is the sharp
transport cost <P, C> of the converged plan, which stays within the
entropic-bias budget of the exact LP optimum at these settings. Gradients
come from reverse-mode through the executed iterations, so they match the
computed value to machine precision.

Kernels are numba-jitted when available; set ICE_NO_NUMBA=1 (or
NUMBA_DISABLE_JIT) to force the pure-numpy twin.
"""

from __future__ import annotations

import os

import numpy as np

from ..core import AttentionMap, BinaryMask, IceError, _require, resample_mask_nearest

SINKHORN_REG = 0.01
SINKHORN_MAX_ITER = 5000
SINKHORN_TOL = 1e-6
SINKHORN_ANNEAL_START = 1.0
SINKHORN_ANNEAL_SPAN = 60
SINKHORN_OMEGA = 1.8


class DegenerateDistributionError(IceError, ValueError):
    """A distribution handed to the transport loss has no mass."""


def _numba_disabled() -> bool:
    return bool(os.environ.get("ICE_NO_NUMBA") or os.environ.get("NUMBA_DISABLE_JIT"))


if not _numba_disabled():
    try:
        from . import _kernels_numba as _kernels

        _BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        from . import _kernels_numpy as _kernels

        _BACKEND = "numpy"
else:
    from . import _kernels_numpy as _kernels

    _BACKEND = "numpy"


def kernel_backend() -> str:
    """Which Sinkhorn kernel implementation is active ("numba" or "numpy")."""
    return _BACKEND


_COST_CACHE: dict = {}


def grid_ground_cost(height: int, width: int) -> np.ndarray:
    """Euclidean distances between cell centers, grid normalized to [0,1]^2."""
    key = (height, width)
    if key not in _COST_CACHE:
        ys = (np.arange(height) + 0.5) / height
        xs = (np.arange(width) + 0.5) / width
        yy, xx = np.meshgrid(ys, xs, indexing="ij")
        pts = np.stack([yy.ravel(), xx.ravel()], axis=1)
        diff = pts[:, None, :] - pts[None, :, :]
        C = np.sqrt((diff**2).sum(axis=2))
        C.setflags(write=False)
        _COST_CACHE[key] = C
    return _COST_CACHE[key]


def _prepare(a: np.ndarray, b: np.ndarray, C: np.ndarray):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    _require(C.shape == (a.size, b.size), "cost matrix shape must match distributions")
    _require(np.all(np.isfinite(a)) and np.all(np.isfinite(b)), "distributions must be finite")
    _require(a.min() >= 0.0 and b.min() >= 0.0, "distributions must be nonnegative")
    ta, tb = float(a.sum()), float(b.sum())
    if ta <= 0.0 or tb <= 0.0:
        raise DegenerateDistributionError("cannot transport from or to an all-zero distribution")
    return a, b, ta, tb


def _reg_schedule(reg: float, max_iter: int) -> tuple:
    """Per-iteration (regularizer, relaxation) pairs.

    The first iterations anneal the regularizer geometrically down to the
    target; afterwards plain updates switch to overrelaxed ones. Returns
    (regs, omegas, index of the first post-anneal iteration).
    """
    _require(reg > 0.0 and max_iter >= 1, "reg must be > 0 and max_iter >= 1")
    regs = np.full(max_iter, reg, dtype=np.float64)
    omegas = np.full(max_iter, SINKHORN_OMEGA, dtype=np.float64)
    anneal = 0
    if SINKHORN_ANNEAL_START > reg and max_iter > 1:
        anneal = min(SINKHORN_ANNEAL_SPAN, max_iter // 2)
        if anneal > 0:
            regs[:anneal] = np.geomspace(SINKHORN_ANNEAL_START, reg, anneal)
            omegas[:anneal] = 1.0
    return regs, omegas, anneal


def sinkhorn_cost(
    a,
    b,
    C: np.ndarray,
    reg: float = SINKHORN_REG,
    max_iter: int = SINKHORN_MAX_ITER,
    tol: float = SINKHORN_TOL,
) -> float:
    """Sharp entropic-OT cost between (normalized) weight vectors a and b."""
    a, b, ta, tb = _prepare(a, b, C)
    ia = np.flatnonzero(a > 0.0)
    ib = np.flatnonzero(b > 0.0)
    la = np.log(a[ia] / ta)
    lb = np.log(b[ib] / tb)
    sub = np.ascontiguousarray(C[np.ix_(ia, ib)])
    regs, omegas, anneal = _reg_schedule(reg, max_iter)
    _, _, _, cost = _kernels.sinkhorn_forward(la, lb, sub, regs, omegas, anneal, tol)
    return float(cost)


def sinkhorn_cost_grad(
    a,
    b,
    C: np.ndarray,
    reg: float = SINKHORN_REG,
    max_iter: int = SINKHORN_MAX_ITER,
    tol: float = SINKHORN_TOL,
) -> tuple:
    """Cost plus its gradient with respect to the raw weights ``a``.

    The gradient includes the normalization chain a -> a/sum(a). Entries
    equal to zero are excluded from the transport problem and receive
    gradient 0 (boundary subgradient).
    """
    a, b, ta, tb = _prepare(a, b, C)
    ia = np.flatnonzero(a > 0.0)
    ib = np.flatnonzero(b > 0.0)
    an = a[ia] / ta
    la = np.log(an)
    lb = np.log(b[ib] / tb)
    sub = np.ascontiguousarray(C[np.ix_(ia, ib)])
    regs, omegas, anneal = _reg_schedule(reg, max_iter)
    f_hist, g_hist, iters, cost = _kernels.sinkhorn_forward(la, lb, sub, regs, omegas, anneal, tol)
    gla, _ = _kernels.sinkhorn_backward(f_hist, g_hist, la, lb, sub, regs, omegas, iters)
    g_norm = gla / an  # d cost / d (normalized a)
    grad_sub = (g_norm - float(an @ g_norm)) / ta
    grad = np.zeros_like(a)
    grad[ia] = grad_sub
    return float(cost), grad


def wasserstein_attention_loss(A: AttentionMap, m: BinaryMask, **kwargs) -> float:
    """Transport cost aligning an attention map with a segmentation mask.

    The mask is resampled to the attention grid by nearest neighbor, then
    both sides are normalized to probability distributions.
    """
    a, b, C = _attention_pair(A, m)
    return sinkhorn_cost(a, b, C, **kwargs)


def wasserstein_attention_grad(A: AttentionMap, m: BinaryMask, **kwargs) -> tuple:
    """Loss value plus gradient with respect to the raw attention weights."""
    a, b, C = _attention_pair(A, m)
    cost, grad = sinkhorn_cost_grad(a, b, C, **kwargs)
    return cost, grad.reshape(A.height, A.width)


def _attention_pair(A: AttentionMap, m: BinaryMask):
    if A.total() <= 0.0:
        raise DegenerateDistributionError("attention map has no mass")
    mb = m if (m.height, m.width) == (A.height, A.width) else resample_mask_nearest(m, A.height, A.width)
    if mb.count() == 0:
        raise DegenerateDistributionError("mask is empty on the attention grid")
    a = A.weights.ravel()
    b = mb.bits.astype(np.float64).ravel()
    return a, b, grid_ground_cost(A.height, A.width)
