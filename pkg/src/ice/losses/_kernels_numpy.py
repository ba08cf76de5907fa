"""Pure-numpy log-domain Sinkhorn kernels (fallback path).

Mirrors ``_kernels_numba`` operation for operation; selected when numba is
unavailable or disabled via ICE_NO_NUMBA / NUMBA_DISABLE_JIT.
"""

from __future__ import annotations

import numpy as np


def _lse_rows(M: np.ndarray) -> np.ndarray:
    mx = M.max(axis=1)
    return mx + np.log(np.exp(M - mx[:, None]).sum(axis=1))


def _lse_cols(M: np.ndarray) -> np.ndarray:
    mx = M.max(axis=0)
    return mx + np.log(np.exp(M - mx[None, :]).sum(axis=0))


def sinkhorn_forward(la, lb, C, regs, omegas, anneal, tol):
    """Relaxed log-domain updates with per-iteration regularizers.

    Iteration ``it`` uses regularizer ``regs[it]`` and relaxation weight
    ``omegas[it]`` (1 = plain Sinkhorn). Early stopping on the combined L1
    marginal residual only engages once annealing has finished (``it >=
    anneal``). Potentials satisfy P_ij = exp((f_i + g_j - C_ij) / reg); the
    returned cost is the sharp transport cost <P, C> of the final plan.
    """
    n, m = C.shape
    max_iter = regs.shape[0]
    a = np.exp(la)
    b = np.exp(lb)
    f = np.zeros(n)
    g = np.zeros(m)
    f_hist = np.zeros((max_iter, n))
    g_hist = np.zeros((max_iter, m))
    iters = 0
    for it in range(max_iter):
        reg = regs[it]
        w = omegas[it]
        fc = reg * la - reg * _lse_rows((g[None, :] - C) / reg)
        f = (1.0 - w) * f + w * fc
        gc = reg * lb - reg * _lse_cols((f[:, None] - C) / reg)
        g = (1.0 - w) * g + w * gc
        f_hist[it] = f
        g_hist[it] = g
        iters = it + 1
        if it >= anneal:
            P = np.exp((f[:, None] + g[None, :] - C) / reg)
            res = np.abs(P.sum(axis=1) - a).sum() + np.abs(P.sum(axis=0) - b).sum()
            if res < tol:
                break
    reg = regs[iters - 1]
    P = np.exp((f[:, None] + g[None, :] - C) / reg)
    cost = float((P * C).sum())
    return f_hist[:iters], g_hist[:iters], iters, cost


def sinkhorn_backward(f_hist, g_hist, la, lb, C, regs, omegas, iters):
    """Reverse-mode pass through the executed updates.

    Returns gradients of the sharp cost with respect to la and lb.
    """
    n, m = C.shape
    f_fin = f_hist[iters - 1]
    g_fin = g_hist[iters - 1]
    reg_fin = regs[iters - 1]
    P = np.exp((f_fin[:, None] + g_fin[None, :] - C) / reg_fin)
    grad_f = (P * C).sum(axis=1) / reg_fin
    grad_g = (P * C).sum(axis=0) / reg_fin
    gla = np.zeros(n)
    glb = np.zeros(m)
    for it in range(iters - 1, -1, -1):
        reg = regs[it]
        w = omegas[it]
        f_l = f_hist[it]
        g_prev = g_hist[it - 1] if it > 0 else np.zeros(m)
        # g = (1-w)*g_prev + w*(reg*lb - reg*LSE_i((f_i - C_ij)/reg))
        glb += w * reg * grad_g
        M = (f_l[:, None] - C) / reg
        sigma = np.exp(M - _lse_cols(M)[None, :])
        grad_f = grad_f - w * (sigma @ grad_g)
        carry_g = (1.0 - w) * grad_g
        # f = (1-w)*f_prev + w*(reg*la - reg*LSE_j((g_prev_j - C_ij)/reg))
        gla += w * reg * grad_f
        M = (g_prev[None, :] - C) / reg
        tau = np.exp(M - _lse_rows(M)[:, None])
        carry_g = carry_g - w * (tau.T @ grad_f)
        grad_f = (1.0 - w) * grad_f
        grad_g = carry_g
    return gla, glb
