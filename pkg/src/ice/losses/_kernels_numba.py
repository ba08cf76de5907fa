"""Numba-jitted log-domain Sinkhorn kernels (hot path).

Same contract as ``_kernels_numpy``; loop-structured for @njit. Compiled
lazily on first call and cached on disk.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def sinkhorn_forward(la, lb, C, regs, omegas, anneal, tol):
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
        for i in range(n):
            mx = -np.inf
            for j in range(m):
                v = (g[j] - C[i, j]) / reg
                if v > mx:
                    mx = v
            s = 0.0
            for j in range(m):
                s += np.exp((g[j] - C[i, j]) / reg - mx)
            fc = reg * la[i] - reg * (mx + np.log(s))
            f[i] = (1.0 - w) * f[i] + w * fc
        for j in range(m):
            mx = -np.inf
            for i in range(n):
                v = (f[i] - C[i, j]) / reg
                if v > mx:
                    mx = v
            s = 0.0
            for i in range(n):
                s += np.exp((f[i] - C[i, j]) / reg - mx)
            gc = reg * lb[j] - reg * (mx + np.log(s))
            g[j] = (1.0 - w) * g[j] + w * gc
        for i in range(n):
            f_hist[it, i] = f[i]
        for j in range(m):
            g_hist[it, j] = g[j]
        iters = it + 1
        if it >= anneal:
            res = 0.0
            for i in range(n):
                rowsum = 0.0
                for j in range(m):
                    rowsum += np.exp((f[i] + g[j] - C[i, j]) / reg)
                res += abs(rowsum - a[i])
            for j in range(m):
                colsum = 0.0
                for i in range(n):
                    colsum += np.exp((f[i] + g[j] - C[i, j]) / reg)
                res += abs(colsum - b[j])
            if res < tol:
                break
    reg = regs[iters - 1]
    cost = 0.0
    for i in range(n):
        for j in range(m):
            cost += np.exp((f[i] + g[j] - C[i, j]) / reg) * C[i, j]
    return f_hist[:iters], g_hist[:iters], iters, cost


@njit(cache=True)
def sinkhorn_backward(f_hist, g_hist, la, lb, C, regs, omegas, iters):
    n, m = C.shape
    reg_fin = regs[iters - 1]
    grad_f = np.zeros(n)
    grad_g = np.zeros(m)
    for i in range(n):
        for j in range(m):
            p = np.exp((f_hist[iters - 1, i] + g_hist[iters - 1, j] - C[i, j]) / reg_fin)
            grad_f[i] += p * C[i, j] / reg_fin
            grad_g[j] += p * C[i, j] / reg_fin
    gla = np.zeros(n)
    glb = np.zeros(m)
    carry_g = np.zeros(m)
    for it in range(iters - 1, -1, -1):
        reg = regs[it]
        w = omegas[it]
        # g = (1-w)*g_prev + w*(reg*lb - reg*LSE_i((f_i - C_ij)/reg))
        for j in range(m):
            glb[j] += w * reg * grad_g[j]
        for j in range(m):
            mx = -np.inf
            for i in range(n):
                v = (f_hist[it, i] - C[i, j]) / reg
                if v > mx:
                    mx = v
            s = 0.0
            for i in range(n):
                s += np.exp((f_hist[it, i] - C[i, j]) / reg - mx)
            denom = mx + np.log(s)
            for i in range(n):
                grad_f[i] -= w * np.exp((f_hist[it, i] - C[i, j]) / reg - denom) * grad_g[j]
        for j in range(m):
            carry_g[j] = (1.0 - w) * grad_g[j]
        # f = (1-w)*f_prev + w*(reg*la - reg*LSE_j((g_prev_j - C_ij)/reg))
        for i in range(n):
            gla[i] += w * reg * grad_f[i]
        for i in range(n):
            mx = -np.inf
            for j in range(m):
                gp = g_hist[it - 1, j] if it > 0 else 0.0
                v = (gp - C[i, j]) / reg
                if v > mx:
                    mx = v
            s = 0.0
            for j in range(m):
                gp = g_hist[it - 1, j] if it > 0 else 0.0
                s += np.exp((gp - C[i, j]) / reg - mx)
            denom = mx + np.log(s)
            for j in range(m):
                gp = g_hist[it - 1, j] if it > 0 else 0.0
                carry_g[j] -= w * np.exp((gp - C[i, j]) / reg - denom) * grad_f[i]
        for i in range(n):
            grad_f[i] = (1.0 - w) * grad_f[i]
        for j in range(m):
            grad_g[j] = carry_g[j]
    return gla, glb
