"""Compiled inner loop for the optimizing engines.

Mirrors the numpy loop in :mod:`dicsopt.engines` step for step; the tests
check that both backends produce the same traces up to rounding.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SVRG, FULL_GRAD, PLAIN_SGD = 0, 1, 2

# reassociation lets loops vectorize; NaN/Inf semantics are kept for divergence checks
_FAST = {"nsz", "arcp", "contract", "reassoc"}

# diagnostics slots
D_MEAN, D_TRACK, D_GAP, D_BAD_STEP = 0, 1, 2, 3


@njit(cache=True, fastmath=_FAST, error_model="numpy")
def _sigmoid(u):
    if u >= 0:
        return 1.0 / (1.0 + math.exp(-u))
    e = math.exp(u)
    return e / (1.0 + e)


@njit(cache=True, fastmath=_FAST, error_model="numpy")
def _sample_grad(out, D, Y, i, l, x, logistic, mu_reg, sign):
    """out += sign * grad f_il(x)."""
    d = x.shape[0]
    u = 0.0
    for c in range(d):
        u += D[i, l, c] * x[c]
    if logistic:
        yl = Y[i, l]
        w = -yl * _sigmoid(-yl * u)
        for c in range(d):
            out[c] += sign * (mu_reg * x[c] + w * D[i, l, c])
    else:
        w = 2.0 * (u - Y[i, l])
        for c in range(d):
            out[c] += sign * w * D[i, l, c]


@njit(cache=True, fastmath=_FAST, error_model="numpy")
def _local_grads(out, D, Y, sizes, X, logistic, mu_reg):
    n, d = X.shape
    for i in range(n):
        for c in range(d):
            out[i, c] = 0.0
        for l in range(sizes[i]):
            _sample_grad(out[i], D, Y, i, l, X[i], logistic, mu_reg, 1.0)
        for c in range(d):
            out[i, c] /= sizes[i]


@njit(cache=True, fastmath=_FAST, error_model="numpy")
def _record(rows, nrow, t, x, y, g, x_star, res0, L, comm, evals_per_sample):
    n, d = x.shape
    res = 0.0
    cons = 0.0
    opt = 0.0
    track = 0.0
    for c in range(d):
        zb = 0.0
        gb = 0.0
        for i in range(n):
            zb += x[i, c] + y[i, c]
            gb += g[i, c]
        zb /= n
        gb /= n
        for i in range(n):
            res += (x[i, c] - x_star[c]) ** 2
            cons += (x[i, c] - zb) ** 2
            track += (g[i, c] - gb) ** 2
        opt += n * (zb - x_star[c]) ** 2
    rows[nrow, 0] = t
    rows[nrow, 1] = math.sqrt(res) / res0
    rows[nrow, 2] = cons
    rows[nrow, 3] = opt
    rows[nrow, 4] = track / (L * L)
    rows[nrow, 5] = comm
    rows[nrow, 6] = evals_per_sample


@njit(cache=True, fastmath=_FAST, error_model="numpy")
def run_chunk(
    t0, nsteps, total_steps, B, T, kind, alpha, gamma,
    w_off, w_diag, w_out, fanout, masks, has_mask, sample_idx,
    D, Y, sizes, logistic, mu_reg,
    x, y, g, v, w_tilde, mu_full, y_st, x_blk, g_blk, expect,
    kept, acc, x_star, res0, L, record_every, record_blocks,
    rows, nrow, diag,
):
    """Advance the optimizer by ``nsteps`` steps starting at global step ``t0``.

    ``acc`` holds ``[comm, evals, total_samples]``; state arrays are updated
    in place. Returns the new row count, or ``-1`` after a non-finite iterate.
    """
    n, d = x.shape
    x_new = np.empty_like(x)
    y_new = np.empty_like(y)
    g_new = np.empty_like(g)
    pushed = np.empty_like(y)
    v_new = np.empty_like(v)
    den = np.empty(d)
    total = acc[2]
    for j in range(nsteps):
        t = t0 + j
        r = t % B
        if kind == SVRG and t % T == 0 and t > 0:
            w_tilde[:, :] = x
            _local_grads(mu_full, D, Y, sizes, w_tilde, logistic, mu_reg)
            acc[1] += total
        if r == 0:
            y_st[:, :] = y
            x_blk[:, :] = x
            g_blk[:, :] = g
            for c in range(d):
                s = 0.0
                for i in range(n):
                    s += x[i, c] + y[i, c] - alpha * v[i, c]
                expect[c] = s / n
        # mixing for every coordinate; innermost loops run over contiguous c
        for i in range(n):
            wd = w_diag[j, i]
            for c in range(d):
                x_new[i, c] = wd * x[i, c]
                pushed[i, c] = 0.0
                g_new[i, c] = 0.0
            if has_mask:
                for c in range(d):
                    den[c] = wd
                    keep_self = masks[j, 1, i, c]
                    pushed[i, c] = y[i, c] * (1.0 - keep_self)
                    g_new[i, c] = g[i, c] * (1.0 - keep_self)
                for k in range(n):
                    wi = w_off[j, i, k]
                    if wi != 0.0:
                        for c in range(d):
                            wk = wi * masks[j, 0, k, c]
                            x_new[i, c] += wk * x[k, c]
                            den[c] += wk
                    wo = w_out[j, i, k]
                    if wo != 0.0:
                        for c in range(d):
                            wk = wo * masks[j, 1, k, c]
                            pushed[i, c] += wk * y[k, c]
                            g_new[i, c] += wk * g[k, c]
                for c in range(d):
                    x_new[i, c] /= den[c]
            else:
                for k in range(n):
                    wi = w_off[j, i, k]
                    if wi != 0.0:
                        for c in range(d):
                            x_new[i, c] += wi * x[k, c]
                    wo = w_out[j, i, k]
                    if wo != 0.0:
                        for c in range(d):
                            pushed[i, c] += wo * y[k, c]
                            g_new[i, c] += wo * g[k, c]
            for c in range(d):
                y_new[i, c] = x[i, c] - x_new[i, c] + pushed[i, c]
        acc[0] += 3.0 * kept * fanout[j]
        boundary = r == B - 1
        if boundary:
            for i in range(n):
                for c in range(d):
                    x_new[i, c] += gamma * y_st[i, c] - alpha * g_blk[i, c]
                    y_new[i, c] -= gamma * y_st[i, c]
            if kind == FULL_GRAD:
                _local_grads(v_new, D, Y, sizes, x_blk, logistic, mu_reg)
                acc[1] += total
            else:
                for i in range(n):
                    l = sample_idx[j, i]
                    for c in range(d):
                        v_new[i, c] = 0.0
                    _sample_grad(v_new[i], D, Y, i, l, x_blk[i], logistic, mu_reg, 1.0)
                    if kind == SVRG:
                        _sample_grad(v_new[i], D, Y, i, l, w_tilde[i], logistic, mu_reg, -1.0)
                        for c in range(d):
                            v_new[i, c] += mu_full[i, c]
                acc[1] += 2 * n if kind == SVRG else n
            gap = 0.0
            for i in range(n):
                for c in range(d):
                    g_new[i, c] += v_new[i, c] - v[i, c]
                    v[i, c] = v_new[i, c]
                    e = abs(pushed[i, c] - (x_new[i, c] - x[i, c]) - y_new[i, c])
                    if e > gap:
                        gap = e
            if gap > diag[D_GAP]:
                diag[D_GAP] = gap
        x[:, :] = x_new
        y[:, :] = y_new
        g[:, :] = g_new
        if boundary:
            err = 0.0
            scale = 1.0
            terr = 0.0
            vscale = 1.0
            for c in range(d):
                zb = 0.0
                gb = 0.0
                vb = 0.0
                for i in range(n):
                    zb += x[i, c] + y[i, c]
                    gb += g[i, c]
                    vb += v[i, c]
                    if abs(v[i, c]) > vscale:
                        vscale = abs(v[i, c])
                e = abs(zb / n - expect[c])
                if not e <= err:
                    err = e
                if abs(expect[c]) > scale:
                    scale = abs(expect[c])
                e = abs(gb - vb) / n
                if e > terr:
                    terr = e
            if not np.isfinite(err):
                diag[D_BAD_STEP] = t
                return -1
            if err / scale > diag[D_MEAN]:
                diag[D_MEAN] = err / scale
            if terr / vscale > diag[D_TRACK]:
                diag[D_TRACK] = terr / vscale
            if ((t // B) + 1) % record_blocks == 0 or t + 1 == total_steps:
                _record(rows, nrow, t + 1, x, y, g, x_star, res0, L, acc[0], acc[1] / total)
                nrow += 1
                continue
        if (t + 1) % record_every == 0 or t + 1 == total_steps:
            _record(rows, nrow, t + 1, x, y, g, x_star, res0, L, acc[0], acc[1] / total)
            nrow += 1
    return nrow
