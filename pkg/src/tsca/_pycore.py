"""NumPy implementation of the hot kernels; the fallback backend.

tsca._ctcore exports the same six callables compiled with Cython, and
tsca.backend picks one implementation at import time. Contract shared by
both backends: inputs are C-contiguous float64 arrays, outputs are fresh
C-contiguous float64 arrays, and no kernel mutates its inputs.

Kernels:

  softmax_rows(x)            (n, m) -> (n, m), rows sum to 1
  softmax_rows_vjp(y, gy)    adjoint wrt x given y = softmax_rows(x)
  l2norm_cols(x, eps)        (d, n) -> ((d, n), (n,)); columns divided by
                             max(column norm, eps); raw norms returned
  l2norm_cols_vjp(y, norms, gy, eps)
  cond_plan(s, alpha)        score matrix (n, m) and weight simplex (m,) ->
                             (p, u) where p[i, j] = alpha[j] exp(s[i, j]) / Z_i
                             and u[i, j] = exp(s[i, j]) / Z_i (stash for the vjp)
  cond_plan_vjp(p, u, gp)    adjoints wrt s and alpha

cond_plan subtracts the row maximum over columns with alpha > 0 before
exponentiating, so rows cannot underflow to an all-zero denominator as long
as alpha has at least one positive entry. Columns with alpha[j] == 0 get
zero mass.
"""

import numpy as np

BACKEND = "python"


def softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    e /= e.sum(axis=1, keepdims=True)
    return e


def softmax_rows_vjp(y, gy):
    inner = (y * gy).sum(axis=1, keepdims=True)
    return y * (gy - inner)


def l2norm_cols(x, eps):
    norms = np.sqrt((x * x).sum(axis=0))
    denom = np.maximum(norms, eps)
    return x / denom[None, :], norms


def l2norm_cols_vjp(y, norms, gy, eps):
    denom = np.maximum(norms, eps)
    proj = (y * gy).sum(axis=0)
    gx = (gy - y * proj[None, :]) / denom[None, :]
    clamped = norms < eps
    if clamped.any():
        # below the guard the map is x / eps, a plain scaling
        gx[:, clamped] = gy[:, clamped] / eps
    return gx


def cond_plan(s, alpha):
    pos = alpha > 0.0
    if pos.all():
        rowmax = s.max(axis=1, keepdims=True)
    else:
        rowmax = s[:, pos].max(axis=1, keepdims=True)
    e = np.exp(s - rowmax)
    w = e * alpha[None, :]
    z = w.sum(axis=1, keepdims=True)
    return w / z, e / z


def cond_plan_vjp(p, u, gp):
    inner = (gp * p).sum(axis=1, keepdims=True)
    gs = p * (gp - inner)
    galpha = (u * (gp - inner)).sum(axis=0)
    return gs, galpha
