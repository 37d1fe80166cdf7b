"""Hot inner loops, each with a numba kernel and a vectorized numpy twin.

The public names at the bottom dispatch on :data:`vbgmm._accel.USE_NUMBA`.
Both variants are importable directly (``*_jit`` / ``*_numpy``) so tests and
the benchmark can compare them side by side.

Means are ``(K, p)`` arrays throughout; flattened parameter vectors are
component-major (block k occupies ``[k*p, (k+1)*p)``).
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

LOG_2PI = math.log(2.0 * math.pi)

# rows of theta processed per numpy chunk; bounds peak memory at ~chunk*n*K*p
_CHUNK = 2048


# --------------------------------------------------------------------------
# one CAVI sweep
# --------------------------------------------------------------------------


@njit
def _cavi_sweep_jit(x, m, trace_d, sigma2):
    n, p = x.shape
    K = m.shape[0]
    offset = np.empty(K)
    for k in range(K):
        s = 0.0
        for j in range(p):
            s += m[k, j] * m[k, j]
        offset[k] = -0.5 * (s + trace_d[k])

    phi = np.empty((n, K))
    nk = np.zeros(K)
    sx = np.zeros((K, p))
    logits = np.empty(K)
    for i in range(n):
        top = -np.inf
        for k in range(K):
            s = offset[k]
            for j in range(p):
                s += x[i, j] * m[k, j]
            logits[k] = s
            if s > top:
                top = s
        tot = 0.0
        for k in range(K):
            tot += math.exp(logits[k] - top)
        lse = top + math.log(tot)
        for k in range(K):
            w = math.exp(logits[k] - lse)
            phi[i, k] = w
            nk[k] += w
            for j in range(p):
                sx[k, j] += w * x[i, j]

    prec = nk + 1.0 / sigma2
    m_new = np.empty((K, p))
    for k in range(K):
        for j in range(p):
            m_new[k, j] = sx[k, j] / prec[k]
    return phi, m_new, 1.0 / prec


def _cavi_sweep_numpy(x, m, trace_d, sigma2):
    offset = -0.5 * (np.einsum("kj,kj->k", m, m) + trace_d)
    logits = x @ m.T + offset
    top = logits.max(axis=1, keepdims=True)
    lse = top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True))
    phi = np.exp(logits - lse)
    prec = phi.sum(axis=0) + 1.0 / sigma2
    m_new = (phi.T @ x) / prec[:, None]
    return phi, m_new, 1.0 / prec


# --------------------------------------------------------------------------
# score / Hessian moment accumulation over a batch of observations
# --------------------------------------------------------------------------


@njit
def _score_hessian_sums_jit(xs, means):
    N, p = xs.shape
    K = means.shape[0]
    P = K * p
    gsum = np.zeros(P)
    gouter = np.zeros((P, P))
    hsum = np.zeros((P, P))
    z = np.empty((K, p))
    w = np.empty(K)
    g = np.empty(P)
    for s in range(N):
        top = -np.inf
        for k in range(K):
            acc = 0.0
            for j in range(p):
                d = xs[s, j] - means[k, j]
                z[k, j] = d
                acc += d * d
            w[k] = -0.5 * acc
            if w[k] > top:
                top = w[k]
        tot = 0.0
        for k in range(K):
            w[k] = math.exp(w[k] - top)
            tot += w[k]
        for k in range(K):
            w[k] /= tot
            for j in range(p):
                g[k * p + j] = w[k] * z[k, j]
        for a in range(P):
            gsum[a] += g[a]
            for b in range(P):
                gouter[a, b] += g[a] * g[b]
        for k in range(K):
            base = k * p
            for i in range(p):
                hsum[base + i, base + i] -= w[k]
                for j in range(p):
                    hsum[base + i, base + j] += w[k] * z[k, i] * z[k, j]
    for a in range(P):
        for b in range(P):
            hsum[a, b] -= gouter[a, b]
    return gsum, gouter, hsum


def _score_hessian_sums_numpy(xs, means):
    K, p = means.shape
    P = K * p
    gsum = np.zeros(P)
    gouter = np.zeros((P, P))
    block = np.zeros((K, p, p))
    wsum = np.zeros(K)
    for lo in range(0, xs.shape[0], _CHUNK):
        chunk = xs[lo:lo + _CHUNK]
        z = chunk[:, None, :] - means[None, :, :]
        logits = -0.5 * np.einsum("nkj,nkj->nk", z, z)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        g = (w[:, :, None] * z).reshape(len(chunk), P)
        gsum += g.sum(axis=0)
        gouter += g.T @ g
        block += np.einsum("nk,nki,nkj->kij", w, z, z)
        wsum += w.sum(axis=0)
    hsum = -gouter
    for k in range(K):
        sl = slice(k * p, (k + 1) * p)
        hsum[sl, sl] += block[k] - wsum[k] * np.eye(p)
    return gsum, gouter, hsum


# --------------------------------------------------------------------------
# summed mixture log-likelihood (and gradient) over a batch of parameters
# --------------------------------------------------------------------------


@njit
def _loglik_grad_batch_jit(thetas, x, want_grad):
    S, K, p = thetas.shape
    n = x.shape[0]
    const = -math.log(K) - 0.5 * p * LOG_2PI
    out = np.empty(S)
    grad = np.zeros((S, K, p)) if want_grad else np.zeros((1, 1, 1))
    e = np.empty(K)
    for s in range(S):
        total = 0.0
        for i in range(n):
            top = -np.inf
            for k in range(K):
                acc = 0.0
                for j in range(p):
                    d = x[i, j] - thetas[s, k, j]
                    acc += d * d
                e[k] = -0.5 * acc
                if e[k] > top:
                    top = e[k]
            tot = 0.0
            for k in range(K):
                tot += math.exp(e[k] - top)
            lse = top + math.log(tot)
            total += const + lse
            if want_grad:
                for k in range(K):
                    wk = math.exp(e[k] - lse)
                    for j in range(p):
                        grad[s, k, j] += wk * (x[i, j] - thetas[s, k, j])
        out[s] = total
    return out, grad


def _loglik_grad_batch_numpy(thetas, x, want_grad):
    S, K, p = thetas.shape
    const = -math.log(K) - 0.5 * p * LOG_2PI
    out = np.empty(S)
    grad = np.zeros((S, K, p)) if want_grad else np.zeros((1, 1, 1))
    step = max(1, _CHUNK // max(1, x.shape[0]))
    for lo in range(0, S, step):
        th = thetas[lo:lo + step]
        z = x[None, :, None, :] - th[:, None, :, :]          # (s, n, K, p)
        e = -0.5 * np.einsum("snkj,snkj->snk", z, z)
        top = e.max(axis=2, keepdims=True)
        lse = top + np.log(np.exp(e - top).sum(axis=2, keepdims=True))
        out[lo:lo + step] = (const + lse[..., 0]).sum(axis=1)
        if want_grad:
            w = np.exp(e - lse)
            grad[lo:lo + step] = np.einsum("snk,snkj->skj", w, z)
    return out, grad


if USE_NUMBA:
    cavi_sweep = _cavi_sweep_jit
    score_hessian_sums = _score_hessian_sums_jit
    _loglik_grad_batch = _loglik_grad_batch_jit
else:
    cavi_sweep = _cavi_sweep_numpy
    score_hessian_sums = _score_hessian_sums_numpy
    _loglik_grad_batch = _loglik_grad_batch_numpy


def loglik_sum_batch(thetas, x):
    """Σ_i log p(x_i; θ_s) for every θ_s in ``thetas`` of shape (S, K, p)."""
    thetas = np.ascontiguousarray(thetas, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _loglik_grad_batch(thetas, x, False)[0]


def loglik_grad_sum_batch(thetas, x):
    """Values and gradients (S, K, p) of the summed mixture log-likelihood."""
    thetas = np.ascontiguousarray(thetas, dtype=np.float64)
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _loglik_grad_batch(thetas, x, True)
