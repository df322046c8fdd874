"""Compiled forward/backward recursions.

All kernels take per-time log emission densities ``log_b`` of shape (n, S)
and work on normalized probability vectors; emission scale is removed with a
per-row max shift so nothing underflows for observations far from every mean.
Kernels signal failure by returning the offending time index instead of
raising (numba cannot raise rich exceptions); ``-1`` means success.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def forward_pass(log_b, Q, init):
    n, S = log_b.shape
    pred = np.empty((n + 1, S))
    filt = np.empty((n, S))
    cum = np.empty(n)
    p = init.copy()
    loglik = 0.0
    for t in range(n):
        for a in range(S):
            pred[t, a] = p[a]
        mx = -np.inf
        for a in range(S):
            if log_b[t, a] > mx:
                mx = log_b[t, a]
        if not np.isfinite(mx):
            return pred, filt, cum, loglik, t
        c = 0.0
        for a in range(S):
            w = p[a] * np.exp(log_b[t, a] - mx)
            filt[t, a] = w
            c += w
        if not (c > 0.0):
            return pred, filt, cum, loglik, t
        for a in range(S):
            filt[t, a] /= c
        loglik += np.log(c) + mx
        cum[t] = loglik
        for b in range(S):
            s = 0.0
            for a in range(S):
                s += filt[t, a] * Q[a, b]
            p[b] = s
    for a in range(S):
        pred[n, a] = p[a]
    return pred, filt, cum, loglik, -1


@njit(cache=True)
def backward_pass(log_b, Q):
    """Normalized backward messages, beta[t] proportional to P(Y_{t+1:n} | X_t)."""
    n, S = log_b.shape
    beta = np.empty((n, S))
    for a in range(S):
        beta[n - 1, a] = 1.0 / S
    e = np.empty(S)
    for t in range(n - 2, -1, -1):
        mx = -np.inf
        for b in range(S):
            if log_b[t + 1, b] > mx:
                mx = log_b[t + 1, b]
        if not np.isfinite(mx):
            return beta, t + 1
        for b in range(S):
            e[b] = np.exp(log_b[t + 1, b] - mx) * beta[t + 1, b]
        tot = 0.0
        for a in range(S):
            s = 0.0
            for b in range(S):
                s += Q[a, b] * e[b]
            beta[t, a] = s
            tot += s
        if not (tot > 0.0):
            return beta, t
        for a in range(S):
            beta[t, a] /= tot
    return beta, -1


@njit(cache=True)
def _pick(logw, u):
    S = logw.shape[0]
    mx = -np.inf
    for a in range(S):
        if logw[a] > mx:
            mx = logw[a]
    if not np.isfinite(mx):
        return -1
    tot = 0.0
    for a in range(S):
        tot += np.exp(logw[a] - mx)
    target = u * tot
    acc = 0.0
    last = -1
    for a in range(S):
        w = np.exp(logw[a] - mx)
        if w > 0.0:
            last = a
        acc += w
        if acc > target:
            return a
    return last


@njit(cache=True)
def sample_path(log_b, Q, init, power, u):
    """Powered forward sampling with backward messages.

    X_1 ~ {init_a g_a(y_1) beta_1(a)}^power and
    X_i | X_{i-1}=a ~ {Q_ab g_b(y_i) beta_i(b)}^power, each normalized.
    Returns (states, failed_index).
    """
    n, S = log_b.shape
    x = np.zeros(n, dtype=np.int64)
    beta, bad = backward_pass(log_b, Q)
    if bad >= 0:
        return x, bad
    logw = np.empty(S)
    for a in range(S):
        logw[a] = power * (np.log(init[a]) + log_b[0, a] + np.log(beta[0, a]))
    k = _pick(logw, u[0])
    if k < 0:
        return x, 0
    x[0] = k
    for i in range(1, n):
        prev = x[i - 1]
        for b in range(S):
            logw[b] = power * (np.log(Q[prev, b]) + log_b[i, b] + np.log(beta[i, b]))
        k = _pick(logw, u[i])
        if k < 0:
            return x, i
        x[i] = k
    return x, -1


@njit(cache=True)
def posterior_marginals(log_b, Q, init):
    """Smoothing marginals, summed pairwise marginals and log-likelihood.

    Returns (gamma, xi_sum, loglik, failed_index).
    """
    n, S = log_b.shape
    gamma = np.zeros((n, S))
    xi_sum = np.zeros((S, S))
    pred, filt, cum, loglik, bad = forward_pass(log_b, Q, init)
    if bad >= 0:
        return gamma, xi_sum, loglik, bad
    beta, bad = backward_pass(log_b, Q)
    if bad >= 0:
        return gamma, xi_sum, loglik, bad
    for t in range(n):
        tot = 0.0
        for a in range(S):
            g = filt[t, a] * beta[t, a]
            gamma[t, a] = g
            tot += g
        for a in range(S):
            gamma[t, a] /= tot
    e = np.empty(S)
    xi = np.empty((S, S))
    for t in range(n - 1):
        mx = -np.inf
        for b in range(S):
            if log_b[t + 1, b] > mx:
                mx = log_b[t + 1, b]
        for b in range(S):
            e[b] = np.exp(log_b[t + 1, b] - mx) * beta[t + 1, b]
        tot = 0.0
        for a in range(S):
            for b in range(S):
                v = filt[t, a] * Q[a, b] * e[b]
                xi[a, b] = v
                tot += v
        for a in range(S):
            for b in range(S):
                xi_sum[a, b] += xi[a, b] / tot
    return gamma, xi_sum, loglik, -1
