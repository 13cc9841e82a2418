"""Hot inner loops.

Each kernel exists twice: a loop version compiled with numba and a numpy
version used when ``SOCLM_PURE_NUMPY=1`` (or numba is missing). Both follow the
same algorithm; results agree to rounding. The public names at the bottom of
the module are bound to whichever path is active.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit, numba

# ---------------------------------------------------------------------------
# TwHIN negative-sampling SGD with Adagrad
# ---------------------------------------------------------------------------


@njit(inline="always")
def _log_sigmoid(x):
    if x >= 0.0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@njit
def _sgd_sample(U, T, R, acc_u, acc_t, acc_r, u, t, r, negs, sides, lr, eps,
                slot_u, slot_t, grad_u, grad_t, grad_r):
    d = U.shape[1]
    n_neg = negs.shape[0]
    # slot 0 of each side holds the positive edge's entity
    n_u = 1
    n_t = 1
    slot_u[0] = u
    slot_t[0] = t
    for j in range(d):
        grad_u[0, j] = 0.0
        grad_t[0, j] = 0.0
        grad_r[j] = 0.0

    f = 0.0
    for j in range(d):
        f += (U[u, j] + R[r, j]) * T[t, j]
    loss = -_log_sigmoid(f)
    c = _sigmoid(f) - 1.0
    for j in range(d):
        grad_u[0, j] += c * T[t, j]
        grad_r[j] += c * T[t, j]
        grad_t[0, j] += c * (U[u, j] + R[r, j])

    for k in range(n_neg):
        if sides[k] == 0:
            uu = negs[k]
            tt = t
        else:
            uu = u
            tt = negs[k]
        f = 0.0
        for j in range(d):
            f += (U[uu, j] + R[r, j]) * T[tt, j]
        loss -= _log_sigmoid(-f)
        c = _sigmoid(f)
        su = -1
        for s in range(n_u):
            if slot_u[s] == uu:
                su = s
                break
        if su < 0:
            su = n_u
            slot_u[su] = uu
            for j in range(d):
                grad_u[su, j] = 0.0
            n_u += 1
        st = -1
        for s in range(n_t):
            if slot_t[s] == tt:
                st = s
                break
        if st < 0:
            st = n_t
            slot_t[st] = tt
            for j in range(d):
                grad_t[st, j] = 0.0
            n_t += 1
        for j in range(d):
            grad_u[su, j] += c * T[tt, j]
            grad_r[j] += c * T[tt, j]
            grad_t[st, j] += c * (U[uu, j] + R[r, j])

    if not math.isfinite(loss):
        return loss

    for s in range(n_u):
        row = slot_u[s]
        for j in range(d):
            g = grad_u[s, j]
            acc_u[row, j] += g * g
            U[row, j] -= lr * g / (math.sqrt(acc_u[row, j]) + eps)
    for s in range(n_t):
        row = slot_t[s]
        for j in range(d):
            g = grad_t[s, j]
            acc_t[row, j] += g * g
            T[row, j] -= lr * g / (math.sqrt(acc_t[row, j]) + eps)
    for j in range(d):
        g = grad_r[j]
        acc_r[r, j] += g * g
        R[r, j] -= lr * g / (math.sqrt(acc_r[r, j]) + eps)
    return loss


@njit
def _sgd_range_nb(U, T, R, acc_u, acc_t, acc_r, edges, order, neg_ent, neg_side,
                  lr, eps, start, stop):
    d = U.shape[1]
    n_neg = neg_ent.shape[1]
    slot_u = np.empty(n_neg + 1, np.int64)
    slot_t = np.empty(n_neg + 1, np.int64)
    grad_u = np.empty((n_neg + 1, d))
    grad_t = np.empty((n_neg + 1, d))
    grad_r = np.empty(d)
    total = 0.0
    for ii in range(start, stop):
        e = order[ii]
        loss = _sgd_sample(U, T, R, acc_u, acc_t, acc_r, edges[e, 0], edges[e, 1],
                           edges[e, 2], neg_ent[ii], neg_side[ii], lr, eps,
                           slot_u, slot_t, grad_u, grad_t, grad_r)
        if not math.isfinite(loss):
            return total, ii
        total += loss
    return total, -1


@njit
def _sgd_epoch_nb(U, T, R, acc_u, acc_t, acc_r, edges, order, neg_ent, neg_side, lr, eps):
    return _sgd_range_nb(U, T, R, acc_u, acc_t, acc_r, edges, order, neg_ent, neg_side,
                         lr, eps, 0, order.shape[0])


if numba is not None:

    @numba.njit(parallel=True, cache=True)
    def _sgd_hogwild_nb(U, T, R, acc_u, acc_t, acc_r, edges, order, neg_ent, neg_side,
                        lr, eps, n_workers):
        n = order.shape[0]
        totals = np.zeros(n_workers)
        bad = np.full(n_workers, -1, np.int64)
        chunk = (n + n_workers - 1) // n_workers
        for w in numba.prange(n_workers):
            lo = w * chunk
            hi = min(n, lo + chunk)
            if lo < hi:
                totals[w], bad[w] = _sgd_range_nb(U, T, R, acc_u, acc_t, acc_r, edges, order,
                                                  neg_ent, neg_side, lr, eps, lo, hi)
        first_bad = -1
        for w in range(n_workers):
            if bad[w] >= 0:
                first_bad = bad[w]
                break
        return totals.sum(), first_bad


def _log_sigmoid_np(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid_np(x):
    return np.exp(_log_sigmoid_np(x))


def _sgd_range_np(U, T, R, acc_u, acc_t, acc_r, edges, order, neg_ent, neg_side,
                  lr, eps, start, stop):
    total = 0.0
    for ii in range(start, stop):
        u, t, r = edges[order[ii]]
        sides = neg_side[ii]
        negs = neg_ent[ii]
        nu = np.where(sides == 0, negs, u)
        nt = np.where(sides == 0, t, negs)
        rv = R[r]
        us = np.concatenate(([u], nu))
        ts = np.concatenate(([t], nt))
        shifted = U[us] + rv
        f = np.einsum("ij,ij->i", shifted, T[ts])
        loss = -(_log_sigmoid_np(f[0]) + _log_sigmoid_np(-f[1:]).sum())
        if not np.isfinite(loss):
            return total, ii
        total += loss
        c = _sigmoid_np(f)
        c[0] -= 1.0
        gu = c[:, None] * T[ts]
        gt = c[:, None] * shifted
        gr = gu.sum(axis=0)
        ru, inv_u = np.unique(us, return_inverse=True)
        rt, inv_t = np.unique(ts, return_inverse=True)
        g_u = np.zeros((ru.size, U.shape[1]))
        np.add.at(g_u, inv_u, gu)
        g_t = np.zeros((rt.size, T.shape[1]))
        np.add.at(g_t, inv_t, gt)
        acc_u[ru] += g_u * g_u
        U[ru] -= lr * g_u / (np.sqrt(acc_u[ru]) + eps)
        acc_t[rt] += g_t * g_t
        T[rt] -= lr * g_t / (np.sqrt(acc_t[rt]) + eps)
        acc_r[r] += gr * gr
        R[r] -= lr * gr / (np.sqrt(acc_r[r]) + eps)
    return total, -1


def _sgd_epoch_np(U, T, R, acc_u, acc_t, acc_r, edges, order, neg_ent, neg_side, lr, eps):
    return _sgd_range_np(U, T, R, acc_u, acc_t, acc_r, edges, order, neg_ent, neg_side,
                         lr, eps, 0, order.shape[0])


def _sgd_hogwild_np(U, T, R, acc_u, acc_t, acc_r, edges, order, neg_ent, neg_side,
                    lr, eps, n_workers):
    from concurrent.futures import ThreadPoolExecutor

    n = order.shape[0]
    chunk = -(-n // n_workers)
    bounds = [(w * chunk, min(n, (w + 1) * chunk)) for w in range(n_workers)]
    with ThreadPoolExecutor(n_workers) as pool:
        results = list(pool.map(
            lambda b: _sgd_range_np(U, T, R, acc_u, acc_t, acc_r, edges, order, neg_ent,
                                    neg_side, lr, eps, b[0], b[1]), bounds))
    bad = [b for _, b in results if b >= 0]
    return sum(t for t, _ in results), (bad[0] if bad else -1)


# ---------------------------------------------------------------------------
# Nearest-centroid assignment (k-means, PQ encoding, coarse quantizer)
# ---------------------------------------------------------------------------


@njit
def _nearest_nb(X, C):
    n, d = X.shape
    k = C.shape[0]
    labels = np.empty(n, np.int64)
    dists = np.empty(n)
    for i in range(n):
        best = np.inf
        arg = 0
        for c in range(k):
            s = 0.0
            for j in range(d):
                diff = X[i, j] - C[c, j]
                s += diff * diff
            if s < best:
                best = s
                arg = c
        labels[i] = arg
        dists[i] = best
    return labels, dists


def _nearest_np(X, C, chunk=2048):
    n = X.shape[0]
    labels = np.empty(n, np.int64)
    dists = np.empty(n)
    for lo in range(0, n, chunk):
        diff = X[lo:lo + chunk, None, :] - C[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        labels[lo:lo + chunk] = np.argmin(d2, axis=1)
        dists[lo:lo + chunk] = d2[np.arange(d2.shape[0]), labels[lo:lo + chunk]]
    return labels, dists


# ---------------------------------------------------------------------------
# Asymmetric distance scan over PQ codes
# ---------------------------------------------------------------------------


@njit
def _adc_scan_nb(lut, codes):
    n, m = codes.shape
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += lut[j, codes[i, j]]
        out[i] = s
    return out


def _adc_scan_np(lut, codes):
    m = codes.shape[1]
    return lut[np.arange(m)[None, :], codes].sum(axis=1)


if USE_NUMBA:
    sgd_epoch = _sgd_epoch_nb
    sgd_hogwild = _sgd_hogwild_nb
    nearest_centroids = _nearest_nb
    adc_scan = _adc_scan_nb
else:
    sgd_epoch = _sgd_epoch_np
    sgd_hogwild = _sgd_hogwild_np

    def nearest_centroids(X, C):
        return _nearest_np(X, C)

    adc_scan = _adc_scan_np

# explicit handles for the benchmark and the cross-path tests
NUMBA_IMPLS = {
    "sgd_epoch": _sgd_epoch_nb,
    "nearest_centroids": _nearest_nb,
    "adc_scan": _adc_scan_nb,
}
NUMPY_IMPLS = {
    "sgd_epoch": _sgd_epoch_np,
    "nearest_centroids": _nearest_np,
    "adc_scan": _adc_scan_np,
}
