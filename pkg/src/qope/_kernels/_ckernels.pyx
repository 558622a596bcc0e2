# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pykernels``; same semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh, INFINITY, isfinite

cnp.import_array()

NAME = "cython"

cdef double HALF_LOG_2PI = 0.5 * log(2.0 * 3.141592653589793)
cdef double ADAM_B1 = 0.9
cdef double ADAM_B2 = 0.999
cdef double ADAM_EPS = 1e-8


cdef double _sample_pass(
    const double[::1] theta, const long[::1] sizes, const long[::1] w_off,
    const long[::1] b_off, const long[::1] a_off, const double[:, ::1] X,
    Py_ssize_t row, double y, double log_sigma_min, double scale,
    double[::1] acts, double[::1] delta, double[::1] delta_prev,
    double[::1] head, double[::1] grad) noexcept nogil:
    """Forward and backward pass for one row; accumulates scale*grad, returns -loglik."""
    cdef Py_ssize_t nl = sizes.shape[0] - 1
    cdef Py_ssize_t l, i, j, fin, fout, J
    cdef double s, acc, lmax, lse, pmax, ll, z, sig
    fin = sizes[0]
    for i in range(fin):
        acts[i] = X[row, i]
    for l in range(nl):
        fin = sizes[l]
        fout = sizes[l + 1]
        for j in range(fout):
            acc = theta[b_off[l] + j]
            for i in range(fin):
                acc += acts[a_off[l] + i] * theta[w_off[l] + i * fout + j]
            if l < nl - 1:
                acc = tanh(acc)
            acts[a_off[l + 1] + j] = acc
    fout = sizes[nl]
    J = fout // 3
    cdef Py_ssize_t o = a_off[nl]
    # head: head[0:J] log_alpha, head[J:2J] z, head[2J:3J] log-density terms
    lmax = acts[o]
    for j in range(1, J):
        if acts[o + j] > lmax:
            lmax = acts[o + j]
    lse = 0.0
    for j in range(J):
        lse += exp(acts[o + j] - lmax)
    lse = lmax + log(lse)
    pmax = -INFINITY
    for j in range(J):
        head[j] = acts[o + j] - lse
        s = acts[o + 2 * J + j]
        if s < log_sigma_min or s == log_sigma_min:
            s = log_sigma_min
        z = (y - acts[o + J + j]) / exp(s)
        head[J + j] = z
        head[2 * J + j] = head[j] - 0.5 * z * z - s - HALF_LOG_2PI
        if head[2 * J + j] > pmax:
            pmax = head[2 * J + j]
    acc = 0.0
    for j in range(J):
        acc += exp(head[2 * J + j] - pmax)
    ll = pmax + log(acc)
    for j in range(J):
        z = head[J + j]
        acc = exp(head[2 * J + j] - ll)  # responsibility
        delta[j] = (exp(head[j]) - acc) * scale
        s = acts[o + 2 * J + j]
        if s > log_sigma_min:
            sig = exp(s)
            delta[2 * J + j] = acc * (1.0 - z * z) * scale
        else:
            sig = exp(log_sigma_min)
            delta[2 * J + j] = 0.0
        delta[J + j] = -acc * z / sig * scale
    for l in range(nl - 1, -1, -1):
        fin = sizes[l]
        fout = sizes[l + 1]
        for i in range(fin):
            acc = acts[a_off[l] + i]
            for j in range(fout):
                grad[w_off[l] + i * fout + j] += acc * delta[j]
        for j in range(fout):
            grad[b_off[l] + j] += delta[j]
        if l > 0:
            for i in range(fin):
                acc = 0.0
                for j in range(fout):
                    acc += theta[w_off[l] + i * fout + j] * delta[j]
                s = acts[a_off[l] + i]
                delta_prev[i] = acc * (1.0 - s * s)
            for i in range(fin):
                delta[i] = delta_prev[i]
    return -ll


def _offsets(long[::1] sizes):
    nl = sizes.shape[0] - 1
    w_off = np.zeros(nl, dtype=np.int64)
    b_off = np.zeros(nl, dtype=np.int64)
    a_off = np.zeros(nl + 1, dtype=np.int64)
    off = 0
    aoff = 0
    for l in range(nl):
        w_off[l] = off
        off += sizes[l] * sizes[l + 1]
        b_off[l] = off
        off += sizes[l + 1]
        a_off[l] = aoff
        aoff += sizes[l]
    a_off[nl] = aoff
    return w_off, b_off, a_off, off, aoff + sizes[nl]


def mdn_nll_grad(theta, sizes, X, y, double log_sigma_min):
    cdef long[::1] sz = np.ascontiguousarray(sizes, dtype=np.int64)
    cdef double[::1] th = np.ascontiguousarray(theta, dtype=np.float64)
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    w_off, b_off, a_off, P, A = _offsets(sz)
    cdef long[::1] wo = w_off, bo = b_off, ao = a_off
    width = int(np.max(sizes))
    cdef double[::1] acts = np.zeros(A)
    cdef double[::1] delta = np.zeros(width)
    cdef double[::1] delta_prev = np.zeros(width)
    cdef double[::1] head = np.zeros(sz[sz.shape[0] - 1])
    grad = np.zeros(P)
    cdef double[::1] gv = grad
    cdef Py_ssize_t n = Xv.shape[0], r
    cdef double total = 0.0
    cdef double scale = 1.0 / n
    with nogil:
        for r in range(n):
            total += _sample_pass(th, sz, wo, bo, ao, Xv, r, yv[r], log_sigma_min, scale,
                                  acts, delta, delta_prev, head, gv)
    return total / n, grad


def mdn_train(theta, sizes, X, y, perms, Py_ssize_t batch_size, lr,
              double clip_norm, double log_sigma_min):
    cdef long[::1] sz = np.ascontiguousarray(sizes, dtype=np.int64)
    out = np.array(theta, dtype=np.float64, copy=True)
    cdef double[::1] th = out
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef long[:, ::1] pv = np.ascontiguousarray(perms, dtype=np.int64)
    cdef double[::1] rate = np.array(np.broadcast_to(lr, (pv.shape[0],)), dtype=np.float64)
    w_off, b_off, a_off, P_obj, A = _offsets(sz)
    cdef Py_ssize_t P = P_obj
    cdef long[::1] wo = w_off, bo = b_off, ao = a_off
    width = int(np.max(sizes))
    cdef double[::1] acts = np.zeros(A)
    cdef double[::1] delta = np.zeros(width)
    cdef double[::1] delta_prev = np.zeros(width)
    cdef double[::1] head = np.zeros(sz[sz.shape[0] - 1])
    cdef double[::1] grad = np.zeros(P)
    cdef double[::1] m = np.zeros(P)
    cdef double[::1] v = np.zeros(P)
    losses = np.full(pv.shape[0], np.nan)
    cdef double[::1] lv = losses
    cdef Py_ssize_t n = Xv.shape[0], epochs = pv.shape[0]
    cdef Py_ssize_t e, start, stop, k, q
    cdef long t = 0
    cdef double total, bl, norm, scale, b1t = 1.0, b2t = 1.0, g, mh, vh
    cdef bint failed = False
    with nogil:
        for e in range(epochs):
            total = 0.0
            start = 0
            while start < n:
                stop = start + batch_size
                if stop > n:
                    stop = n
                for q in range(P):
                    grad[q] = 0.0
                scale = 1.0 / (stop - start)
                bl = 0.0
                for k in range(start, stop):
                    bl += _sample_pass(th, sz, wo, bo, ao, Xv, pv[e, k], yv[pv[e, k]],
                                       log_sigma_min, scale, acts, delta, delta_prev, head, grad)
                bl = bl / (stop - start)
                if not isfinite(bl):
                    failed = True
                    break
                total += bl * (stop - start)
                norm = 0.0
                for q in range(P):
                    norm += grad[q] * grad[q]
                norm = sqrt(norm)
                if norm > clip_norm:
                    scale = clip_norm / norm
                    for q in range(P):
                        grad[q] = grad[q] * scale
                t += 1
                b1t = b1t * ADAM_B1
                b2t = b2t * ADAM_B2
                for q in range(P):
                    g = grad[q]
                    m[q] = ADAM_B1 * m[q] + (1.0 - ADAM_B1) * g
                    v[q] = ADAM_B2 * v[q] + (1.0 - ADAM_B2) * g * g
                    mh = m[q] / (1.0 - b1t)
                    vh = v[q] / (1.0 - b2t)
                    th[q] -= rate[e] * mh / (sqrt(vh) + ADAM_EPS)
                start = stop
            if failed:
                break
            lv[e] = total / n
    return out, losses


def build_tree(X, g, h, order, int max_depth, Py_ssize_t min_leaf, double l2, double min_gain):
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] hv = np.ascontiguousarray(h, dtype=np.float64)
    cdef long[:, ::1] ov = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t n = Xv.shape[0], p = Xv.shape[1]
    cdef Py_ssize_t max_nodes = (1 << (max_depth + 1)) - 1
    feature_a = np.full(max_nodes, -1, dtype=np.int64)
    threshold_a = np.zeros(max_nodes)
    left_a = np.full(max_nodes, -1, dtype=np.int64)
    right_a = np.full(max_nodes, -1, dtype=np.int64)
    value_a = np.zeros(max_nodes)
    node_of_a = np.zeros(n, dtype=np.int64)
    cdef long[::1] feature = feature_a, left = left_a, right = right_a, node_of = node_of_a
    cdef double[::1] threshold = threshold_a, value = value_a
    # per-node scratch
    cdef double[::1] G = np.zeros(max_nodes), H = np.zeros(max_nodes)
    cdef double[::1] GL = np.zeros(max_nodes), HL = np.zeros(max_nodes)
    cdef double[::1] prev_x = np.zeros(max_nodes)
    cdef double[::1] best_gain = np.zeros(max_nodes), best_thr = np.zeros(max_nodes)
    cdef double[::1] parent = np.zeros(max_nodes)
    cdef long[::1] cnt = np.zeros(max_nodes, dtype=np.int64)
    cdef long[::1] size = np.zeros(max_nodes, dtype=np.int64)
    cdef long[::1] best_f = np.zeros(max_nodes, dtype=np.int64)
    cdef long[::1] cur_best_pos = np.zeros(max_nodes, dtype=np.int64)
    cdef double[::1] cur_best_gain = np.zeros(max_nodes), cur_best_thr = np.zeros(max_nodes)
    cdef unsigned char[::1] active = np.zeros(max_nodes, dtype=np.uint8)
    cdef long lo = 0, hi = 1, count = 1, nd, i, j, f, depth, nl
    cdef double x, gr, hr, gain, GLn, HLn
    with nogil:
        for depth in range(max_depth + 1):
            # nodes lo..hi-1 form the current level
            for nd in range(lo, hi):
                G[nd] = 0.0
                H[nd] = 0.0
                size[nd] = 0
            for i in range(n):
                nd = node_of[i]
                if nd >= lo and nd < hi:
                    G[nd] += gv[i]
                    H[nd] += hv[i]
                    size[nd] += 1
            for nd in range(lo, hi):
                value[nd] = -G[nd] / (H[nd] + l2)
                active[nd] = depth < max_depth and size[nd] >= 2 * min_leaf
                parent[nd] = G[nd] * G[nd] / (H[nd] + l2)
                best_gain[nd] = min_gain
                best_f[nd] = -1
            if depth == max_depth:
                break
            for f in range(p):
                for nd in range(lo, hi):
                    GL[nd] = 0.0
                    HL[nd] = 0.0
                    cnt[nd] = 0
                    cur_best_gain[nd] = -INFINITY
                for j in range(n):
                    i = ov[f, j]
                    nd = node_of[i]
                    if nd < lo or nd >= hi or not active[nd]:
                        continue
                    x = Xv[i, f]
                    nl = cnt[nd]
                    if nl > 0 and prev_x[nd] < x and nl >= min_leaf and size[nd] - nl >= min_leaf:
                        gr = G[nd] - GL[nd]
                        hr = H[nd] - HL[nd]
                        gain = GL[nd] * GL[nd] / (HL[nd] + l2) + gr * gr / (hr + l2) - parent[nd]
                        if gain > cur_best_gain[nd]:
                            cur_best_gain[nd] = gain
                            cur_best_thr[nd] = 0.5 * (prev_x[nd] + x)
                    GL[nd] += gv[i]
                    HL[nd] += hv[i]
                    cnt[nd] = nl + 1
                    prev_x[nd] = x
                for nd in range(lo, hi):
                    if active[nd] and cur_best_gain[nd] > best_gain[nd]:
                        best_gain[nd] = cur_best_gain[nd]
                        best_f[nd] = f
                        best_thr[nd] = cur_best_thr[nd]
            for nd in range(lo, hi):
                if active[nd] and best_f[nd] >= 0:
                    feature[nd] = best_f[nd]
                    threshold[nd] = best_thr[nd]
                    left[nd] = count
                    right[nd] = count + 1
                    count += 2
            for i in range(n):
                nd = node_of[i]
                if nd >= lo and nd < hi and feature[nd] >= 0:
                    if Xv[i, feature[nd]] <= threshold[nd]:
                        node_of[i] = left[nd]
                    else:
                        node_of[i] = right[nd]
            lo = hi
            hi = count
            if lo == hi:
                break
    return feature_a, threshold_a, left_a, right_a, value_a, node_of_a


def predict_forest(X, feature, threshold, left, right, value):
    cdef double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef long[:, ::1] fv = np.ascontiguousarray(feature, dtype=np.int64)
    cdef long[:, ::1] lv = np.ascontiguousarray(left, dtype=np.int64)
    cdef long[:, ::1] rv = np.ascontiguousarray(right, dtype=np.int64)
    cdef double[:, ::1] tv = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef double[:, ::1] vv = np.ascontiguousarray(value, dtype=np.float64)
    cdef Py_ssize_t n = Xv.shape[0], T = fv.shape[0], r, t
    cdef long node
    out = np.zeros(n)
    cdef double[::1] ov = out
    with nogil:
        for r in range(n):
            for t in range(T):
                node = 0
                while fv[t, node] >= 0:
                    if Xv[r, fv[t, node]] <= tv[t, node]:
                        node = lv[t, node]
                    else:
                        node = rv[t, node]
                ov[r] += vv[t, node]
    return out
