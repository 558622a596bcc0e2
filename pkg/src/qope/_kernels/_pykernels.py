"""Pure numpy implementations of the hot kernels.

These define the reference semantics; ``_ckernels.pyx`` mirrors them loop
for loop.  Parameter vectors for the mixture density network are flat:
for every weight layer ``l`` the row-major ``(sizes[l], sizes[l+1])`` weight
block is followed by its bias.  Hidden layers use tanh, the last layer is
linear and emits ``[logits(J), means(J), raw log-scales(J)]``.
"""
from __future__ import annotations

import numpy as np

NAME = "python"

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


def unpack(theta, sizes):
    layers = []
    off = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = theta[off : off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = theta[off : off + fan_out]
        off += fan_out
        layers.append((W, b))
    return layers


def mdn_nll_grad(theta, sizes, X, y, log_sigma_min):
    """Mean negative log-likelihood over the rows and its gradient."""
    layers = unpack(theta, sizes)
    n = X.shape[0]
    acts = [X]
    a = X
    for W, b in layers[:-1]:
        a = np.tanh(a @ W + b)
        acts.append(a)
    Wo, bo = layers[-1]
    out = a @ Wo + bo
    J = out.shape[1] // 3
    logits, mu, s = out[:, :J], out[:, J : 2 * J], out[:, 2 * J :]
    live = s > log_sigma_min
    log_sigma = np.where(live, s, log_sigma_min)
    sigma = np.exp(log_sigma)
    lmax = logits.max(axis=1, keepdims=True)
    log_alpha = logits - (lmax + np.log(np.exp(logits - lmax).sum(axis=1, keepdims=True)))
    z = (y[:, None] - mu) / sigma
    lp = log_alpha - 0.5 * z * z - log_sigma - _HALF_LOG_2PI
    pmax = lp.max(axis=1, keepdims=True)
    ll = pmax[:, 0] + np.log(np.exp(lp - pmax).sum(axis=1))
    gamma = np.exp(lp - ll[:, None])
    alpha = np.exp(log_alpha)
    d_out = np.empty_like(out)
    d_out[:, :J] = alpha - gamma
    d_out[:, J : 2 * J] = -gamma * z / sigma
    d_out[:, 2 * J :] = np.where(live, gamma * (1.0 - z * z), 0.0)
    d_out /= n

    grads = []
    delta = d_out
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        a_in = acts[l]
        grads.append((a_in.T @ delta, delta.sum(axis=0)))
        if l > 0:
            delta = (delta @ W.T) * (1.0 - a_in * a_in)
    grads.reverse()
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])
    return float(-ll.mean()), flat


def mdn_train(theta, sizes, X, y, perms, batch_size, lr, clip_norm, log_sigma_min):
    """Mini-batch Adam on the mixture NLL with global-norm gradient clipping.

    ``perms`` holds one row permutation per epoch and ``lr`` is a scalar
    or one step size per epoch.  Returns the final
    parameters and the per-epoch mean training NLL (evaluated before each
    step).  Training stops early, leaving NaN losses, on a non-finite loss.
    """
    theta = np.array(theta, dtype=float, copy=True)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    n = X.shape[0]
    epochs = perms.shape[0]
    rate = np.broadcast_to(np.asarray(lr, dtype=float), (epochs,))
    losses = np.full(epochs, np.nan)
    t = 0
    for e in range(epochs):
        total = 0.0
        perm = perms[e]
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            loss, g = mdn_nll_grad(theta, sizes, X[idx], y[idx], log_sigma_min)
            if not np.isfinite(loss):
                return theta, losses
            total += loss * idx.shape[0]
            norm = np.sqrt(np.dot(g, g))
            if norm > clip_norm:
                g = g * (clip_norm / norm)
            t += 1
            m = _ADAM_B1 * m + (1.0 - _ADAM_B1) * g
            v = _ADAM_B2 * v + (1.0 - _ADAM_B2) * g * g
            mhat = m / (1.0 - _ADAM_B1**t)
            vhat = v / (1.0 - _ADAM_B2**t)
            theta -= rate[e] * mhat / (np.sqrt(vhat) + _ADAM_EPS)
        losses[e] = total / n
    return theta, losses


def build_tree(X, g, h, order, max_depth, min_leaf, l2, min_gain):
    """Grow one second-order regression tree level by level.

    ``order[f]`` is the stable argsort of column ``f``.  Nodes are numbered
    breadth-first; ``feature == -1`` marks a leaf.  A sample goes left when
    ``x <= threshold``.  Returns the node arrays and each sample's leaf.
    """
    n, p = X.shape
    max_nodes = 2 ** (max_depth + 1) - 1
    feature = np.full(max_nodes, -1, dtype=np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, dtype=np.int64)
    right = np.full(max_nodes, -1, dtype=np.int64)
    value = np.zeros(max_nodes)
    node_of = np.zeros(n, dtype=np.int64)
    level = [0]
    count = 1
    for depth in range(max_depth + 1):
        next_level = []
        for node in level:
            members = np.flatnonzero(node_of == node)
            G = np.cumsum(g[members])[-1]
            H = np.cumsum(h[members])[-1]
            value[node] = -G / (H + l2)
            nn = members.shape[0]
            if depth == max_depth or nn < 2 * min_leaf:
                continue
            parent = G * G / (H + l2)
            best_gain, best_f, best_thr = min_gain, -1, 0.0
            in_node = node_of == node
            for f in range(p):
                o = order[f][in_node[order[f]]]
                xs = X[o, f]
                GL = np.cumsum(g[o])[:-1]
                HL = np.cumsum(h[o])[:-1]
                nl = np.arange(1, nn)
                ok = (xs[:-1] < xs[1:]) & (nl >= min_leaf) & (nn - nl >= min_leaf)
                if not ok.any():
                    continue
                GR = G - GL
                HR = H - HL
                gain = GL * GL / (HL + l2) + GR * GR / (HR + l2) - parent
                gain = np.where(ok, gain, -np.inf)
                j = int(np.argmax(gain))
                if gain[j] > best_gain:
                    best_gain, best_f = gain[j], f
                    best_thr = 0.5 * (xs[j] + xs[j + 1])
            if best_f < 0:
                continue
            feature[node] = best_f
            threshold[node] = best_thr
            left[node], right[node] = count, count + 1
            goes_left = X[members, best_f] <= best_thr
            node_of[members[goes_left]] = count
            node_of[members[~goes_left]] = count + 1
            next_level += [count, count + 1]
            count += 2
        level = next_level
        if not level:
            break
    return feature, threshold, left, right, value, node_of


def predict_forest(X, feature, threshold, left, right, value):
    """Sum of tree outputs; node arrays are stacked, shape (T, max_nodes)."""
    n = X.shape[0]
    out = np.zeros(n)
    rows = np.arange(n)
    for t in range(feature.shape[0]):
        node = np.zeros(n, dtype=np.int64)
        while True:
            f = feature[t, node]
            inner = f >= 0
            if not inner.any():
                break
            fi = np.where(inner, f, 0)
            go_left = X[rows, fi] <= threshold[t, node]
            nxt = np.where(go_left, left[t, node], right[t, node])
            node = np.where(inner, nxt, node)
        out += value[t, node]
    return out
