"""Naive per-vertex reference implementations of every operator.

These are deliberately written as plain double loops over dense numpy arrays,
independent of the autodiff primitives and of the vectorized forwards, so they
can serve as oracles in equivalence tests and in the `props` CLI check.
"""

from __future__ import annotations

import math

import numpy as np


def _neighbor_lists(g):
    out = [[] for _ in range(g.num_vertices)]
    for i, j in g.edges:
        out[int(i)].append(int(j))
    return out


def gcn_reference(X, g, theta):
    n = g.num_vertices
    a_tilde = np.eye(n)
    for i, j in g.edges:
        a_tilde[int(i), int(j)] = 1.0
    d_tilde = a_tilde.sum(axis=1)
    prop = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if a_tilde[i, j]:
                prop[i, j] = a_tilde[i, j] / math.sqrt(d_tilde[i] * d_tilde[j])
    return prop @ np.asarray(X) @ np.asarray(theta)


def chebnet_reference(X, g, thetas, center_weight=True):
    """thetas maps order k -> matrix; explicit dense polynomial evaluation."""
    n = g.num_vertices
    adj = np.zeros((n, n))
    for i, j in g.edges:
        adj[int(i), int(j)] = 1.0
    deg = adj.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1.0)), 0.0)
    lap = -(inv_sqrt[:, None] * adj * inv_sqrt[None, :])
    orders = sorted(thetas)
    polys = {0: np.eye(n), 1: lap}
    for k in range(2, max(orders) + 1):
        polys[k] = 2.0 * lap @ polys[k - 1] - polys[k - 2]
    X = np.asarray(X)
    out = np.zeros((n, np.asarray(thetas[orders[0]]).shape[1]))
    for k in orders:
        out += polys[k] @ X @ np.asarray(thetas[k])
    return out


def monet_reference(X, g, u, thetas, mu, log_sigma2):
    X = np.asarray(X)
    n = g.num_vertices
    m = len(thetas)
    cout = np.asarray(thetas[0]).shape[1]
    out = np.zeros((n, cout))
    for k in range(m):
        acc = np.zeros((n, X.shape[1]))
        for e, (i, j) in enumerate(g.edges):
            diff = u[e] - mu[k]
            w = math.exp(-0.5 * float(np.sum(diff * diff
                                             * np.exp(-log_sigma2[k]))))
            acc[int(i)] += w * X[int(j)]
        out += acc @ np.asarray(thetas[k])
    return out


def feastnet_reference(X, g, ws, bias, attn_u, attn_v, attn_c,
                       self_loops=True, translation_invariant=False):
    X = np.asarray(X)
    n = g.num_vertices
    m = len(ws)
    cout = np.asarray(ws[0]).shape[1]
    neigh = _neighbor_lists(g)
    if self_loops:
        for i in range(n):
            if i not in neigh[i]:
                neigh[i].append(i)
    else:
        neigh = [[j for j in lst if j != i] for i, lst in enumerate(neigh)]
    out = np.zeros((n, cout))
    for i in range(n):
        if not neigh[i]:
            continue
        acc = np.zeros(cout)
        for j in neigh[i]:
            if translation_invariant:
                scores = (X[j] - X[i]) @ attn_u + attn_c
            else:
                scores = X[i] @ attn_u + X[j] @ attn_v + attn_c
            scores = scores - scores.max()
            q = np.exp(scores)
            q = q / q.sum()
            for k in range(m):
                acc += q[k] * (X[j] @ np.asarray(ws[k]))
        out[i] = acc / len(neigh[i])
    if bias is not None:
        out = out + bias
    return out


def spiralnet_reference(X, sequences, weight):
    X = np.asarray(X)
    rows = []
    for seq in sequences:
        rows.append(np.concatenate([X[int(s)] for s in seq]))
    return np.stack(rows) @ np.asarray(weight)


def gin_reference(X, g, eps, w1, b1, w2, b2, norm_scale=None, norm_shift=None):
    X = np.asarray(X)
    neigh = _neighbor_lists(g)
    h = np.zeros_like(X)
    for i in range(g.num_vertices):
        acc = (1.0 + float(eps)) * X[i]
        for j in neigh[i]:
            acc = acc + X[j]
        h[i] = acc
    h = np.maximum(h @ np.asarray(w1) + b1, 0.0)
    out = h @ np.asarray(w2) + b2
    if norm_scale is not None:
        out = out * norm_scale + norm_shift
    return out


def _hat_weights(t, m):
    """Degree-1 B-spline basis values at scalar t in [0, 1]."""
    basis = np.zeros(m)
    if m == 1:
        basis[0] = 1.0
        return basis
    x = min(max(t, 0.0), 1.0) * (m - 1)
    i0 = min(int(x), m - 2)
    w = x - i0
    basis[i0] = 1.0 - w
    basis[i0 + 1] += w
    return basis


def splinecnn_reference(X, g, u, ws, m):
    X = np.asarray(X)
    n = g.num_vertices
    d = u.shape[1]
    cout = np.asarray(ws[0]).shape[1]
    out = np.zeros((n, cout))
    counts = np.zeros(n)
    for e, (i, j) in enumerate(g.edges):
        i, j = int(i), int(j)
        counts[i] += 1
        per_dim = [_hat_weights(u[e, a], m) for a in range(d)]
        for flat in range(m ** d):
            idx = []
            rest = flat
            for _ in range(d):
                idx.append(rest % m)
                rest //= m
            idx.reverse()
            coeff = 1.0
            for a in range(d):
                coeff *= per_dim[a][idx[a]]
            if coeff:
                out[i] += coeff * (X[j] @ np.asarray(ws[flat]))
    for i in range(n):
        if counts[i]:
            out[i] /= counts[i]
    return out


def affine_skip_reference(conv_out, X, skip_weight, skip_bias):
    return np.asarray(conv_out) + np.asarray(X) @ np.asarray(skip_weight) \
        + np.asarray(skip_bias)


def residual_reference(conv_out, X, out_channels):
    X = np.asarray(X)
    cin = X.shape[1]
    if cin == out_channels:
        shortcut = X
    elif cin < out_channels:
        shortcut = np.concatenate(
            [X, np.zeros((X.shape[0], out_channels - cin))], axis=1)
    else:
        shortcut = X[:, :out_channels]
    return np.asarray(conv_out) + shortcut
