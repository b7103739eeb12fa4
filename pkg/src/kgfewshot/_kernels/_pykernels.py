"""Pure numpy implementations of the hot kernels.

These are the reference versions; the Cython module ``_ckernels`` mirrors
every function here with identical signatures.
"""

import numpy as np


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gated_forward(a, h, ub, wza, wzh, bz, wra, wrh, br, wua, wuh):
    """Gated node update for all rows at once.

    ``ub`` is a single row added to the candidate pre-activation (image
    projection plus update bias). Returns ``(h_new, z, r, u)``.
    """
    z = _sigmoid(a @ wza + h @ wzh + bz)
    r = _sigmoid(a @ wra + h @ wrh + br)
    u = np.tanh(a @ wua + (r * h) @ wuh + ub)
    h_new = (1.0 - z) * h + z * u
    return h_new, z, r, u


def gated_backward(g, a, h, z, r, u, wza, wzh, wra, wrh, wua, wuh):
    dz = g * (u - h)
    du = g * z
    dh = g * (1.0 - z)
    pz = dz * z * (1.0 - z)
    pu = du * (1.0 - u * u)
    rh = r * h
    drh = pu @ wuh.T
    dr = drh * h
    dh += drh * r
    pr = dr * r * (1.0 - r)
    da = pz @ wza.T + pr @ wra.T + pu @ wua.T
    dh += pz @ wzh.T + pr @ wrh.T
    return (
        da,
        dh,
        pu.sum(axis=0, keepdims=True),
        a.T @ pz,
        h.T @ pz,
        pz.sum(axis=0, keepdims=True),
        a.T @ pr,
        h.T @ pr,
        pr.sum(axis=0, keepdims=True),
        a.T @ pu,
        rh.T @ pu,
    )


def ap_columns(scores, truths):
    """Non-interpolated average precision for every column.

    Ranking is by descending score with ties broken by ascending row index.
    Columns without a positive get ``nan``.
    """
    n, m = scores.shape
    out = np.full(m, np.nan)
    for j in range(m):
        order = np.argsort(-scores[:, j], kind="stable")
        rel = truths[order, j] > 0
        npos = int(rel.sum())
        if npos == 0:
            continue
        hits = np.cumsum(rel)
        ranks = np.arange(1, n + 1)
        out[j] = float(np.sum(hits[rel] / ranks[rel]) / npos)
    return out
