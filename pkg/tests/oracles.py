"""Straight-line numpy re-implementations used as independent forward
oracles.  Nothing here touches the tape."""

import math
from functools import lru_cache

import numpy as np


def softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = (row - mu) / math.sqrt(var + eps)
    return out * gamma + beta


def mha(q_in, kv_in, wq, wk, wv, wo, heads, mask=None):
    q, k, v = q_in @ wq, kv_in @ wk, kv_in @ wv
    dh = q.shape[1] // heads
    outs = []
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        scores = q[:, s] @ k[:, s].T / math.sqrt(dh)
        if mask is not None:
            scores = np.where(mask, scores, -np.inf)
        outs.append(softmax(scores, 1) @ v[:, s])
    return np.hstack(outs) @ wo


def shared_layer(x, P, prefix, heads, eps=1e-5):
    g = lambda n: P[f"{prefix}.{n}"].value
    n1 = layer_norm(x, g("ln_att.gamma"), g("ln_att.beta"), eps)
    x = x + mha(n1, n1, g("att.wq"), g("att.wk"), g("att.wv"), g("att.wo"), heads)
    n2 = layer_norm(x, g("ln_ff.gamma"), g("ln_ff.beta"), eps)
    hidden = np.maximum(n2 @ g("ff.fc1.w") + g("ff.fc1.b"), 0)
    return x + hidden @ g("ff.fc2.w") + g("ff.fc2.b")


def positions(n, d):
    pe = np.zeros((n, d))
    for p in range(n):
        for i in range(d):
            angle = p / 10000 ** (2 * (i // 2) / d)
            pe[p, i] = math.sin(angle) if i % 2 == 0 else math.cos(angle)
    return pe


def decoder(memory, prefix, P, num_layers, heads, d):
    x = P["dec.embed"].value[prefix] * math.sqrt(d) + positions(len(prefix), d)
    n = len(prefix)
    causal = np.tril(np.ones((n, n), dtype=bool))
    for l in range(num_layers):
        g = lambda name: P[f"dec.layer{l}.{name}"].value
        a = layer_norm(x, g("ln_self.gamma"), g("ln_self.beta"))
        x = x + mha(a, a, g("self_att.wq"), g("self_att.wk"), g("self_att.wv"), g("self_att.wo"), heads, causal)
        b = layer_norm(x, g("ln_cross.gamma"), g("ln_cross.beta"))
        x = x + mha(b, memory, g("cross_att.wq"), g("cross_att.wk"), g("cross_att.wv"), g("cross_att.wo"), heads)
        c = layer_norm(x, g("ln_ff.gamma"), g("ln_ff.beta"))
        x = x + np.maximum(c @ g("ff.fc1.w") + g("ff.fc1.b"), 0) @ g("ff.fc2.w") + g("ff.fc2.b")
    top = layer_norm(x, P["dec.ln_out.gamma"].value, P["dec.ln_out.beta"].value)
    return top @ P["dec.out.w"].value + P["dec.out.b"].value


def edit_distance(ref, hyp):
    """Plain recursive Levenshtein with memoisation."""
    ref, hyp = tuple(ref), tuple(hyp)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]), d(i, j - 1) + 1, d(i - 1, j) + 1)

    return d(len(ref), len(hyp))
