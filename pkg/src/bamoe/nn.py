"""Layer building blocks shared by the encoder and decoder."""

from __future__ import annotations

import functools
import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Tape, Var

NEG_INF_MASK = -1e9


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_linear(params: ModelParams, rng, name: str, d_in: int, d_out: int, bias: bool = True) -> None:
    params.add(f"{name}.w", uniform_init(rng, d_in, (d_in, d_out)))
    if bias:
        params.add(f"{name}.b", np.zeros((1, d_out)))


def add_layer_norm(params: ModelParams, name: str, d: int) -> None:
    params.add(f"{name}.gamma", np.ones((1, d)))
    params.add(f"{name}.beta", np.zeros((1, d)))


def add_attention(params: ModelParams, rng, name: str, d: int) -> None:
    for proj in ("wq", "wk", "wv", "wo"):
        params.add(f"{name}.{proj}", uniform_init(rng, d, (d, d)))


def add_feed_forward(params: ModelParams, rng, name: str, d: int, d_ff: int) -> None:
    add_linear(params, rng, f"{name}.fc1", d, d_ff)
    add_linear(params, rng, f"{name}.fc2", d_ff, d)


def bind(tape: Tape, params: ModelParams, prefix: str) -> dict[str, Var]:
    """Lift every parameter under ``prefix.`` onto the tape, keyed by the
    remainder of its name."""
    cut = len(prefix) + 1
    return {p.name[cut:]: tape.param(p) for p in params.with_prefix(prefix + ".")}


def linear(x: Var, p: dict[str, Var], name: str) -> Var:
    y = x @ p[f"{name}.w"]
    b = p.get(f"{name}.b")
    return y + b if b is not None else y


def layer_norm(x: Var, p: dict[str, Var], name: str, eps: float) -> Var:
    return ad.layer_norm_rows(x, p[f"{name}.gamma"], p[f"{name}.beta"], eps)


def feed_forward(x: Var, p: dict[str, Var], name: str) -> Var:
    return linear(ad.relu(linear(x, p, f"{name}.fc1")), p, f"{name}.fc2")


def attention(
    query: Var, memory: Var, p: dict[str, Var], name: str, num_heads: int, mask: np.ndarray | None = None
) -> tuple[Var, list[np.ndarray]]:
    """Multi-head scaled dot-product attention; returns the output and the
    per-head weight matrices (values only)."""
    q = query @ p[f"{name}.wq"]
    k = memory @ p[f"{name}.wk"]
    v = memory @ p[f"{name}.wv"]
    d = q.shape[1]
    dh = d // num_heads
    heads, weights = [], []
    for h in range(num_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(q, lo, hi) if num_heads > 1 else q
        kh = ad.slice_cols(k, lo, hi) if num_heads > 1 else k
        vh = ad.slice_cols(v, lo, hi) if num_heads > 1 else v
        scores = ad.scale(qh @ kh.T, 1.0 / math.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        w = ad.softmax_rows(scores)
        weights.append(w.value)
        heads.append(w @ vh)
    out = ad.concat_cols(heads) if num_heads > 1 else heads[0]
    return out @ p[f"{name}.wo"], weights


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), NEG_INF_MASK), k=1)


def block_mask(q_lengths: Sequence[int], k_lengths: Sequence[int], causal: bool = False) -> np.ndarray:
    """Additive mask for packed sequences: query block i sees key block i
    only (and, with ``causal``, only keys up to its own position)."""
    mask = np.full((sum(q_lengths), sum(k_lengths)), NEG_INF_MASK)
    qo = ko = 0
    for lq, lk in zip(q_lengths, k_lengths):
        mask[qo : qo + lq, ko : ko + lk] = causal_mask(lq) if causal else 0.0
        qo, ko = qo + lq, ko + lk
    return mask


def packed_positions(lengths: Sequence[int], d: int) -> np.ndarray:
    """Sinusoidal positions restarting at 0 for each packed sequence."""
    return np.vstack([sinusoidal_positions(n, d) for n in lengths])


@functools.lru_cache(maxsize=256)
def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Read-only (cached) n x d table."""
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table
