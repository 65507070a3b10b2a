"""Transformer decoder shared by the ASR branch and the boundary branch."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Tape, Var
from .config import DecoderConfig
from .errors import ContractError, DimensionError
from .nn import (
    NEG_INF_MASK,
    add_attention,
    add_feed_forward,
    add_layer_norm,
    add_linear,
    attention,
    bind,
    block_mask,
    causal_mask,
    feed_forward,
    layer_norm,
    linear,
    packed_positions,
    uniform_init,
)
from .vocab import BLANK, EOS, SOS

EPS = 1e-5


def init_decoder(params: ModelParams, rng: np.random.Generator, cfg: DecoderConfig, vocab_size: int) -> None:
    d = cfg.d_model
    params.add("dec.embed", uniform_init(rng, d, (vocab_size, d)))
    for l in range(cfg.num_layers):
        base = f"dec.layer{l}"
        add_layer_norm(params, f"{base}.ln_self", d)
        add_attention(params, rng, f"{base}.self_att", d)
        add_layer_norm(params, f"{base}.ln_cross", d)
        add_attention(params, rng, f"{base}.cross_att", d)
        add_layer_norm(params, f"{base}.ln_ff", d)
        add_feed_forward(params, rng, f"{base}.ff", d, cfg.d_ff)
    add_layer_norm(params, "dec.ln_out", d)
    add_linear(params, rng, "dec.out", d, vocab_size)


def decoder_forward(
    tape: Tape,
    memory: Var,
    prefix: Sequence[int],
    params: ModelParams,
    cfg: DecoderConfig,
    lengths: Sequence[int] | None = None,
    memory_lengths: Sequence[int] | None = None,
) -> Var:
    """Logits (len(prefix) x V); row i sees prefix[:i+1] and all of memory.

    With ``lengths``/``memory_lengths`` the prefix and memory hold several
    packed sequences, and sequence k attends only to its own rows.
    """
    if len(prefix) == 0:
        raise ContractError("decoder prefix must be non-empty (start with <sos>)")
    if memory.shape[0] < 1:
        raise DimensionError("decoder memory needs at least one row")
    if memory.shape[1] != cfg.d_model:
        raise DimensionError(f"memory width {memory.shape[1]} != d_model {cfg.d_model}")
    n, d = len(prefix), cfg.d_model
    if lengths is None:
        lengths, self_mask, cross_mask = [n], causal_mask(n), None
    else:
        if memory_lengths is None or len(memory_lengths) != len(lengths):
            raise ContractError("packed decoding needs one memory length per prefix")
        if sum(lengths) != n or sum(memory_lengths) != memory.shape[0]:
            raise DimensionError("packed lengths do not cover the prefix and memory rows")
        self_mask = block_mask(lengths, lengths, causal=True)
        cross_mask = block_mask(lengths, memory_lengths)
    x = ad.scale(ad.gather_rows(tape.param(params["dec.embed"]), prefix), math.sqrt(d))
    x = x + packed_positions(lengths, d)
    for l in range(cfg.num_layers):
        p = bind(tape, params, f"dec.layer{l}")
        normed = layer_norm(x, p, "ln_self", EPS)
        y, _ = attention(normed, normed, p, "self_att", cfg.num_heads, self_mask)
        x = x + y
        y, _ = attention(layer_norm(x, p, "ln_cross", EPS), memory, p, "cross_att", cfg.num_heads, cross_mask)
        x = x + y
        x = x + feed_forward(layer_norm(x, p, "ln_ff", EPS), p, "ff")
    top = bind(tape, params, "dec")
    return linear(layer_norm(x, top, "ln_out", EPS), top, "out")


def ce_loss(logits: Var, target: Sequence[int]) -> Var:
    """Mean token negative log-likelihood (no label smoothing)."""
    target = list(target)
    n, v = logits.shape
    if len(target) != n:
        raise DimensionError(f"ce_loss: {n} logit rows but target length {len(target)}")
    if any(not 0 <= t < v for t in target):
        raise ContractError(f"ce_loss: target id outside vocabulary of size {v}")
    return ad.scale(ad.sum_all(ad.pick(ad.log_softmax_rows(logits), target)), -1.0 / n)


def teacher_forcing(tokens: Sequence[int]) -> tuple[list[int], list[int]]:
    """(<sos> + tokens, tokens + <eos>)."""
    return [SOS, *tokens], [*tokens, EOS]


def greedy_decode(memory: Var, params: ModelParams, cfg: DecoderConfig, max_len: int) -> list[int]:
    """Autoregressive argmax from <sos>; never emits <sos> or blank."""
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    memory_value = memory.value if isinstance(memory, Var) else np.asarray(memory, dtype=np.float64)
    prefix = [SOS]
    out: list[int] = []
    for _ in range(max_len):
        tape = Tape()
        logits = decoder_forward(tape, tape.const(memory_value), prefix, params, cfg).value[-1].copy()
        logits[[BLANK, SOS]] = NEG_INF_MASK
        nxt = int(logits.argmax())
        if nxt == EOS:
            break
        out.append(nxt)
        prefix.append(nxt)
    return out
