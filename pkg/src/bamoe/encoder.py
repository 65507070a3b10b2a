"""MoE-Adapter encoder stack.

Each layer runs a shared attention/feed-forward block, feeds its output
through a CN and an EN bottleneck adapter, and fuses the two adapter
outputs with per-frame convex gate coefficients.  With
``use_moe_adapter=False`` the layer is the shared block alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import counters
from .autodiff import ModelParams, Tape, Var
from .config import EncoderConfig
from .errors import BamoeError, ConfigError, DimensionError
from .nn import (
    add_attention,
    add_feed_forward,
    add_layer_norm,
    add_linear,
    attention,
    bind,
    block_mask,
    feed_forward,
    layer_norm,
    packed_positions,
    uniform_init,
)


@dataclass
class LayerCache:
    a: Var
    h_out: Var
    h_cn: Var | None = None
    h_en: Var | None = None
    gate: Var | None = None


@dataclass
class EncodeOutput:
    h_mix: Var
    caches: list[LayerCache]


def init_encoder(params: ModelParams, rng: np.random.Generator, cfg: EncoderConfig, moe: bool) -> None:
    d = cfg.d_model
    for l in range(cfg.num_layers):
        base = f"enc.layer{l}"
        add_layer_norm(params, f"{base}.shared.ln_att", d)
        add_attention(params, rng, f"{base}.shared.att", d)
        add_layer_norm(params, f"{base}.shared.ln_ff", d)
        add_feed_forward(params, rng, f"{base}.shared.ff", d, cfg.d_ff)
        if not moe:
            continue
        for lang in ("cn", "en"):
            name = f"{base}.adapter_{lang}"
            add_layer_norm(params, f"{name}.ln", d)
            params.add(f"{name}.w_up", uniform_init(rng, d, (d, cfg.d_adapter)))
            params.add(f"{name}.w_down", uniform_init(rng, cfg.d_adapter, (cfg.d_adapter, d)))
        add_linear(params, rng, f"{base}.gate", d, 2)


def shared_layer_forward(x: Var, p: dict[str, Var], cfg: EncoderConfig, mask: np.ndarray | None = None) -> Var:
    """Pre-norm self-attention and feed-forward, each with a residual."""
    if x.shape[1] != cfg.d_model:
        raise ConfigError(f"encoder input has {x.shape[1]} columns, config d_model={cfg.d_model}")
    normed = layer_norm(x, p, "ln_att", cfg.eps)
    y, _ = attention(normed, normed, p, "att", cfg.num_heads, mask)
    x = x + y
    return x + feed_forward(layer_norm(x, p, "ln_ff", cfg.eps), p, "ff")


def adapter_forward(a: Var, p: dict[str, Var], eps: float = 1e-5) -> Var:
    """``a + ReLU(LN(a) W_up) W_down``."""
    if a.shape[1] != p["w_up"].shape[0]:
        raise DimensionError(f"adapter input {a.shape} vs w_up {p['w_up'].shape}")
    path = ad.relu(layer_norm(a, p, "ln", eps) @ p["w_up"])
    return a + path @ p["w_down"]


def gate_fuse(h_cn: Var, h_en: Var, a: Var, p: dict[str, Var]) -> tuple[Var, Var]:
    """Frame-level convex mix of the two adapter outputs, conditioned on ``a``."""
    if not h_cn.shape == h_en.shape == a.shape:
        raise DimensionError(f"gate_fuse shapes differ: {h_cn.shape}, {h_en.shape}, {a.shape}")
    gate = ad.softmax_rows(a @ p["w"] + p["b"])
    h_out = ad.slice_cols(gate, 0, 1) * h_cn + ad.slice_cols(gate, 1, 2) * h_en
    return h_out, gate


def add_positions(tape: Tape, features, lengths: Sequence[int] | None = None) -> Var:
    x = features if isinstance(features, Var) else tape.const(features)
    t, d = x.shape
    return x + packed_positions(lengths or [t], d)


def encode(
    tape: Tape,
    features,
    params: ModelParams,
    cfg: EncoderConfig,
    moe: bool = True,
    lengths: Sequence[int] | None = None,
) -> EncodeOutput:
    """Run the encoder stack.

    ``lengths`` packs several utterances stacked along time into one call;
    a block-diagonal attention mask keeps them independent.
    """
    counters.bump("encode")
    x = features if isinstance(features, Var) else tape.const(features)
    if x.shape[0] < 1:
        raise DimensionError("encode needs at least one frame")
    mask = None
    if lengths is not None and len(lengths) > 1:
        if sum(lengths) != x.shape[0] or min(lengths) < 1:
            raise DimensionError(f"packed lengths {list(lengths)} do not cover {x.shape[0]} frames")
        mask = block_mask(lengths, lengths)
    x = add_positions(tape, x, lengths)
    caches = []
    for l in range(cfg.num_layers):
        try:
            a = shared_layer_forward(x, bind(tape, params, f"enc.layer{l}.shared"), cfg, mask)
            if moe:
                h_cn = adapter_forward(a, bind(tape, params, f"enc.layer{l}.adapter_cn"), cfg.eps)
                h_en = adapter_forward(a, bind(tape, params, f"enc.layer{l}.adapter_en"), cfg.eps)
                x, gate = gate_fuse(h_cn, h_en, a, bind(tape, params, f"enc.layer{l}.gate"))
                caches.append(LayerCache(a=a, h_out=x, h_cn=h_cn, h_en=h_en, gate=gate))
            else:
                x = a
                caches.append(LayerCache(a=a, h_out=x))
        except BamoeError as exc:
            raise type(exc)(f"encoder layer {l}: {exc}") from exc
    return EncodeOutput(h_mix=x, caches=caches)
