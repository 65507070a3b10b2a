"""Parameter store construction for a full model under a given flag set."""

from __future__ import annotations

import re

import numpy as np

from .autodiff import ModelParams
from .boundary import init_boundary
from .cla import init_cla_heads
from .config import ModelConfig
from .decoder import init_decoder
from .encoder import init_encoder
from .nn import add_linear

_LAYER = re.compile(r"^layer\d+$")


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = cfg.encoder.d_model
    v = cfg.vocab.size
    params = ModelParams()
    init_encoder(params, rng, cfg.encoder, cfg.use_moe_adapter)
    add_linear(params, rng, "ctc", d, v)
    init_decoder(params, rng, cfg.decoder, v)
    if cfg.use_cla:
        init_cla_heads(params, rng, d, v)
    if cfg.use_bat:
        init_boundary(params, rng, cfg.boundary, d)
    return params


def param_group(name: str) -> str:
    """Layer-independent group of a parameter, e.g.
    ``enc.layer1.adapter_cn.w_up`` -> ``enc.adapter_cn``."""
    parts = [p for p in name.split(".") if not _LAYER.match(p)]
    return ".".join(parts[:2]) if len(parts) > 2 else parts[0]


def adapter_param_count(params: ModelParams) -> int:
    return sum(p.value.size for p in params if ".adapter_" in p.name or ".gate." in p.name)
