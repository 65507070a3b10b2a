"""Cross-layer language adaptation: monolingual target masking, the
per-language mean of adapter outputs over all layers, and the averaged
CN/EN CTC objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import counters
from .autodiff import ModelParams, Tape, Var
from .ctc import ctc_loss
from .encoder import LayerCache
from .errors import ContractError, FeasibilityError
from .nn import add_linear, bind
from .vocab import CN, EN, UNK, check_lang


@dataclass(frozen=True)
class MaskedTargets:
    y_cn: tuple[int, ...]
    y_en: tuple[int, ...]


def mask_targets(tokens: Sequence[int], langs: Sequence[str]) -> MaskedTargets:
    if len(tokens) != len(langs):
        raise ContractError(f"{len(tokens)} tokens but {len(langs)} language tags")
    y_cn, y_en = [], []
    for tok, lang in zip(tokens, langs):
        is_cn = check_lang(lang) == CN
        y_cn.append(tok if is_cn else UNK)
        y_en.append(UNK if is_cn else tok)
    return MaskedTargets(tuple(y_cn), tuple(y_en))


def init_cla_heads(params: ModelParams, rng: np.random.Generator, d: int, vocab_size: int) -> None:
    add_linear(params, rng, "cla.cn_head", d, vocab_size)
    add_linear(params, rng, "cla.en_head", d, vocab_size)


def cross_layer_adapter_mean(caches: Sequence[LayerCache], lang: str) -> Var:
    if not caches:
        raise ContractError("cross_layer_adapter_mean needs at least one layer cache")
    attr = "h_cn" if check_lang(lang) == CN else "h_en"
    outs = [getattr(c, attr) for c in caches]
    if any(o is None for o in outs):
        raise ContractError("layer caches carry no adapter outputs (MoE-Adapter disabled)")
    return ad.mean_over(outs)


def combine(l_cn, l_en):
    return (l_cn + l_en) * 0.5


def cla_loss(tape: Tape, caches: Sequence[LayerCache], masked: MaskedTargets, params: ModelParams) -> Var:
    return cla_heads_loss(
        tape, cross_layer_adapter_mean(caches, CN), cross_layer_adapter_mean(caches, EN), masked, params
    )


def cla_heads_loss(tape: Tape, h_cn: Var, h_en: Var, masked: MaskedTargets, params: ModelParams) -> Var:
    """CLA loss from precomputed cross-layer means."""
    counters.bump("cla")
    parts = []
    for lang, h, target, head in ((CN, h_cn, masked.y_cn, "cla.cn_head"), (EN, h_en, masked.y_en, "cla.en_head")):
        p = bind(tape, params, head)
        log_probs = ad.log_softmax_rows(h @ p["w"] + p["b"])
        try:
            parts.append(ctc_loss(log_probs, target))
        except FeasibilityError as exc:
            raise FeasibilityError(f"{lang} CLA target: {exc}") from exc
    return combine(parts[0], parts[1])
