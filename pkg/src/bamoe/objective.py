"""Weighted sum of the four training losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Tape, Var
from .boundary import boundary_ctc, boundary_forward, boundary_loss, boundary_targets
from .cla import cla_heads_loss, cla_loss, cross_layer_adapter_mean, mask_targets
from .config import LossWeights, ModelConfig
from .ctc import ctc_loss
from .data import Utterance
from .decoder import ce_loss, decoder_forward, teacher_forcing
from .encoder import EncodeOutput, encode
from .errors import BamoeError, ContractError
from .nn import bind
from .vocab import CN, EN, Vocab


@dataclass
class LossReport:
    l_ce: float
    l_ctc: float
    l_cla: float
    l_b: float
    total: float
    total_node: Var | None = field(default=None, repr=False, compare=False)
    encoded: EncodeOutput | None = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict[str, float]:
        return {"l_ce": self.l_ce, "l_ctc": self.l_ctc, "l_cla": self.l_cla, "l_b": self.l_b, "total": self.total}


def combine(weights: LossWeights, l_ce, l_ctc, l_cla, l_b):
    return (
        weights.lambda_ce * l_ce
        + weights.lambda_ctc * l_ctc
        + weights.lambda_c * l_cla
        + weights.lambda_b * l_b
    )


def ce_target(tokens: Sequence[int], langs: Sequence[str]) -> list[int]:
    """Decoder target with a <CN>/<EN> tag opening every language segment."""
    out: list[int] = []
    prev = None
    for tok, lang in zip(tokens, langs):
        if lang != prev:
            out.append(Vocab.tag_token(lang))
            prev = lang
        out.append(tok)
    return out


def _component(name: str, fn, *args):
    try:
        return fn(*args)
    except BamoeError as exc:
        raise type(exc)(f"{name} loss: {exc}") from exc


def total_loss(tape: Tape, utt: Utterance, params: ModelParams, cfg: ModelConfig, weights: LossWeights) -> LossReport:
    """Encode once and combine CE, CTC, CLA and boundary losses.

    A branch whose flag is off or whose weight is zero is not evaluated and
    reports 0.
    """
    enc = encode(tape, utt.features, params, cfg.encoder, cfg.use_moe_adapter)
    h = enc.h_mix

    head = {"w": tape.param(params["ctc.w"]), "b": tape.param(params["ctc.b"])}
    log_probs = ad.log_softmax_rows(h @ head["w"] + head["b"])
    l_ctc = _component("ctc", ctc_loss, log_probs, utt.tokens)

    prefix, target = teacher_forcing(ce_target(utt.tokens, utt.langs))
    l_ce = _component("ce", lambda: ce_loss(decoder_forward(tape, h, prefix, params, cfg.decoder), target))

    terms = [weights.lambda_ce * l_ce, weights.lambda_ctc * l_ctc]
    l_cla_value = l_b_value = 0.0
    if cfg.use_cla and weights.lambda_c > 0:
        l_cla = _component("cla", cla_loss, tape, enc.caches, mask_targets(utt.tokens, utt.langs), params)
        terms.append(weights.lambda_c * l_cla)
        l_cla_value = l_cla.item()
    if cfg.use_bat and weights.lambda_b > 0:
        targets = boundary_targets(utt.langs, cfg.boundary.d_r)
        _, h_b = boundary_forward(tape, h, params)
        lb = _component("boundary", boundary_loss, tape, h_b, targets, params, cfg.decoder)
        terms.append(weights.lambda_b * lb.total)
        l_b_value = lb.total.item()

    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return LossReport(
        l_ce=l_ce.item(),
        l_ctc=l_ctc.item(),
        l_cla=l_cla_value,
        l_b=l_b_value,
        total=total.item(),
        total_node=total,
        encoded=enc,
    )


def batch_loss(utts: Sequence[Utterance], params: ModelParams, cfg: ModelConfig, weights: LossWeights, backward: bool = True) -> LossReport:
    """Equal-weight mean of :func:`total_loss` over ``utts``; gradients of
    that mean accumulate into ``params`` when ``backward`` is set.

    The batch runs as one packed graph: utterances are stacked along time
    and kept apart by block-diagonal attention masks, so each utterance sees
    exactly what it would see alone.
    """
    if not utts:
        raise ContractError("batch_loss needs at least one utterance")
    n = len(utts)
    tape = Tape()
    lengths = [u.num_frames for u in utts]
    edges = np.cumsum([0, *lengths])
    enc = encode(tape, np.vstack([u.features for u in utts]), params, cfg.encoder, cfg.use_moe_adapter, lengths)
    h = enc.h_mix

    def rows(x: Var, i: int) -> Var:
        return x if n == 1 else ad.slice_rows(x, int(edges[i]), int(edges[i + 1]))

    head = bind(tape, params, "ctc")
    log_probs = ad.log_softmax_rows(h @ head["w"] + head["b"])
    l_ctc = [_component("ctc", ctc_loss, rows(log_probs, i), u.tokens) for i, u in enumerate(utts)]

    # decoder inputs: every ASR sequence, then every boundary sequence
    prefixes, targets, memories, mem_lengths = [], [], [h], list(lengths)
    for u in utts:
        prefix, target = teacher_forcing(ce_target(u.tokens, u.langs))
        prefixes.append(prefix)
        targets.append(target)

    l_cla = [None] * n
    if cfg.use_cla and weights.lambda_c > 0:
        h_cn, h_en = cross_layer_adapter_mean(enc.caches, CN), cross_layer_adapter_mean(enc.caches, EN)
        for i, u in enumerate(utts):
            l_cla[i] = _component("cla", cla_heads_loss, tape, rows(h_cn, i), rows(h_en, i), mask_targets(u.tokens, u.langs), params)

    l_bctc = [None] * n
    use_bat = cfg.use_bat and weights.lambda_b > 0
    if use_bat:
        for i, u in enumerate(utts):
            b_targets = boundary_targets(u.langs, cfg.boundary.d_r)
            _, h_b = boundary_forward(tape, rows(h, i), params)
            l_bctc[i] = _component("boundary", boundary_ctc, tape, h_b, b_targets, params)
            prefix, target = teacher_forcing(b_targets.decoder_ids())
            prefixes.append(prefix)
            targets.append(target)
            memories.append(h_b)
            mem_lengths.append(h_b.shape[0])

    seq_lengths = [len(p) for p in prefixes]
    memory = memories[0] if len(memories) == 1 else ad.concat_rows(memories)
    logits = _component(
        "ce",
        decoder_forward,
        tape,
        memory,
        [t for p in prefixes for t in p],
        params,
        cfg.decoder,
        seq_lengths if len(prefixes) > 1 else None,
        mem_lengths if len(prefixes) > 1 else None,
    )
    nll = ad.pick(ad.log_softmax_rows(logits), [t for tg in targets for t in tg])
    seq_edges = np.cumsum([0, *seq_lengths])
    ce = [
        ad.scale(ad.sum_all(ad.slice_rows(nll, int(seq_edges[k]), int(seq_edges[k + 1]))), -1.0 / seq_lengths[k])
        for k in range(len(prefixes))
    ]

    sums = [0.0] * 5
    total = None
    for i in range(n):
        terms = [weights.lambda_ce * ce[i], weights.lambda_ctc * l_ctc[i]]
        vals = [ce[i].item(), l_ctc[i].item(), 0.0, 0.0]
        if l_cla[i] is not None:
            terms.append(weights.lambda_c * l_cla[i])
            vals[2] = l_cla[i].item()
        if l_bctc[i] is not None:
            l_b = ce[n + i] + l_bctc[i]
            terms.append(weights.lambda_b * l_b)
            vals[3] = l_b.item()
        for t in terms:
            total = t if total is None else total + t
        for k, v in enumerate(vals):
            sums[k] += v
        sums[4] += combine(weights, *vals)
    total = ad.scale(total, 1.0 / n)
    if backward:
        tape.backward(total)
    return LossReport(*(x / n for x in sums), total_node=total, encoded=enc)
