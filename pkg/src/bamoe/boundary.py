"""Boundary-aware training branch.

Multi-head attention pooling maps the T frame vectors of the encoder
output to d_r segment vectors.  Those are scored by a small CTC head
over {blank, <CN>, <EN>, <Unk>} and by the shared decoder, whose target is
the run-length compressed language sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import counters
from .autodiff import ModelParams, Tape, Var
from .config import BoundaryConfig, DecoderConfig
from .ctc import ctc_loss
from .decoder import ce_loss, decoder_forward, teacher_forcing
from .errors import CapacityError, ContractError, DimensionError, FeasibilityError
from .nn import add_linear, bind, uniform_init
from .vocab import B_CN, B_EN, BOUNDARY_VOCAB_SIZE, CN, Vocab, check_lang


@dataclass(frozen=True)
class BoundaryTargets:
    tags: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tags)

    def ctc_ids(self) -> list[int]:
        return [B_CN if t == CN else B_EN for t in self.tags]

    def decoder_ids(self) -> list[int]:
        return [Vocab.tag_token(t) for t in self.tags]


@dataclass
class BoundaryLoss:
    total: Var
    l_ctc: Var
    l_ce: Var


def run_length(langs: Sequence[str]) -> tuple[str, ...]:
    out: list[str] = []
    for lang in langs:
        check_lang(lang)
        if not out or out[-1] != lang:
            out.append(lang)
    return tuple(out)


def boundary_targets(langs: Sequence[str], d_r: int | None = None) -> BoundaryTargets:
    if len(langs) == 0:
        raise ContractError("boundary_targets needs a non-empty tag sequence")
    tags = run_length(langs)
    if d_r is not None and len(tags) > d_r:
        raise CapacityError(f"{len(tags)} language segments exceed d_r={d_r}")
    return BoundaryTargets(tags)


def init_boundary(params: ModelParams, rng: np.random.Generator, cfg: BoundaryConfig, d: int) -> None:
    params.add("bat.w1", uniform_init(rng, d, (d, cfg.d_a)))
    params.add("bat.w2", uniform_init(rng, cfg.d_a, (cfg.d_a, cfg.d_r)))
    add_linear(params, rng, "bat.ctc_head", d, BOUNDARY_VOCAB_SIZE)


def attention_pool_weights(h_mix: Var, w1: Var, w2: Var) -> Var:
    """T x d_r weights; every head's column is a distribution over frames."""
    if h_mix.shape[1] != w1.shape[0] or w1.shape[1] != w2.shape[0]:
        raise DimensionError(f"attention pool: h_mix {h_mix.shape}, w1 {w1.shape}, w2 {w2.shape}")
    return ad.softmax_cols(ad.relu(h_mix @ w1) @ w2)


def segment_pool(a: Var, h_mix: Var) -> Var:
    if a.shape[0] != h_mix.shape[0]:
        raise DimensionError(f"segment_pool: weights {a.shape} vs frames {h_mix.shape}")
    return a.T @ h_mix


def boundary_loss(
    tape: Tape, h_b: Var, targets: BoundaryTargets, params: ModelParams, dec_cfg: DecoderConfig
) -> BoundaryLoss:
    l_ctc = boundary_ctc(tape, h_b, targets, params)
    prefix, target = teacher_forcing(targets.decoder_ids())
    l_ce = ce_loss(decoder_forward(tape, h_b, prefix, params, dec_cfg), target)
    return BoundaryLoss(total=l_ce + l_ctc, l_ctc=l_ctc, l_ce=l_ce)


def boundary_ctc(tape: Tape, h_b: Var, targets: BoundaryTargets, params: ModelParams) -> Var:
    counters.bump("boundary")
    p = bind(tape, params, "bat.ctc_head")
    log_probs = ad.log_softmax_rows(h_b @ p["w"] + p["b"])
    try:
        return ctc_loss(log_probs, targets.ctc_ids())
    except FeasibilityError as exc:
        raise FeasibilityError(f"boundary CTC: {exc}") from exc


def boundary_forward(tape: Tape, h_mix: Var, params: ModelParams) -> tuple[Var, Var]:
    """(A, H_B) for an encoder output."""
    a = attention_pool_weights(h_mix, tape.param(params["bat.w1"]), tape.param(params["bat.w2"]))
    return a, segment_pool(a, h_mix)
