"""Training, evaluation, exports, ablation and gradient-check orchestration."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import ModelParams, Tape, finite_diff_check
from .boundary import boundary_forward
from .checkpoint import Checkpoint
from .config import EncoderConfig, DecoderConfig, BoundaryConfig, ModelConfig, TrainConfig
from .data import SynthConfig, Utterance, generate_dataset
from .decoder import greedy_decode
from .encoder import encode
from .errors import CompatibilityError, ConfigError, ContractError, DivergenceError, NumericalError
from .metrics import METRICS, ScoreReport, alignment_text, corpus_score, score, split_hypothesis
from .model import init_params, param_group
from .objective import LossReport, batch_loss, total_loss
from .vocab import CN, Vocab

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "l_ce", "l_ctc", "l_cla", "l_b", "total")
GRADCHECK_MAX_PARAMS = 20_000
GRADCHECK_TOL = 1e-4
# Entries with gradients near 1e-7 hit float64 roundoff at h=1e-5; 1e-4 keeps
# truncation error well below the tolerance on the toy model.
GRADCHECK_STEP = 1e-4


# --- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    final_params: ModelParams
    log_rows: list[dict] = field(default_factory=list)
    best_dev_loss: float | None = None

    def log_csv(self) -> str:
        return format_log(self.log_rows)


def format_log(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOG_FIELDS)
    for row in rows:
        writer.writerow([row["step"], *(repr(float(row[k])) for k in LOG_FIELDS[1:])])
    return buf.getvalue()


def _check_dataset(dataset: Sequence[Utterance], cfg: ModelConfig, what: str) -> None:
    if not dataset:
        raise ContractError(f"{what} set is empty")
    vocab = cfg.vocab
    for u in dataset:
        if u.features.shape[1] != cfg.encoder.d_model:
            raise CompatibilityError(
                f"{u.id}: feature dim {u.features.shape[1]} != model d_model {cfg.encoder.d_model}"
            )
        if any(not vocab.is_lexical(t) for t in u.tokens):
            raise CompatibilityError(f"{u.id}: token ids outside the model vocabulary")


def _clip(params: ModelParams, max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if not math.isfinite(norm):
        raise NumericalError("non-finite gradient norm")
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad *= factor
    return norm


def _sgd(params: ModelParams, opt) -> Callable[[int], None]:
    velocity = {p.name: np.zeros_like(p.value) for p in params}

    def step(k: int) -> None:
        lr = opt.lr_at(k)
        for p in params:
            v = velocity[p.name]
            v *= opt.momentum
            v += p.grad
            p.value -= lr * v

    return step


def _adam(params: ModelParams, opt, eps: float = 1e-8) -> Callable[[int], None]:
    """Adam with ``momentum`` as beta1."""
    m = {p.name: np.zeros_like(p.value) for p in params}
    v = {p.name: np.zeros_like(p.value) for p in params}
    b1, b2 = opt.momentum, opt.beta2

    def step(k: int) -> None:
        c1, c2 = 1.0 - b1**k, 1.0 - b2**k
        lr = opt.lr_at(k)
        for p in params:
            mp, vp = m[p.name], v[p.name]
            mp *= b1
            mp += (1.0 - b1) * p.grad
            vp *= b2
            vp += (1.0 - b2) * p.grad * p.grad
            p.value -= lr * (mp / c1) / (np.sqrt(vp / c2) + eps)

    return step


def train(
    config: TrainConfig,
    train_set: Sequence[Utterance],
    dev_set: Sequence[Utterance] | None = None,
    init: ModelParams | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """SGD with momentum and global-norm clipping over the weighted total loss.

    Batches are drawn from a seeded per-epoch permutation.  When ``dev_set`` is
    given and ``optim.eval_every`` > 0 the returned checkpoint holds the
    parameters with the lowest mean dev loss; otherwise the final ones.
    """
    mcfg, opt = config.model, config.optim
    _check_dataset(train_set, mcfg, "training")
    params = init if init is not None else init_params(mcfg, opt.seed)
    step_fn = _adam(params, opt) if opt.optimizer == "adam" else _sgd(params, opt)
    rng = np.random.default_rng([opt.seed, 1])
    order: list[int] = []
    rows: list[dict] = []
    best_loss, best_params, best_step = None, None, 0

    for step in range(1, opt.steps + 1):
        batch = []
        while len(batch) < opt.batch_size:
            if not order:
                order = rng.permutation(len(train_set)).tolist()
            batch.append(train_set[order.pop()])
        params.zero_grad()
        try:
            rep = batch_loss(batch, params, mcfg, config.weights)
            if not math.isfinite(rep.total):
                raise NumericalError("non-finite total loss")
            _clip(params, opt.clip_norm)
        except NumericalError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}") from exc
        step_fn(step)
        rows.append({"step": step, **rep.as_row()})
        if on_step is not None:
            on_step(step, rep)
        if dev_set and opt.eval_every and (step % opt.eval_every == 0 or step == opt.steps):
            dev = batch_loss(dev_set, params, mcfg, config.weights, backward=False).total
            log.info("step %d dev total %.4f", step, dev)
            if best_loss is None or dev < best_loss:
                best_loss, best_params, best_step = dev, params.copy(), step

    if best_params is None:
        best_params, best_step = params.copy(), opt.steps
    return TrainResult(Checkpoint(best_params, config, best_step), params, rows, best_loss)


# --- evaluation -----------------------------------------------------------------


@dataclass
class UtteranceResult:
    id: str
    ref_tokens: list[int]
    hyp_tokens: list[int]
    hyp_langs: list[str]
    decoder_tags: list[str]
    report: ScoreReport


@dataclass
class EvalResult:
    report: ScoreReport
    utterances: list[UtteranceResult]

    def text_report(self, vocab: Vocab) -> str:
        """Per-utterance aligned REF/HYP view followed by its rates."""
        blocks = []
        for u in self.utterances:
            ref = [vocab.token_name(t) for t in u.ref_tokens]
            hyp = [vocab.token_name(t) for t in u.hyp_tokens]
            rates = "  ".join(f"{k.upper()}={_fmt(getattr(u.report, k))}" for k in METRICS)
            blocks.append(f"{u.id}  {rates}\n{alignment_text(ref, hyp)}")
        return "\n\n".join(blocks)


BOUNDARY_SOURCES = ("langs", "decoder")


def decode_utterance(params: ModelParams, cfg: ModelConfig, utt: Utterance) -> list[int]:
    tape = Tape()
    enc = encode(tape, utt.features, params, cfg.encoder, cfg.use_moe_adapter)
    return greedy_decode(enc.h_mix, params, cfg.decoder, max_len=utt.num_frames + 1)


def evaluate_params(
    params: ModelParams, cfg: ModelConfig, test_set: Sequence[Utterance], boundary_source: str = "langs"
) -> EvalResult:
    """Greedy-decode and score every utterance.

    ``boundary_source`` picks the hypothesis unit for BER: run-length tags
    inferred from decoded token languages, or the <CN>/<EN> tokens the
    decoder emitted.
    """
    if boundary_source not in BOUNDARY_SOURCES:
        raise ConfigError(f"boundary_source must be one of {BOUNDARY_SOURCES}")
    _check_dataset(test_set, cfg, "test")
    vocab = cfg.vocab
    results = []
    for utt in test_set:
        tokens, langs, tags = split_hypothesis(decode_utterance(params, cfg, utt), vocab)
        rep = score(utt.tokens, utt.langs, tokens, langs, tags if boundary_source == "decoder" else None)
        results.append(UtteranceResult(utt.id, list(utt.tokens), tokens, langs, tags, rep))
    return EvalResult(corpus_score(r.report for r in results), results)


def evaluate(checkpoint: Checkpoint, test_set: Sequence[Utterance]) -> EvalResult:
    _check_checkpoint(checkpoint)
    return evaluate_params(checkpoint.params, checkpoint.config.model, test_set)


def _check_checkpoint(checkpoint: Checkpoint) -> None:
    expected = init_params(checkpoint.config.model, 0)
    if expected.names() != checkpoint.params.names():
        raise CompatibilityError("checkpoint parameters do not match its configuration")
    for p in expected:
        if checkpoint.params[p.name].shape != p.shape:
            raise CompatibilityError(f"{p.name}: shape {checkpoint.params[p.name].shape} != {p.shape}")


# --- analysis / exports -----------------------------------------------------


def gate_rows(params: ModelParams, cfg: ModelConfig, utt: Utterance) -> list[dict]:
    if not cfg.use_moe_adapter:
        raise ConfigError("gate export needs a MoE-Adapter model")
    enc = encode(Tape(), utt.features, params, cfg.encoder, True)
    frame_langs = utt.frame_langs() or [""] * utt.num_frames
    rows = []
    for l, cache in enumerate(enc.caches, start=1):
        g = cache.gate.value
        for t in range(g.shape[0]):
            rows.append({"layer": l, "frame": t, "gate_cn": g[t, 0], "gate_en": g[t, 1], "true_lang": frame_langs[t]})
    return rows


def export_gates(checkpoint: Checkpoint, utt: Utterance, out_csv: str | Path) -> list[dict]:
    rows = gate_rows(checkpoint.params, checkpoint.config.model, utt)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["layer", "frame", "gate_cn", "gate_en", "true_lang"])
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "gate_cn": repr(float(r["gate_cn"])), "gate_en": repr(float(r["gate_en"]))})
    return rows


def attention_matrix(params: ModelParams, cfg: ModelConfig, utt: Utterance) -> np.ndarray:
    if not cfg.use_bat:
        raise ConfigError("attention export needs a model with the boundary branch")
    tape = Tape()
    enc = encode(tape, utt.features, params, cfg.encoder, cfg.use_moe_adapter)
    a, _ = boundary_forward(tape, enc.h_mix, params)
    return a.value


def export_attention(checkpoint: Checkpoint, utt: Utterance, out_csv: str | Path) -> np.ndarray:
    a = attention_matrix(checkpoint.params, checkpoint.config.model, utt)
    boundary = set(utt.boundary_frames())
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", *(f"head_{r + 1}" for r in range(a.shape[1])), "is_boundary_frame"])
        for t in range(a.shape[0]):
            writer.writerow([t, *(repr(float(x)) for x in a[t]), int(t in boundary)])
    return a


def gate_separation(params: ModelParams, cfg: ModelConfig, dataset: Sequence[Utterance], layer: int = -1) -> float:
    """Mean CN-gate coefficient on CN frames minus that on EN frames."""
    sums = {True: 0.0, False: 0.0}
    counts = {True: 0, False: 0}
    n_layers = cfg.encoder.num_layers
    target = (layer % n_layers) + 1
    for utt in dataset:
        for row in gate_rows(params, cfg, utt):
            if row["layer"] != target:
                continue
            is_cn = row["true_lang"] == CN
            sums[is_cn] += row["gate_cn"]
            counts[is_cn] += 1
    if not counts[True] or not counts[False]:
        raise ContractError("gate separation needs frames from both languages")
    return sums[True] / counts[True] - sums[False] / counts[False]


def boundary_window(utt: Utterance, radius: int = 2) -> np.ndarray:
    mask = np.zeros(utt.num_frames, dtype=bool)
    for b in utt.boundary_frames():
        mask[max(0, b - radius) : b + radius + 1] = True
    return mask


def boundary_concentration(
    params: ModelParams, cfg: ModelConfig, dataset: Sequence[Utterance], radius: int = 2
) -> float:
    """Mean over code-switched utterances of (attention mass near a boundary)
    / (share of frames near a boundary).  1.0 means no concentration."""
    ratios = []
    for utt in dataset:
        if not utt.boundary_frames():
            continue
        a = attention_matrix(params, cfg, utt)
        mask = boundary_window(utt, radius)
        near = a[mask].sum() / a.sum()
        ratios.append(near / mask.mean())
    if not ratios:
        raise ContractError("no utterance with a language switch")
    return float(np.mean(ratios))


# --- ablation -----------------------------------------------------------------

ABLATION_ROWS = (
    ("Baseline", False, False, False),
    ("+ MoE-Adapter", True, False, False),
    ("+ CLA loss", True, True, False),
    ("+ BAT", True, True, True),
)


@dataclass
class AblationRow:
    name: str
    report: ScoreReport
    result: TrainResult
    adapter_params: int


def run_ablation(
    base: TrainConfig, train_set: Sequence[Utterance], test_set: Sequence[Utterance], dev_set=None
) -> list[AblationRow]:
    from .model import adapter_param_count

    rows = []
    for name, moe, cla, bat in ABLATION_ROWS:
        cfg = base.with_flags(moe, cla, bat)
        log.info("ablation row %s", name)
        try:
            result = train(cfg, train_set, dev_set)
            ev = evaluate(result.checkpoint, test_set)
        except Exception as exc:
            raise type(exc)(f"ablation row {name!r}: {exc}") from exc
        rows.append(AblationRow(name, ev.report, result, adapter_param_count(result.checkpoint.params)))
    return rows


def _fmt(x: float | None) -> str:
    return "n/a" if x is None else f"{x:.2f}"


def ablation_markdown(rows: Sequence[AblationRow]) -> str:
    lines = ["| Model | MER(%) | CER(%) | WER(%) | BER(%) |", "|---|---|---|---|---|"]
    for r in rows:
        rep = r.report
        lines.append(f"| {r.name} | {_fmt(rep.mer)} | {_fmt(rep.cer)} | {_fmt(rep.wer)} | {_fmt(rep.ber)} |")
    return "\n".join(lines) + "\n"


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["model", "mer", "cer", "wer", "ber", "adapter_params"])
    for r in rows:
        rep = r.report
        writer.writerow([r.name, rep.mer, rep.cer, rep.wer, rep.ber, r.adapter_params])
    return buf.getvalue()


# --- gradient check -------------------------------------------------------------


def gradcheck_config() -> ModelConfig:
    """Toy model used by the end-to-end gradient check."""
    return ModelConfig(
        encoder=EncoderConfig(num_layers=2, d_model=16, d_ff=16, num_heads=2, d_adapter=4),
        decoder=DecoderConfig(num_layers=1, d_model=16, d_ff=16, num_heads=2),
        boundary=BoundaryConfig(d_a=8, d_r=4),
        n_cn=4,
        n_en=4,
    )


def gradcheck_utterance(cfg: ModelConfig, seed: int = 0, frames: int = 12) -> Utterance:
    """Deterministic T-frame utterance with two language switches."""
    data = SynthConfig(
        n_cn=cfg.n_cn,
        n_en=cfg.n_en,
        frames_per_token=(3, 3),
        tokens_per_utt=(frames // 3, frames // 3),
        max_switches=2,
        feature_dim=cfg.encoder.d_model,
        seed=seed,
    )
    for i in range(1000):
        utt = generate_dataset(data, 1, start=i)[0]
        if len(utt.boundary_frames()) == 2:
            return utt
    raise ContractError("could not draw a two-switch gradcheck utterance")


@dataclass
class GradcheckGroup:
    group: str
    max_rel_error: float
    worst_param: str


def gradcheck(
    train_cfg: TrainConfig,
    utt: Utterance | None = None,
    h: float = GRADCHECK_STEP,
    seed: int = 0,
    groups: Sequence[str] | None = None,
) -> list[GradcheckGroup]:
    """Central-difference check of the total loss, worst entry per parameter
    group.  ``groups`` restricts the check to the named groups."""
    cfg = train_cfg.model
    params = init_params(cfg, seed)
    if params.num_entries() > GRADCHECK_MAX_PARAMS:
        raise ConfigError(f"gradcheck refuses {params.num_entries()} parameters (limit {GRADCHECK_MAX_PARAMS})")
    if utt is None:
        utt = gradcheck_utterance(cfg, seed)
    _check_dataset([utt], cfg, "gradcheck")

    def loss_fn(ps: ModelParams):
        tape = Tape()
        return total_loss(tape, utt, ps, cfg, train_cfg.weights).total_node

    names = None
    if groups is not None:
        names = [p.name for p in params if param_group(p.name) in set(groups)]
        if not names:
            raise ConfigError(f"no parameters in groups {list(groups)}")
    report = finite_diff_check(loss_fn, params, h, names)
    worst: dict[str, GradcheckGroup] = {}
    for e in report.entries:
        g = param_group(e.name)
        cur = worst.get(g)
        if cur is None or e.max_rel_error > cur.max_rel_error:
            worst[g] = GradcheckGroup(g, e.max_rel_error, e.name)
    return list(worst.values())
