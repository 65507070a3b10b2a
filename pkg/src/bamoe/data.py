"""Synthetic code-switching corpus.

Two artificial languages with disjoint token ranges.  Every token owns a
prototype feature vector; each frame of a token is

    prototype + language offset + N(0, noise_std^2)

The language offset lives on feature axis 0, which prototypes leave at
zero, so the language of a frame is decodable from that axis alone.  EN
prototypes are correlated with their CN counterparts (``cross_similarity``)
to make the two languages acoustically confusable.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .vocab import CN, EN, Vocab, check_lang

PROTOTYPE_STREAM = 0x5EED


@dataclass(frozen=True)
class SynthConfig:
    n_cn: int = 20
    n_en: int = 20
    frames_per_token: tuple[int, int] = (3, 8)
    max_switches: int = 3
    tokens_per_utt: tuple[int, int] = (4, 12)
    feature_dim: int = 16
    noise_std: float = 0.3
    lang_offset: float = 0.6
    cross_similarity: float = 0.7
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames_per_token", tuple(self.frames_per_token))
        object.__setattr__(self, "tokens_per_utt", tuple(self.tokens_per_utt))
        lo, hi = self.frames_per_token
        if lo < 2 or hi < lo:
            raise ConfigError("frames_per_token must satisfy 2 <= lo <= hi")
        tlo, thi = self.tokens_per_utt
        if tlo < 1 or thi < tlo:
            raise ConfigError("tokens_per_utt must satisfy 1 <= lo <= hi")
        if not 0 <= self.max_switches <= 6:
            raise ConfigError("max_switches must lie in [0, 6]")
        if self.n_cn < 1 or self.n_en < 1:
            raise ConfigError("each language needs at least one token")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must be >= 2 (axis 0 carries the language offset)")
        if self.noise_std < 0 or not 0 <= self.cross_similarity <= 1:
            raise ConfigError("noise_std >= 0 and cross_similarity in [0, 1] required")

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_cn, self.n_en)

    def check_model_capacity(self, d_r: int) -> None:
        if self.max_switches + 1 > d_r:
            raise ConfigError(f"max_switches+1={self.max_switches + 1} exceeds d_r={d_r}")


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    tokens: list[int]
    langs: list[str]
    durations: list[int] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def boundary_tags(self):
        from .boundary import boundary_targets

        return boundary_targets(self.langs)

    def frame_langs(self) -> list[str]:
        out: list[str] = []
        for lang, n in zip(self.langs, self.durations):
            out.extend([lang] * n)
        return out

    def boundary_frames(self) -> list[int]:
        """First frame of every segment after the first."""
        frames, t = [], 0
        for i, n in enumerate(self.durations):
            if i and self.langs[i] != self.langs[i - 1]:
                frames.append(t)
            t += n
        return frames

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (
            self.id == other.id
            and self.tokens == other.tokens
            and self.langs == other.langs
            and self.durations == other.durations
            and self.features.shape == other.features.shape
            and bool(np.array_equal(self.features, other.features))
        )


def prototypes(cfg: SynthConfig) -> np.ndarray:
    """(n_cn + n_en) x d prototype table in vocabulary order, axis 0 zeroed."""
    rng = np.random.default_rng([cfg.seed, PROTOTYPE_STREAM])
    d = cfg.feature_dim
    cn = rng.normal(size=(cfg.n_cn, d))
    fresh = rng.normal(size=(cfg.n_en, d))
    paired = cn[np.arange(cfg.n_en) % cfg.n_cn]
    rho = cfg.cross_similarity
    en = rho * paired + math.sqrt(1.0 - rho * rho) * fresh
    table = np.vstack([cn, en])
    table[:, 0] = 0.0
    return table


def language_offset(cfg: SynthConfig, lang: str) -> np.ndarray:
    off = np.zeros(cfg.feature_dim)
    off[0] = cfg.lang_offset if check_lang(lang) == CN else -cfg.lang_offset
    return off


def _split(rng: np.random.Generator, total: int, parts: int) -> list[int]:
    """Random composition of ``total`` into ``parts`` positive integers."""
    cuts = np.sort(rng.choice(np.arange(1, total), size=parts - 1, replace=False)) if parts > 1 else []
    edges = [0, *cuts, total]
    return [int(b - a) for a, b in zip(edges, edges[1:])]


def generate_utterance(cfg: SynthConfig, index: int, protos: np.ndarray | None = None) -> Utterance:
    if protos is None:
        protos = prototypes(cfg)
    vocab = cfg.vocab
    rng = np.random.default_rng([cfg.seed, index])
    n_tokens = int(rng.integers(cfg.tokens_per_utt[0], cfg.tokens_per_utt[1] + 1))
    n_segments = min(int(rng.integers(1, cfg.max_switches + 2)), n_tokens)
    lang = CN if rng.random() < 0.5 else EN
    tokens: list[int] = []
    langs: list[str] = []
    for seg_len in _split(rng, n_tokens, n_segments):
        ids = vocab.cn_ids if lang == CN else vocab.en_ids
        tokens.extend(int(ids[0] + k) for k in rng.integers(0, len(ids), size=seg_len))
        langs.extend([lang] * seg_len)
        lang = EN if lang == CN else CN
    durations = [int(n) for n in rng.integers(cfg.frames_per_token[0], cfg.frames_per_token[1] + 1, size=n_tokens)]
    rows = []
    for tok, lg, n in zip(tokens, langs, durations):
        base = protos[tok - vocab.cn_ids[0]] + language_offset(cfg, lg)
        rows.append(base + cfg.noise_std * rng.normal(size=(n, cfg.feature_dim)))
    return Utterance(f"utt{index:06d}", np.vstack(rows), tokens, langs, durations)


def generate_dataset(cfg: SynthConfig, n: int, start: int = 0) -> list[Utterance]:
    """Utterances ``start .. start+n-1``; each is a pure function of (seed, index)."""
    if n < 1:
        raise ConfigError("dataset size must be >= 1")
    protos = prototypes(cfg)
    return [generate_utterance(cfg, i, protos) for i in range(start, start + n)]


def utterance_to_dict(u: Utterance) -> dict:
    return {
        "id": u.id,
        "features": u.features.tolist(),
        "tokens": list(u.tokens),
        "langs": list(u.langs),
        "durations": list(u.durations),
    }


def utterance_from_dict(raw: dict) -> Utterance:
    features = np.asarray(raw["features"], dtype=np.float64)
    if features.ndim != 2:
        raise ValueError("features must be a T x d nested array")
    tokens = [int(t) for t in raw["tokens"]]
    langs = [check_lang(l) for l in raw["langs"]]
    if len(tokens) != len(langs):
        raise ValueError("tokens and langs differ in length")
    durations = [int(n) for n in raw.get("durations", [])]
    if durations and sum(durations) != features.shape[0]:
        raise ValueError("durations do not sum to the frame count")
    return Utterance(str(raw["id"]), features, tokens, langs, durations)


def write_jsonl(dataset: Iterable[Utterance], path: str | Path) -> None:
    with open(path, "w") as fh:
        for u in dataset:
            fh.write(json.dumps(utterance_to_dict(u)))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[Utterance]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(utterance_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed utterance record ({exc})") from exc
    return out


def synth_config_to_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)


def synth_config_from_dict(raw: dict) -> SynthConfig:
    try:
        return SynthConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad data config field: {exc}") from exc


def frame_language_means(dataset: Sequence[Utterance], axis: int = 0) -> dict[str, float]:
    sums = {CN: 0.0, EN: 0.0}
    counts = {CN: 0, EN: 0}
    for u in dataset:
        col = u.features[:, axis]
        for lang, v in zip(u.frame_langs(), col):
            sums[lang] += v
            counts[lang] += 1
    return {k: sums[k] / counts[k] for k in sums if counts[k]}
