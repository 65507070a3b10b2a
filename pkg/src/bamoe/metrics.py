"""Levenshtein scoring: CER (CN units), WER (EN units), MER (all units) and
BER over run-length language-tag sequences."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

from .vocab import CN, CN_TAG, EN, EN_TAG, Vocab


@dataclass(frozen=True)
class EditCounts:
    distance: int
    insertions: int
    substitutions: int
    deletions: int

    def __iter__(self):
        return iter((self.distance, self.insertions, self.substitutions, self.deletions))


def _table(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> list[list[int]]:
    n, m = len(ref), len(hyp)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = i
    for j in range(1, m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        r = ref[i - 1]
        row, prev = dp[i], dp[i - 1]
        for j in range(1, m + 1):
            row[j] = min(prev[j - 1] + (r != hyp[j - 1]), row[j - 1] + 1, prev[j] + 1)
    return dp


def align(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> list[tuple[str, int | None, int | None]]:
    """Minimal unit-cost alignment as (op, ref_index, hyp_index) triples with
    op in {"=", "S", "I", "D"}.  Ties prefer substitution (or match), then
    insertion, then deletion."""
    dp = _table(ref, hyp)
    ops = []
    i, j = len(ref), len(hyp)
    while i or j:
        if i and j and dp[i][j] == dp[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("=" if ref[i - 1] == hyp[j - 1] else "S", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j and dp[i][j] == dp[i][j - 1] + 1:
            ops.append(("I", None, j - 1))
            j -= 1
        else:
            ops.append(("D", i - 1, None))
            i -= 1
    ops.reverse()
    return ops


def edit_distance(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> EditCounts:
    ops = [op for op, _, _ in align(ref, hyp)]
    ins, sub, dele = ops.count("I"), ops.count("S"), ops.count("D")
    return EditCounts(ins + sub + dele, ins, sub, dele)


@dataclass
class RateCounts:
    insertions: int = 0
    substitutions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.insertions + self.substitutions + self.deletions

    @property
    def rate(self) -> float | None:
        """Error rate in percent; None when the reference stream is empty."""
        return None if self.ref_len == 0 else 100.0 * self.errors / self.ref_len

    def add(self, e: EditCounts, ref_len: int) -> None:
        self.insertions += e.insertions
        self.substitutions += e.substitutions
        self.deletions += e.deletions
        self.ref_len += ref_len

    def merged(self, other: "RateCounts") -> "RateCounts":
        return RateCounts(
            self.insertions + other.insertions,
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )


METRICS = ("cer", "wer", "mer", "ber")


@dataclass
class ScoreReport:
    counts: dict[str, RateCounts] = field(default_factory=lambda: {k: RateCounts() for k in METRICS})

    @property
    def cer(self) -> float | None:
        return self.counts["cer"].rate

    @property
    def wer(self) -> float | None:
        return self.counts["wer"].rate

    @property
    def mer(self) -> float | None:
        return self.counts["mer"].rate

    @property
    def ber(self) -> float | None:
        return self.counts["ber"].rate

    def merged(self, other: "ScoreReport") -> "ScoreReport":
        return ScoreReport({k: self.counts[k].merged(other.counts[k]) for k in METRICS})

    def to_dict(self) -> dict:
        return {
            k: {
                "rate": self.counts[k].rate,
                "insertions": self.counts[k].insertions,
                "substitutions": self.counts[k].substitutions,
                "deletions": self.counts[k].deletions,
                "ref_len": self.counts[k].ref_len,
            }
            for k in METRICS
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def run_length_tags(langs: Sequence[str]) -> list[str]:
    out: list[str] = []
    for lang in langs:
        if not out or out[-1] != lang:
            out.append(lang)
    return out


def score(
    ref_tokens: Sequence[int],
    ref_langs: Sequence[str],
    hyp_tokens: Sequence[int],
    hyp_langs: Sequence[str],
    hyp_boundary: Sequence[str] | None = None,
) -> ScoreReport:
    """Score one utterance; token streams must already be free of boundary tokens.

    BER compares run-length tags of ``ref_langs`` against run-length tags of
    ``hyp_langs``, or against ``hyp_boundary`` (e.g. decoder-emitted tags)
    when that is given.
    """
    rep = ScoreReport()
    for key, lang in (("cer", CN), ("wer", EN)):
        ref = [t for t, l in zip(ref_tokens, ref_langs) if l == lang]
        hyp = [t for t, l in zip(hyp_tokens, hyp_langs) if l == lang]
        rep.counts[key].add(edit_distance(ref, hyp), len(ref))
    rep.counts["mer"].add(edit_distance(list(ref_tokens), list(hyp_tokens)), len(ref_tokens))
    ref_b = run_length_tags(ref_langs)
    hyp_b = run_length_tags(hyp_langs) if hyp_boundary is None else list(hyp_boundary)
    rep.counts["ber"].add(edit_distance(ref_b, hyp_b), len(ref_b))
    return rep


def corpus_score(reports: Iterable[ScoreReport]) -> ScoreReport:
    total = ScoreReport()
    for r in reports:
        total = total.merged(r)
    return total


def split_hypothesis(decoded: Sequence[int], vocab: Vocab) -> tuple[list[int], list[str], list[str]]:
    """Lexical tokens, their vocabulary-partition languages, and the
    decoder-emitted boundary tags (the alternative BER unit)."""
    tokens, langs, tags = [], [], []
    for t in decoded:
        if t == CN_TAG:
            tags.append(CN)
        elif t == EN_TAG:
            tags.append(EN)
        elif vocab.is_lexical(t):
            tokens.append(int(t))
            langs.append(vocab.lang_of(t))
    return tokens, langs, tags


def relative_reduction(before: float, after: float) -> float:
    """Relative reduction in percent, e.g. 12.32 -> 10.28 gives 16.558..."""
    return 100.0 * (before - after) / before


def alignment_text(ref: Sequence[str], hyp: Sequence[str]) -> str:
    """Three-line aligned view (REF / HYP / op codes)."""
    cols = []
    for op, i, j in align(ref, hyp):
        r = ref[i] if i is not None else "*"
        h = hyp[j] if j is not None else "*"
        cols.append((r, h, " " if op == "=" else op))
    widths = [max(len(a), len(b), 1) for a, b, _ in cols]

    def line(k: int) -> str:
        return " ".join(c[k].ljust(w) for c, w in zip(cols, widths)).rstrip()

    return f"REF: {line(0)}\nHYP: {line(1)}\nOPS: {line(2)}"
