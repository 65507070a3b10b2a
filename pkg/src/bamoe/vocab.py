"""Token inventory for the two synthetic languages.

Reserved ids come first; the CN and EN vocabularies are disjoint
contiguous ranges after them, so a token's language is determined by its id.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import TagError

BLANK = 0
UNK = 1
SOS = 2
EOS = 3
CN_TAG = 4
EN_TAG = 5
NUM_RESERVED = 6

CN = "CN"
EN = "EN"
LANGS = (CN, EN)

# boundary-head vocabulary: blank, <CN>, <EN>, <Unk>
B_BLANK, B_CN, B_EN, B_UNK = 0, 1, 2, 3
BOUNDARY_VOCAB_SIZE = 4


def check_lang(tag: str) -> str:
    if tag not in LANGS:
        raise TagError(f"unknown language tag {tag!r} (expected CN or EN)")
    return tag


@dataclass(frozen=True)
class Vocab:
    n_cn: int
    n_en: int

    @property
    def size(self) -> int:
        return NUM_RESERVED + self.n_cn + self.n_en

    @property
    def cn_ids(self) -> range:
        return range(NUM_RESERVED, NUM_RESERVED + self.n_cn)

    @property
    def en_ids(self) -> range:
        return range(NUM_RESERVED + self.n_cn, self.size)

    def lang_of(self, token: int) -> str | None:
        """Language of a lexical token, None for reserved ids."""
        if token in self.cn_ids:
            return CN
        if token in self.en_ids:
            return EN
        return None

    def is_lexical(self, token: int) -> bool:
        return NUM_RESERVED <= token < self.size

    @staticmethod
    def tag_token(lang: str) -> int:
        return CN_TAG if check_lang(lang) == CN else EN_TAG

    def token_name(self, token: int) -> str:
        reserved = {BLANK: "<blank>", UNK: "<Unk>", SOS: "<sos>", EOS: "<eos>", CN_TAG: "<CN>", EN_TAG: "<EN>"}
        if token in reserved:
            return reserved[token]
        lang = self.lang_of(token)
        if lang == CN:
            return f"cn{token - NUM_RESERVED}"
        if lang == EN:
            return f"en{token - NUM_RESERVED - self.n_cn}"
        return f"<oov:{token}>"
