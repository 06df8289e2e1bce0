"""Word-level tokenizer with reserved special ids and pair encoding.

Tokenization is lowercase `\\w+` word splitting; the vocabulary is built
from a corpus by frequency (ties alphabetical) under a size cap.  Pair
encoding produces `[CLS] q [SEP] d [SEP]` with segment 1 starting strictly
after the first [SEP]; when the budget is exceeded, document tokens are
truncated before query tokens, and truncation is always logged.
"""

import logging
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
N_SPECIALS = len(SPECIAL_TOKENS)

_WORD = re.compile(r"\w+")


def tokenize_words(text: str) -> list:
    """Lowercase word-level split shared by the tokenizer and the index."""
    return _WORD.findall(text.lower())


@dataclass
class TokenSequence:
    """Encoded sequence: ids, per-token segment flags, validity mask."""

    ids: np.ndarray        # int64 [T]
    segments: np.ndarray   # int64 [T], query side 0 / document side 1
    mask: np.ndarray       # float64 [T], 1.0 valid

    def __len__(self):
        return len(self.ids)


class Tokenizer:
    """Frequency-built word vocabulary with fixed special ids."""

    def __init__(self, id_to_token):
        if list(id_to_token[:N_SPECIALS]) != SPECIAL_TOKENS:
            raise ContractError("vocabulary must start with the special tokens")
        self.id_to_token = list(id_to_token)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, texts, cap: int = 8192) -> "Tokenizer":
        """Build from an iterable of texts: frequency desc, ties alphabetical,
        total size (specials included) capped at ``cap``."""
        if cap <= N_SPECIALS:
            raise ContractError(f"vocabulary cap {cap} leaves no room for words")
        counts = Counter()
        for text in texts:
            counts.update(tokenize_words(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [w for w, _ in ranked[: cap - N_SPECIALS]]
        return cls(SPECIAL_TOKENS + words)

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def tokenize(self, text: str) -> list:
        """Text -> token ids; out-of-vocabulary words map to [UNK]."""
        get = self.token_to_id.get
        return [get(w, UNK) for w in tokenize_words(text)]

    def encode_single(self, text: str, max_len: int) -> TokenSequence:
        """[CLS] t [SEP], all segment 0; overflow truncates the text."""
        toks = self.tokenize(text)
        budget = max_len - 2
        if len(toks) > budget:
            logger.debug("truncating text %d -> %d tokens", len(toks), budget)
            toks = toks[:budget]
        ids = np.array([CLS] + toks + [SEP], dtype=np.int64)
        return TokenSequence(
            ids=ids,
            segments=np.zeros(len(ids), dtype=np.int64),
            mask=np.ones(len(ids), dtype=np.float64),
        )

    def encode_pair(self, query: str, document: str, max_len: int) -> TokenSequence:
        """[CLS] q [SEP] d [SEP]; document truncated first, query preserved."""
        q = self.tokenize(query)
        d = self.tokenize(document)
        budget = max_len - 3  # [CLS] + two [SEP]
        if len(q) > budget:
            logger.debug("truncating query %d -> %d tokens", len(q), budget)
            q = q[:budget]
        d_budget = budget - len(q)
        if len(d) > d_budget:
            logger.debug("truncating document %d -> %d tokens", len(d), d_budget)
            d = d[:d_budget]
        ids = np.array([CLS] + q + [SEP] + d + [SEP], dtype=np.int64)
        seg = np.zeros(len(ids), dtype=np.int64)
        seg[len(q) + 2:] = 1  # strictly after the first [SEP]
        return TokenSequence(
            ids=ids, segments=seg, mask=np.ones(len(ids), dtype=np.float64)
        )


def pad_batch(seqs):
    """Right-pad sequences to a rectangle; returns (ids, segments, mask)."""
    if not seqs:
        raise ContractError("cannot pad an empty batch")
    t_max = max(len(s) for s in seqs)
    b = len(seqs)
    ids = np.full((b, t_max), PAD, dtype=np.int64)
    seg = np.zeros((b, t_max), dtype=np.int64)
    mask = np.zeros((b, t_max), dtype=np.float64)
    for i, s in enumerate(seqs):
        t = len(s)
        ids[i, :t] = s.ids
        seg[i, :t] = s.segments
        mask[i, :t] = s.mask
    return ids, seg, mask
