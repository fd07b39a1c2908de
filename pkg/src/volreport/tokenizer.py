"""Word-level vocabulary, text encoding/decoding, and special tokens.

Normalization is lowercasing plus punctuation splitting. ``detokenize``
re-attaches closing punctuation, so canonical text (lowercase, single
spaces, punctuation attached to the preceding word) round-trips exactly.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .errors import DataError, VocabError

BOS, EOS, PAD, IMG, UNK = "<bos>", "<eos>", "<pad>", "<img>", "<unk>"
SPECIALS = (BOS, EOS, PAD, IMG, UNK)
IMG_MARKER = "<IMG>"

_TOKEN_RE = re.compile(r"<img>|\w+|[^\w\s]")
_NO_SPACE_BEFORE = set(".,;:!?%)")
_NO_SPACE_AFTER = set("(")


def normalize_tokens(text: str) -> list[str]:
    """Lowercase and split into word/punctuation tokens; <IMG> survives whole."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    out: list[str] = []
    for tok in tokens:
        if out and (tok in _NO_SPACE_BEFORE or out[-1] in _NO_SPACE_AFTER):
            out[-1] += tok
        else:
            out.append(tok)
    return " ".join(out)


def canonical_text(text: str) -> str:
    """The fixed point of encode/decode normalization."""
    return detokenize(normalize_tokens(text))


@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int]

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def bos_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def pad_id(self) -> int:
        return 2

    @property
    def img_id(self) -> int:
        return 3

    @property
    def unk_id(self) -> int:
        return 4

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.tokens, indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = json.loads(Path(path).read_text(encoding="utf-8"))
        if tokens[: len(SPECIALS)] != list(SPECIALS):
            raise VocabError("vocabulary file does not start with the special tokens")
        return cls(tokens=tokens, index={t: i for i, t in enumerate(tokens)})


def build_vocab(corpus: Iterable[str]) -> Vocab:
    """Frequency-ordered word vocabulary (ties lexicographic), specials first.

    Deterministic for a given corpus; rebuilding yields an identical table.
    """
    counts: Counter[str] = Counter()
    seen_any = False
    for text in corpus:
        seen_any = True
        for tok in normalize_tokens(text):
            if tok != IMG_MARKER.lower():
                counts[tok] += 1
    if not seen_any or not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    tokens = list(SPECIALS) + [t for t, _ in ordered]
    return Vocab(tokens=tokens, index={t: i for i, t in enumerate(tokens)})


def encode(text: str, vocab: Vocab) -> list[int]:
    """Token ids for text; unknown words map to UNK. Adds no specials."""
    img = IMG_MARKER.lower()
    ids = []
    for tok in normalize_tokens(text):
        if tok == img:
            ids.append(vocab.img_id)
        else:
            ids.append(vocab.index.get(tok, vocab.unk_id))
    return ids


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    toks = []
    for i in ids:
        if not 0 <= i < vocab.size:
            raise VocabError(f"token id {i} out of range for vocabulary of size {vocab.size}")
        toks.append(vocab.tokens[i])
    return detokenize(toks)
