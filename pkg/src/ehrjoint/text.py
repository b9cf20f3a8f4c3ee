"""Subword vocabulary, greedy longest-match tokenization and sectioned encoding."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

TEXT_RESERVED = ("[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")
CONTINUATION = "##"
MAX_TEXT_LEN = 512
SECTION_DX, SECTION_PX, SECTION_RX = 0, 1, 2
SECTION_HEADERS = {
    SECTION_DX: "discharge diagnosis",
    SECTION_PX: "major surgical or invasive procedure",
    SECTION_RX: "discharge medication",
}


class SubwordVocabulary:
    """Piece -> id; continuation pieces carry a ``##`` prefix."""

    def __init__(self, pieces: Iterable[str] = ()):
        extra = [p for p in dict.fromkeys(pieces) if p not in TEXT_RESERVED]
        self.pieces = list(TEXT_RESERVED) + extra
        self.index = {p: i for i, p in enumerate(self.pieces)}

    def __len__(self):
        return len(self.pieces)

    def __contains__(self, piece: str) -> bool:
        return piece in self.index

    cls_id = property(lambda self: self.index["[CLS]"])
    sep_id = property(lambda self: self.index["[SEP]"])
    mask_id = property(lambda self: self.index["[MASK]"])
    pad_id = property(lambda self: self.index["[PAD]"])
    unk_id = property(lambda self: self.index["[UNK]"])

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(range(len(TEXT_RESERVED)))

    def save(self, path):
        Path(path).write_text("\n".join(self.pieces) + "\n")

    @classmethod
    def load(cls, path) -> "SubwordVocabulary":
        pieces = Path(path).read_text().splitlines()
        if tuple(pieces[:len(TEXT_RESERVED)]) != TEXT_RESERVED:
            raise ValueError(f"{path}: reserved text tokens missing or out of order")
        return cls(pieces[len(TEXT_RESERVED):])

    def convert_ids(self, ids: Sequence[int]) -> list[str]:
        return [self.pieces[i] for i in ids]


def _normalize(text: str) -> list[str]:
    return text.lower().split()


def tokenize_word(word: str, vocab: SubwordVocabulary) -> list[str]:
    pieces, start = [], 0
    while start < len(word):
        end = len(word)
        match = None
        while end > start:
            cand = word[start:end] if start == 0 else CONTINUATION + word[start:end]
            if cand in vocab:
                match = cand
                break
            end -= 1
        if match is None:
            return ["[UNK]"]
        pieces.append(match)
        start = end
    return pieces


def tokenize(text: str, vocab: SubwordVocabulary) -> list[int]:
    """Lowercase, split on whitespace, greedy longest-match per word."""
    if len(vocab) == 0:
        raise ValueError("empty vocabulary")
    return [vocab.index[p] for w in _normalize(text) for p in tokenize_word(w, vocab)]


def detokenize(ids: Sequence[int], vocab: SubwordVocabulary, skip_special: bool = True) -> str:
    words: list[str] = []
    for i in ids:
        piece = vocab.pieces[i]
        if skip_special and piece in TEXT_RESERVED and piece != "[UNK]":
            continue
        if piece.startswith(CONTINUATION) and words:
            words[-1] += piece[len(CONTINUATION):]
        else:
            words.append(piece)
    return " ".join(words)


def build_text_vocab(corpus: Iterable[str], target_size: int) -> SubwordVocabulary:
    """Characters first (word-initial, then continuation), then frequent whole words."""
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(_normalize(text))
    alphabet = sorted({c for w in counts for c in w})
    if target_size < len(TEXT_RESERVED) + len(alphabet):
        raise ValueError(f"target_size {target_size} below reserved + alphabet "
                         f"({len(TEXT_RESERVED)} + {len(alphabet)})")
    budget = target_size - len(TEXT_RESERVED)
    pieces = list(alphabet)
    pieces += [CONTINUATION + c for c in alphabet][: budget - len(pieces)]
    chosen = set(pieces)
    # Counter preserves first-seen order, so equal counts keep corpus order
    for word, _ in sorted(counts.items(), key=lambda kv: -kv[1]):
        if len(pieces) >= budget:
            break
        if word not in chosen:
            pieces.append(word)
            chosen.add(word)
    return SubwordVocabulary(pieces)


@dataclass
class TextSequence:
    input_ids: list[int]
    section_ids: list[int]

    def __post_init__(self):
        if len(self.input_ids) != len(self.section_ids):
            raise ValueError("input_ids and section_ids differ in length")

    def __len__(self):
        return len(self.input_ids)

    @property
    def positions(self) -> list[int]:
        return list(range(len(self.input_ids)))


def encode_text(sections: Sequence[tuple[int, str]], vocab: SubwordVocabulary,
                max_len: int = MAX_TEXT_LEN) -> TextSequence:
    """[CLS] section_1 [SEP] section_2 [SEP] ...; truncation keeps the prefix."""
    if not sections:
        raise ValueError("no sections to encode")
    ids = [vocab.cls_id]
    secs = [sections[0][0]]
    n_body = 0
    for header, text in sections:
        if header not in SECTION_HEADERS:
            raise ValueError(f"unknown section header id {header}")
        toks = tokenize(text, vocab)
        n_body += len(toks)
        ids += toks + [vocab.sep_id]
        secs += [header] * (len(toks) + 1)
    if n_body == 0:
        raise ValueError("text is empty")
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [vocab.sep_id]
        secs = secs[:max_len]
    return TextSequence(ids, secs)


def word_count(sections: Sequence[tuple[int, str]]) -> int:
    return sum(len(_normalize(t)) for _, t in sections)
