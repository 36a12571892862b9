"""Tokenizers: byte-level BPE (GPT-2 vocab/merges files) and a word-level toy tokenizer.

Both are immutable after construction and expose the same small surface:
``encode``, ``decode``, ``vocab_size`` and ``kind``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import regex

from .errors import (
    FileMissing,
    MalformedMerges,
    MalformedVocab,
    NoSingleTokenForm,
    OutOfVocabulary,
    RolePatchError,
)

# GPT-2 pre-tokenization pattern
GPT2_PATTERN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)
WORD_PATTERN = regex.compile(r"\w+|[^\w\s]+")


@lru_cache(maxsize=None)
def bytes_to_unicode() -> dict[int, str]:
    """Map every byte to a printable unicode character (GPT-2's reversible byte proxy)."""
    printable = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    codes = printable[:]
    n = 0
    for b in range(256):
        if b not in printable:
            printable.append(b)
            codes.append(256 + n)
            n += 1
    return dict(zip(printable, (chr(c) for c in codes)))


class BPETokenizer:
    kind = "bpe"

    def __init__(self, vocab: dict[str, int], merges: Sequence[tuple[str, str]], bos_id: int | None = None):
        self.vocab = dict(vocab)
        self.merges = list(merges)
        self.bos_id = bos_id
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {v: k for k, v in self.byte_encoder.items()}
        self.id_to_token = {i: t for t, i in self.vocab.items()}
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return max(self.vocab.values()) + 1

    def _bpe(self, word: str) -> list[str]:
        parts = list(word)
        while len(parts) > 1:
            best = None
            best_rank = None
            for i in range(len(parts) - 1):
                r = self._ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            first, second = parts[best], parts[best + 1]
            merged = []
            i = 0
            while i < len(parts):
                if i < len(parts) - 1 and parts[i] == first and parts[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return parts

    def _encode_piece(self, piece: str) -> tuple[int, ...]:
        hit = self._cache.get(piece)
        if hit is not None:
            return hit
        mapped = "".join(self.byte_encoder[b] for b in piece.encode("utf-8"))
        ids = tuple(self.vocab[t] for t in self._bpe(mapped))
        self._cache[piece] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for piece in GPT2_PATTERN.findall(text):
            out.extend(self._encode_piece(piece))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        text = "".join(self.id_to_token[int(i)] for i in ids)
        return bytes(self.byte_decoder[c] for c in text).decode("utf-8", errors="replace")


class WhitespaceTokenizer:
    """Word-level tokenizer for toy models.

    Splits on whitespace and separates runs of punctuation from words, so
    ``"carefully,"`` becomes ``["carefully", ","]``. Out-of-vocabulary words
    raise instead of mapping to an UNK id. ``decode`` joins with single spaces
    and is therefore not an exact inverse of ``encode``.
    """

    kind = "whitespace"

    def __init__(self, vocab: dict[str, int], bos_id: int | None = None):
        ids = sorted(vocab.values())
        if ids != list(range(len(ids))):
            raise MalformedVocab("toy vocab ids must be a dense range starting at 0")
        self.vocab = dict(vocab)
        self.bos_id = bos_id
        self.id_to_token = {i: t for t, i in self.vocab.items()}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        out = []
        for word in WORD_PATTERN.findall(text):
            try:
                out.append(self.vocab[word])
            except KeyError:
                raise OutOfVocabulary(f"word {word!r} not in toy vocabulary") from None
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.id_to_token[int(i)] for i in ids)


Tokenizer = BPETokenizer | WhitespaceTokenizer


def load_bpe(vocab_file: str | Path, merges_file: str | Path, bos_id: int | None = None) -> BPETokenizer:
    vocab_file, merges_file = Path(vocab_file), Path(merges_file)
    for p in (vocab_file, merges_file):
        if not p.is_file():
            raise FileMissing(f"{p} does not exist")
    try:
        vocab = json.loads(vocab_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MalformedVocab(f"{vocab_file}: {e}") from None
    if not isinstance(vocab, dict) or not all(
        isinstance(k, str) and isinstance(v, int) and v >= 0 for k, v in vocab.items()
    ):
        raise MalformedVocab(f"{vocab_file}: expected a JSON object of token -> non-negative int")

    merges = []
    lines = merges_file.read_text(encoding="utf-8").splitlines()
    for n, line in enumerate(lines):
        if n == 0 and line.startswith("#version"):
            continue
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 2 or not all(parts):
            raise MalformedMerges(f"{merges_file}:{n + 1}: expected two symbols, got {line!r}")
        merges.append((parts[0], parts[1]))
    for a, b in merges:
        if a + b not in vocab:
            raise MalformedMerges(f"merge result {a + b!r} missing from vocab")
    return BPETokenizer(vocab, merges, bos_id=bos_id)


def load_whitespace(vocab_file: str | Path, bos_id: int | None = None) -> WhitespaceTokenizer:
    vocab_file = Path(vocab_file)
    if not vocab_file.is_file():
        raise FileMissing(f"{vocab_file} does not exist")
    try:
        vocab = json.loads(vocab_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise MalformedVocab(f"{vocab_file}: {e}") from None
    if not isinstance(vocab, dict) or not all(isinstance(v, int) for v in vocab.values()):
        raise MalformedVocab(f"{vocab_file}: expected a JSON object of word -> int")
    return WhitespaceTokenizer(vocab, bos_id=bos_id)


def build_toy_vocab(texts: Iterable[str], extra: Iterable[str] = ()) -> dict[str, int]:
    """Collect every word/punctuation run in ``texts`` into a dense vocab, in first-seen order."""
    vocab: dict[str, int] = {}
    for word in list(extra):
        vocab.setdefault(word, len(vocab))
    for text in texts:
        for word in WORD_PATTERN.findall(text):
            vocab.setdefault(word, len(vocab))
    return vocab


@dataclass(frozen=True)
class AnswerTokens:
    yes_id: int
    no_id: int
    yes_form: str
    no_form: str

    def id_for(self, label: str) -> int:
        return self.yes_id if label == "Yes" else self.no_id

    @property
    def surface_forms(self) -> dict[str, str]:
        return {"Yes": self.yes_form, "No": self.no_form}


def _single_token(tok: Tokenizer, form: str) -> int | None:
    try:
        ids = tok.encode(form)
    except RolePatchError:
        return None
    return ids[0] if len(ids) == 1 else None


def resolve_answer_tokens(tok: Tokenizer, skeleton_end: str = ":") -> AnswerTokens:
    """Pick single-token surface forms for Yes/No at the answer position.

    Leading-space forms are preferred when the prompt ends with a non-whitespace
    character, since the tokenizer folds the separating space into the word.
    """
    lead = not skeleton_end or not skeleton_end[-1].isspace()
    found = {}
    for word in ("Yes", "No"):
        forms = [" " + word, word] if lead else [word, " " + word]
        for form in forms:
            tid = _single_token(tok, form)
            if tid is not None:
                found[word] = (tid, form)
                break
        else:
            raise NoSingleTokenForm(f"neither {word!r} nor {' ' + word!r} is a single token")
    if found["Yes"][0] == found["No"][0]:
        raise NoSingleTokenForm("Yes and No resolve to the same token id")
    return AnswerTokens(found["Yes"][0], found["No"][0], found["Yes"][1], found["No"][1])
