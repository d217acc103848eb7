"""Corpus ingestion: TSV loading, tokenization, vocabularies, and examples.

Input files are UTF-8 tab-separated with a header row naming at least the
columns ``id``, ``text`` and ``HS`` (``TR``/``AG`` optional).  No quoting is
supported; a tab inside a text field is invalid input.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

EMPTY_PLACEHOLDER = "∅"  # stands in for text that tokenizes to nothing
MAX_WORD_CHARS = 50
MAX_SENT_WORDS = 100

LABEL_NOT = 0
LABEL_HATE = 1


class CorpusError(ValueError):
    """Malformed corpus file or invalid corpus contents."""


@dataclass(frozen=True)
class RawRecord:
    """One TSV row.  ``tr``/``ag`` are carried along but unused downstream."""

    id: str
    text: str
    hs: int | None
    tr: int | None = None
    ag: int | None = None


@dataclass(frozen=True)
class Example:
    """A tokenized sentence ready for the model: surface words, the parallel
    per-word character-index sequences, and the binary label."""

    words: tuple[str, ...]
    char_ids: tuple[tuple[int, ...], ...]
    label: int


class CharVocab:
    """Character -> dense index map; index 0 is reserved for unknown chars."""

    UNKNOWN = 0

    def __init__(self, chars: Sequence[str]):
        self.chars = list(chars)
        self._index = {c: i + 1 for i, c in enumerate(self.chars)}
        if len(self._index) != len(self.chars):
            raise CorpusError("duplicate characters in vocabulary")

    def __len__(self) -> int:
        return len(self.chars)

    def __contains__(self, char: str) -> bool:
        return char in self._index

    def index(self, char: str) -> int:
        return self._index.get(char, self.UNKNOWN)

    def encode(self, word: str) -> tuple[int, ...]:
        return tuple(self._index.get(c, self.UNKNOWN) for c in word)

    def __eq__(self, other) -> bool:
        return isinstance(other, CharVocab) and self.chars == other.chars


class WordVocab:
    """Word surface form -> dense index map (first-occurrence order)."""

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self._index = {w: i for i, w in enumerate(self.words)}
        if len(self._index) != len(self.words):
            raise CorpusError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def index(self, word: str) -> int:
        return self._index[word]

    def as_set(self) -> frozenset[str]:
        return frozenset(self.words)

    def __eq__(self, other) -> bool:
        return isinstance(other, WordVocab) and self.words == other.words


def _parse_binary(value: str, column: str, line_no: int) -> int:
    if value == "0":
        return 0
    if value == "1":
        return 1
    raise CorpusError(f"line {line_no}: {column} must be 0 or 1, got {value!r}")


def load_tsv(path: str | Path, require_hs: bool = True) -> list[RawRecord]:
    """Load a headered TSV corpus file, one RawRecord per data row.

    With ``require_hs=False`` (prediction input) the HS column may be absent,
    in which case every record carries ``hs=None``.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    lines = raw.splitlines()
    if not lines:
        raise CorpusError(f"{path}: empty file, expected a header row")
    header = lines[0].split("\t")
    col = {name: i for i, name in enumerate(header)}
    required = ["id", "text", "HS"] if require_hs else ["id", "text"]
    for name in required:
        if name not in col:
            raise CorpusError(f"{path}: missing required column {name!r}")
    records = []
    for line_no, line in enumerate(lines[1:], start=2):
        if line == "":
            continue  # tolerate a trailing blank line
        fields = line.split("\t")
        if len(fields) != len(header):
            raise CorpusError(
                f"{path}: line {line_no}: expected {len(header)} fields, got {len(fields)}"
            )
        text = fields[col["text"]]
        if text.strip() == "":
            raise CorpusError(f"{path}: line {line_no}: empty text field")
        hs = None
        if "HS" in col:
            hs = _parse_binary(fields[col["HS"]], "HS", line_no)
        tr = ag = None
        if "TR" in col and fields[col["TR"]] != "":
            tr = _parse_binary(fields[col["TR"]], "TR", line_no)
        if "AG" in col and fields[col["AG"]] != "":
            ag = _parse_binary(fields[col["AG"]], "AG", line_no)
        records.append(RawRecord(id=fields[col["id"]], text=text, hs=hs, tr=tr, ag=ag))
    return records


def tokenize(text: str) -> list[str]:
    """NFC-normalize, lowercase, and split on runs of Unicode whitespace.

    Total function: text with no word characters yields the single
    placeholder word so downstream sentences are never empty.
    """
    words = unicodedata.normalize("NFC", text).lower().split()
    return words if words else [EMPTY_PLACEHOLDER]


def sentence_words(text: str) -> list[str]:
    """Tokenize and apply the length caps (50 chars/word, 100 words/sentence)."""
    return [w[:MAX_WORD_CHARS] for w in tokenize(text)[:MAX_SENT_WORDS]]


def build_vocabs(word_lists: Iterable[Sequence[str]]) -> tuple[CharVocab, WordVocab]:
    """Build both vocabularies from tokenized training sentences.

    Characters get indices 1.. in first-occurrence order (0 stays unknown);
    words get indices 0.. in first-occurrence order.
    """
    chars: dict[str, None] = {}
    words: dict[str, None] = {}
    n_sentences = 0
    for sentence in word_lists:
        n_sentences += 1
        for word in sentence:
            words.setdefault(word, None)
            for c in word:
                chars.setdefault(c, None)
    if n_sentences == 0:
        raise CorpusError("cannot build vocabularies from an empty training set")
    return CharVocab(list(chars)), WordVocab(list(words))


def make_example(words: Sequence[str], label: int, char_vocab: CharVocab) -> Example:
    if label not in (0, 1):
        raise CorpusError(f"label must be 0 or 1, got {label!r}")
    words = tuple(words)
    if not words:
        words = (EMPTY_PLACEHOLDER,)
    return Example(
        words=words,
        char_ids=tuple(char_vocab.encode(w) for w in words),
        label=label,
    )


def records_to_examples(records: Sequence[RawRecord], char_vocab: CharVocab) -> list[Example]:
    out = []
    for rec in records:
        if rec.hs is None:
            raise CorpusError(f"record {rec.id!r} has no HS label")
        out.append(make_example(sentence_words(rec.text), rec.hs, char_vocab))
    return out
