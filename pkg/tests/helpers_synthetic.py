"""Synthetic corpora and independent oracles shared across the test suite.

The keyword task: sentences are drawn from a fixed vocabulary of "regular"
words plus a set of marker words; the label is 1 iff at least one marker word
is present.  Marker words are longer and contain characters from a rare
alphabet, so a character-compositional model can recognize them even after a
one-character edit, while a vocabulary-lookup model cannot.

Oracles here are written independently of the package code paths they check
(plain loops, Fraction arithmetic, a textbook DP) so the tests stay dual-route.
"""

from __future__ import annotations

import math
from fractions import Fraction

from charcomp.corpus import RawRecord
from charcomp.numkernel import Rng

COMMON_ALPHABET = "abcdefghijklmnopqrst"
RARE_ALPHABET = "uvwxyz"


def _random_word(rng: Rng, alphabet: str, min_len: int, max_len: int) -> str:
    length = min_len + rng.randbelow(max_len - min_len + 1)
    return "".join(alphabet[rng.randbelow(len(alphabet))] for _ in range(length))


def make_marker_vocabulary(
    seed: int, n_regular: int = 480, n_markers: int = 20
) -> tuple[list[str], list[str]]:
    """(regular words, marker words); markers carry >= 4 rare-alphabet chars."""
    rng = Rng(seed).fork("vocab")
    regular: list[str] = []
    seen = set()
    while len(regular) < n_regular:
        w = _random_word(rng, COMMON_ALPHABET, 3, 8)
        if w not in seen:
            seen.add(w)
            regular.append(w)
    markers: list[str] = []
    while len(markers) < n_markers:
        length = 7 + rng.randbelow(4)
        chars = []
        rare_positions = set(rng.permutation(length)[:4])
        for i in range(length):
            alphabet = RARE_ALPHABET if i in rare_positions else COMMON_ALPHABET + RARE_ALPHABET
            chars.append(alphabet[rng.randbelow(len(alphabet))])
        w = "".join(chars)
        if w not in seen:
            seen.add(w)
            markers.append(w)
    return regular, markers


def make_marker_corpus(
    seed: int,
    regular: list[str],
    markers: list[str],
    n_sentences: int,
    min_words: int = 3,
    max_words: int = 6,
    cover_vocabulary: bool = False,
) -> list[RawRecord]:
    """Balanced corpus labeled by marker presence (even ids 0, odd ids 1).

    With cover_vocabulary=True the leading sentences cycle through every
    regular word and every marker, guaranteeing the full vocabulary appears.
    """
    rng = Rng(seed).fork("corpus")
    records = []
    cover_regular = list(regular) if cover_vocabulary else []
    cover_markers = list(markers) if cover_vocabulary else []
    for i in range(n_sentences):
        n_words = min_words + rng.randbelow(max_words - min_words + 1)
        words = [regular[rng.randbelow(len(regular))] for _ in range(n_words)]
        label = i % 2
        if label == 0 and cover_regular:
            # coverage only via negatives, where no marker can overwrite it
            take = min(len(words), len(cover_regular))
            words[:take] = cover_regular[:take]
            del cover_regular[:take]
        if label == 1:
            n_m = 1 + rng.randbelow(2)
            positions = rng.permutation(n_words)[:n_m]
            for pos in positions:
                if cover_markers:
                    words[pos] = cover_markers.pop(0)
                else:
                    words[pos] = markers[rng.randbelow(len(markers))]
        records.append(RawRecord(id=str(i), text=" ".join(words), hs=label))
    return records


def make_smoke_corpus(seed: int = 0, n_sentences: int = 20) -> list[RawRecord]:
    """The 20-example separable corpus: the label is marker-word presence.

    Small vocabulary and short sentences so default training separates it
    quickly.
    """
    regular, markers = make_marker_vocabulary(seed, n_regular=20, n_markers=3)
    return make_marker_corpus(
        seed, regular, markers, n_sentences, min_words=3, max_words=5
    )


def write_tsv(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("id\ttext\tHS\n")
        for r in records:
            f.write(f"{r.id}\t{r.text}\t{r.hs}\n")


# ---------------------------------------------------------------------------
# Independent oracles.
# ---------------------------------------------------------------------------


def levenshtein(a: str, b: str) -> int:
    """Textbook dynamic-programming edit distance."""
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[len(b)]


def round_half_up_percent(level: int, count: int) -> int:
    """round-half-up(level/100 * count) via exact Fraction arithmetic."""
    return math.floor(Fraction(level * count, 100) + Fraction(1, 2))


def brute_force_report(golds, preds) -> dict:
    """Independent metric computation: plain counting, no shared code."""
    pairs = list(zip(golds, preds))
    out = {}
    for positive in (1, 0):
        tp = sum(1 for g, p in pairs if g == positive and p == positive)
        fp = sum(1 for g, p in pairs if g != positive and p == positive)
        fn = sum(1 for g, p in pairs if g == positive and p != positive)
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1 = (2 * precision * recall / (precision + recall)) if (precision + recall) else 0.0
        out[positive] = (precision, recall, f1)
    correct = sum(1 for g, p in pairs if g == p)
    out["accuracy"] = correct / len(pairs)
    out["macro_f1"] = (out[1][2] + out[0][2]) / 2
    return out
