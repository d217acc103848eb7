"""Noise-injection robustness benchmark.

A noisy version at level N applies exactly one character edit (deletion or
in-place duplication, 50/50) to round-half-up(N/100 * word_count) distinct
words of every sentence.  Eleven levels (0, 10, ..., 100) form a suite; each
level gets an independent fork of the suite seed so any level is reproducible
on its own.  Noise never changes sentence structure or labels, only the
characters inside the selected words.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import CharVocab
from .evalmetrics import evaluate
from .netstack import FrozenModel, ModelParams, eval_probs, frozen_eval_probs
from .numkernel import Rng

NOISE_LEVELS: tuple[int, ...] = tuple(range(0, 101, 10))


def check_level(level: int) -> int:
    if level not in NOISE_LEVELS:
        raise ValueError(f"noise level must be a multiple of 10 in [0, 100], got {level}")
    return level


@dataclass(frozen=True)
class NoisySuite:
    """Perturbed copies of one tokenized corpus, keyed by noise level."""

    seed: int
    levels: tuple[int, ...]
    versions: dict[int, list[list[str]]]
    corpus_id: str = ""

    def __post_init__(self):
        if tuple(sorted(self.versions)) != tuple(sorted(self.levels)):
            raise ValueError("suite versions do not match its levels")


@dataclass(frozen=True)
class CurvePoint:
    level: int
    macro_f1: float
    accuracy: float


@dataclass(frozen=True)
class RobustnessCurve:
    model_id: str
    points: tuple[CurvePoint, ...]

    def macro_f1_at(self, level: int) -> float:
        for pt in self.points:
            if pt.level == level:
                return pt.macro_f1
        raise KeyError(f"no point at level {level}")


def perturb_word(rng: Rng, word: str) -> str:
    """Apply exactly one random edit: delete or duplicate one character.

    Draw order: first the action (0 = delete, 1 = duplicate), then a uniform
    character position.  A one-character word drawn for deletion falls back
    to duplication so words never vanish.
    """
    if len(word) < 1:
        raise ValueError("cannot perturb an empty word")
    action = rng.randbelow(2)
    pos = rng.randbelow(len(word))
    if action == 0 and len(word) > 1:
        return word[:pos] + word[pos + 1 :]
    return word[: pos + 1] + word[pos:]


def modified_word_count(level: int, word_count: int) -> int:
    """round-half-up(level/100 * word_count), in exact integer arithmetic."""
    return (level * word_count + 50) // 100


def perturb_sentence(rng: Rng, words: Sequence[str], level: int) -> list[str]:
    """Perturb round-half-up(level% of word count) distinct words of a sentence.

    Selected positions are drawn uniformly without replacement and edited in
    ascending position order; the word count never changes.
    """
    check_level(level)
    if len(words) == 0:
        raise ValueError("cannot perturb an empty sentence")
    k = modified_word_count(level, len(words))
    out = list(words)
    if k == 0:
        return out
    positions = sorted(rng.permutation(len(words))[:k])
    for pos in positions:
        out[pos] = perturb_word(rng, out[pos])
    return out


def make_suite(
    sentences: Sequence[Sequence[str]],
    seed: int,
    levels: Sequence[int] = NOISE_LEVELS,
    corpus_id: str = "",
) -> NoisySuite:
    """Build the noisy versions of a tokenized corpus, one per level.

    Level 0 is a verbatim copy.  Each level perturbs from an independent fork
    of the seed, so regenerating any single level reproduces it exactly.
    """
    if len(sentences) == 0:
        raise ValueError("cannot build a noise suite over an empty corpus")
    levels = tuple(sorted(check_level(l) for l in levels))
    if len(set(levels)) != len(levels):
        raise ValueError(f"duplicate noise levels: {levels}")
    base_rng = Rng(seed)
    versions: dict[int, list[list[str]]] = {}
    for level in levels:
        if level == 0:
            versions[0] = [list(s) for s in sentences]
            continue
        rng = base_rng.fork(f"noise-level-{level}")
        versions[level] = [perturb_sentence(rng, s, level) for s in sentences]
    return NoisySuite(seed=seed, levels=levels, versions=versions, corpus_id=corpus_id)


def _eval_version(
    model: ModelParams | FrozenModel,
    sentences: Sequence[Sequence[str]],
    golds: Sequence[int],
    char_vocab: CharVocab,
) -> tuple[float, float]:
    char_ids = [[char_vocab.encode(w) for w in words] for words in sentences]
    if isinstance(model, FrozenModel):
        probs = frozen_eval_probs(model, [list(w) for w in sentences], char_ids)
    else:
        probs = eval_probs(model, char_ids)
    preds = [int(i) for i in np.argmax(probs, axis=1)]
    report = evaluate(list(golds), preds)
    return report.macro_f1, report.accuracy


def sweep(
    model: ModelParams,
    frozen: FrozenModel,
    suite: NoisySuite,
    golds: Sequence[int],
    char_vocab: CharVocab,
    csv_path: str | Path | None = None,
) -> tuple[RobustnessCurve, RobustnessCurve]:
    """Evaluate the compositional and frozen models on every suite version.

    Returns (compositional curve, frozen curve); optionally writes the CSV
    artifact (see write_curves_csv).
    """
    n = {len(v) for v in suite.versions.values()}
    if n != {len(golds)}:
        raise ValueError(
            f"suite has {sorted(n)} sentences per version but {len(golds)} gold labels"
        )
    comp_points = []
    frozen_points = []
    for level in suite.levels:
        sentences = suite.versions[level]
        f1, acc = _eval_version(model, sentences, golds, char_vocab)
        comp_points.append(CurvePoint(level, f1, acc))
        f1, acc = _eval_version(frozen, sentences, golds, char_vocab)
        frozen_points.append(CurvePoint(level, f1, acc))
    comp = RobustnessCurve("compositional", tuple(comp_points))
    froz = RobustnessCurve("frozen", tuple(frozen_points))
    if csv_path is not None:
        write_curves_csv((comp, froz), csv_path)
    return comp, froz


def write_curves_csv(curves: Sequence[RobustnessCurve], path: str | Path) -> None:
    """CSV artifact: header model,noise_percent,macro_f1,accuracy; one row per
    (model, level), levels ascending, floats with 6 decimals, LF endings."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["model", "noise_percent", "macro_f1", "accuracy"])
        for curve in curves:
            for pt in sorted(curve.points, key=lambda p: p.level):
                writer.writerow(
                    [curve.model_id, pt.level, f"{pt.macro_f1:.6f}", f"{pt.accuracy:.6f}"]
                )
