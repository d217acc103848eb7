"""Command-line surface: train, eval, predict, export-encoder, noise, sweep,
and gradcheck.

Exit codes: 0 on success, 1 on domain errors (bad data, shape mismatches,
divergence, failed gradient check), 2 on usage errors.  Progress goes to
stderr; machine-readable results go to files or stdout.
"""

from __future__ import annotations

import argparse
import re
import sys
from pathlib import Path

import numpy as np

from .corpus import CorpusError, load_tsv, make_example, sentence_words
from .evalmetrics import report_json, report_table
from .netstack import eval_probs, gradient_check
from .robustness import check_level, make_suite, sweep
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    build_frozen,
    evaluate_model,
    export_encoder,
    load_checkpoint,
    load_config_file,
    save_encoder,
    train,
)


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def parse_levels(text: str) -> tuple[int, ...]:
    """Parse a --levels flag: either "start..end:step" or a comma list."""
    m = re.fullmatch(r"(\d+)\.\.(\d+):(\d+)", text)
    if m:
        start, end, step = int(m.group(1)), int(m.group(2)), int(m.group(3))
        if step <= 0 or end < start:
            raise ValueError(f"invalid --levels range {text!r}")
        values = tuple(range(start, end + 1, step))
    else:
        try:
            values = tuple(int(v) for v in text.split(","))
        except ValueError as exc:
            raise ValueError(f"invalid --levels value {text!r}") from exc
    for v in values:
        check_level(v)
    return values


def _build_train_config(args) -> TrainConfig:
    doc = load_config_file(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.encoder is not None:
        doc["transfer_source"] = args.encoder
    if args.metric is not None:
        doc["selection_metric"] = args.metric
    return TrainConfig.from_dict(doc)


def _cmd_train(args) -> int:
    cfg = _build_train_config(args)
    train_records = load_tsv(args.train)
    dev_records = load_tsv(args.dev)
    _progress(f"training on {len(train_records)} records, dev {len(dev_records)}")
    best, history = train(cfg, train_records, dev_records, args.out, log=_progress)
    best_path = Path(args.out) / f"epoch_{best.metadata['epoch']:03d}.json"
    print(best_path)
    return 0


def _cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    records = load_tsv(args.eval)
    examples = [
        make_example(sentence_words(r.text), r.hs, ck.char_vocab) for r in records
    ]
    report = evaluate_model(ck.params, examples)
    _progress(report_table(report))
    if args.metric:
        value = {
            "macro-f1": report.macro_f1,
            "pos-f1": report.hate.f1,
            "error": report.error,
        }[args.metric]
        _progress(f"{args.metric}: {value:.6f}")
    text = report_json(report)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        _progress(f"report written to {args.out}")
    else:
        print(text)
    return 0


def _cmd_predict(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    records = load_tsv(args.eval, require_hs=False)
    sentences = [
        [ck.char_vocab.encode(w) for w in sentence_words(r.text)] for r in records
    ]
    probs = eval_probs(ck.params, sentences)
    lines = []
    for r, p in zip(records, probs):
        lines.append(f"{r.id}\t{int(np.argmax(p))}\t{p[1]:.6f}")
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        _progress(f"{len(lines)} predictions written to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_export_encoder(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    bundle = export_encoder(ck)
    save_encoder(bundle, args.out)
    _progress(f"encoder bundle written to {args.out}")
    return 0


def _cmd_noise(args) -> int:
    records = load_tsv(args.eval)
    sentences = [sentence_words(r.text) for r in records]
    levels = parse_levels(args.levels)
    suite = make_suite(sentences, args.seed, levels, corpus_id=Path(args.eval).name)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for level in suite.levels:
        path = out_dir / f"{suite.corpus_id}.n{level}"
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("id\ttext\tHS\n")
            for rec, words in zip(records, suite.versions[level]):
                f.write(f"{rec.id}\t{' '.join(words)}\t{rec.hs}\n")
        _progress(f"wrote {path}")
    return 0


def _cmd_sweep(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    records = load_tsv(args.eval)
    sentences = [sentence_words(r.text) for r in records]
    golds = [r.hs for r in records]
    levels = parse_levels(args.levels)
    suite = make_suite(sentences, args.seed, levels, corpus_id=Path(args.eval).name)
    frozen = build_frozen(ck)
    _progress(f"sweeping {len(levels)} noise levels over {len(records)} records")
    comp, froz = sweep(ck.params, frozen, suite, golds, ck.char_vocab, csv_path=args.out)
    for curve in (comp, froz):
        for pt in curve.points:
            _progress(
                f"{curve.model_id} N={pt.level}: macro_f1={pt.macro_f1:.4f} "
                f"accuracy={pt.accuracy:.4f}"
            )
    _progress(f"curves written to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    groups = gradient_check(seed=args.seed)
    failed = []
    for g in groups:
        status = "ok" if g.max_rel_err < args.tolerance else "FAIL"
        print(f"{g.name}\t{g.max_rel_err:.6e}\t{status}")
        if g.max_rel_err >= args.tolerance:
            failed.append(g)
    if failed:
        worst = max(failed, key=lambda g: g.max_rel_err)
        print(
            f"error: gradient check failed for {worst.name} "
            f"(max relative error {worst.max_rel_err:.6e} >= {args.tolerance:g})",
            file=sys.stderr,
        )
        return 1
    _progress(f"all {len(groups)} parameter groups within {args.tolerance:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="charcomp",
        description="Compositional character-level GRU text classifier",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, checkpointing every epoch")
    p.add_argument("--train", required=True, help="training TSV")
    p.add_argument("--dev", required=True, help="development TSV (model selection)")
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--encoder", help="pre-trained encoder bundle for transfer")
    p.add_argument("--metric", choices=["macro-f1", "pos-f1", "error"], default=None,
                   help="dev selection metric (default: error)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labeled TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval", required=True, help="evaluation TSV")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--metric", choices=["macro-f1", "pos-f1", "error"], default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="label an unlabeled TSV (id<TAB>pred<TAB>p_hate)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval", required=True, help="input TSV (HS column not required)")
    p.add_argument("--out", help="write predictions here instead of stdout")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("export-encoder", help="extract the char-to-word encoder bundle")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_encoder)

    p = sub.add_parser("noise", help="write noisy copies of a corpus")
    p.add_argument("--eval", required=True, help="corpus TSV to perturb")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--levels", default="0..100:10")
    p.set_defaults(func=_cmd_noise)

    p = sub.add_parser("sweep", help="robustness sweep: compositional vs frozen")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval", required=True, help="labeled evaluation TSV")
    p.add_argument("--out", required=True, help="output curve CSV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--levels", default="0..100:10")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("gradcheck", help="verify analytic gradients vs finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (CorpusError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
