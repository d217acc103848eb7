"""Training loop, optimizers, checkpoint serialization, and encoder transfer.

A model is checkpointed after every epoch; the returned model is the epoch
with the lowest development error (earliest epoch wins ties).  Checkpoints
and encoder bundles are versioned JSON documents whose floats use Python's
shortest round-trip decimal representation, so load(save(x)) reproduces every
array bit for bit and same-seed runs write byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import (
    CharVocab,
    CorpusError,
    Example,
    RawRecord,
    WordVocab,
    build_vocabs,
    make_example,
    sentence_words,
)
from .evalmetrics import EvalReport, evaluate
from .netstack import (
    BiGruLayer,
    BiGruStack,
    FrozenModel,
    GruLayerParams,
    ModelParams,
    ModelShape,
    _init_stack,
    backward_batch,
    eval_probs,
    frozen_eval_probs,
    init_params,
)
from .numkernel import Array, Rng, init_uniform

CHECKPOINT_VERSION = 1
ENCODER_VERSION = 1

SELECTION_METRICS = ("error", "macro-f1", "pos-f1")
OPTIMIZERS = ("sgd", "adam")


class CheckpointError(ValueError):
    """Unreadable, corrupt, or version-incompatible checkpoint/bundle file."""


class TrainingError(RuntimeError):
    """Training aborted (e.g. divergence)."""


@dataclass(frozen=True)
class TrainConfig:
    shape: ModelShape = ModelShape()
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    seed: int = 0
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gradient_clip_norm: float = 5.0
    transfer_source: str | None = None
    selection_metric: str = "error"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ValueError(
                f"selection_metric must be one of {SELECTION_METRICS}, got {self.selection_metric!r}"
            )

    def to_dict(self) -> dict:
        return {
            "shape": self.shape.to_dict(),
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "gradient_clip_norm": self.gradient_clip_norm,
            "transfer_source": self.transfer_source,
            "selection_metric": self.selection_metric,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "shape" in d:
            base = ModelShape().to_dict()
            extra = set(d["shape"]) - set(base)
            if extra:
                raise ValueError(f"unknown shape keys: {sorted(extra)}")
            # drop derived fields from the defaults; user-provided values for
            # them are still validated by ModelShape.from_dict
            del base["word_repr_dim"], base["sent_repr_dim"]
            base.update(d["shape"])
            d["shape"] = ModelShape.from_dict(base)
        return cls(**d)

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config_file(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CheckpointError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: invalid config JSON at position {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: config must be a JSON object")
    return doc


# ---------------------------------------------------------------------------
# Optimizers and gradient clipping.
# ---------------------------------------------------------------------------


class Sgd:
    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        for (_, a), (_, g) in zip(params.named_arrays(), grads.named_arrays()):
            a -= self.lr * g


class Adam:
    def __init__(self, cfg: TrainConfig):
        self.lr = cfg.learning_rate
        self.b1 = cfg.adam_beta1
        self.b2 = cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.t = 0
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (name, a), (_, g) in zip(params.named_arrays(), grads.named_arrays()):
            m = self.m.setdefault(name, np.zeros_like(a))
            v = self.v.setdefault(name, np.zeros_like(a))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg) if cfg.optimizer == "adam" else Sgd(cfg)


def clip_gradients(grads: ModelParams, max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Returns the pre-clip norm.  max_norm <= 0 disables clipping.
    """
    sq = 0.0
    for _, g in grads.named_arrays():
        flat = g.ravel()
        sq += float(flat @ flat)
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, g in grads.named_arrays():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# Checkpoints and encoder bundles.
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    format_version: int
    shape: ModelShape
    char_vocab: CharVocab
    word_vocab: WordVocab
    params: ModelParams
    metadata: dict


@dataclass
class EncoderBundle:
    format_version: int
    char_vocab: CharVocab
    char_emb: Array
    char_stack: BiGruStack
    metadata: dict


def _array_doc(a: Array) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _write_json_atomic(doc: dict, path: Path) -> None:
    # dumps + write is measurably faster than json.dump's chunked encoder
    text = json.dumps(doc, ensure_ascii=False, allow_nan=False)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write {path}: {exc}") from exc


def _read_json(path: Path, what: str) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"cannot read {what} {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"{path}: corrupt {what} at position {exc.pos}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: {what} must be a JSON object")
    return doc


def _parse_array(params_doc: dict, name: str, path: Path) -> Array:
    entry = params_doc.get(name)
    if entry is None:
        raise CheckpointError(f"{path}: missing parameter array {name!r}")
    a = np.array(entry["data"], dtype=np.float64)
    shape = tuple(entry["shape"])
    if a.size != int(np.prod(shape)):
        raise CheckpointError(f"{path}: array {name!r} has {a.size} values, declared shape {shape}")
    return a.reshape(shape)


def _parse_stack(params_doc: dict, stack_name: str, n_layers: int, path: Path) -> BiGruStack:
    layers = []
    for i in range(n_layers):
        dirs = {}
        for dir_name in ("fwd", "bwd"):
            prefix = f"{stack_name}.layer{i}.{dir_name}"
            dirs[dir_name] = GruLayerParams(
                _parse_array(params_doc, f"{prefix}.w_in", path),
                _parse_array(params_doc, f"{prefix}.u_rec", path),
                _parse_array(params_doc, f"{prefix}.b", path),
            )
        layers.append(BiGruLayer(dirs["fwd"], dirs["bwd"]))
    return BiGruStack(layers)


def save_checkpoint(ck: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    doc = {
        "format_version": ck.format_version,
        "shape": ck.shape.to_dict(),
        "char_vocab": ck.char_vocab.chars,
        "word_vocab": ck.word_vocab.words,
        "params": {name: _array_doc(a) for name, a in ck.params.named_arrays()},
        "metadata": ck.metadata,
    }
    _write_json_atomic(doc, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    doc = _read_json(path, "checkpoint")
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format_version {version!r}, "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    for key in ("shape", "char_vocab", "word_vocab", "params", "metadata"):
        if key not in doc:
            raise CheckpointError(f"{path}: not a checkpoint file (missing {key!r})")
    shape = ModelShape.from_dict(doc["shape"])
    char_vocab = CharVocab(doc["char_vocab"])
    word_vocab = WordVocab(doc["word_vocab"])
    pd = doc["params"]
    params = ModelParams(
        shape,
        _parse_array(pd, "char_embeddings", path),
        _parse_stack(pd, "char_to_word", shape.layers_per_stack, path),
        _parse_stack(pd, "word_to_sentence", shape.layers_per_stack, path),
        _parse_array(pd, "head_w", path),
        _parse_array(pd, "head_b", path),
    )
    expected = {name for name, _ in params.named_arrays()}
    extras = set(pd) - expected
    if extras:
        raise CheckpointError(f"{path}: unexpected parameter arrays {sorted(extras)}")
    if params.char_emb.shape[0] != len(char_vocab) + 1:
        raise CheckpointError(
            f"{path}: embedding rows {params.char_emb.shape[0]} != char vocab size + 1 "
            f"({len(char_vocab) + 1})"
        )
    return Checkpoint(version, shape, char_vocab, word_vocab, params, doc["metadata"])


def export_encoder(ck: Checkpoint) -> EncoderBundle:
    """Extract the character-to-word encoder (vocab, embeddings, char stack)."""
    if ck.format_version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"cannot export from checkpoint version {ck.format_version!r}"
        )
    metadata = {
        "source_epoch": ck.metadata.get("epoch"),
        "source_config_digest": ck.metadata.get("config_digest"),
    }
    return EncoderBundle(
        format_version=ENCODER_VERSION,
        char_vocab=CharVocab(list(ck.char_vocab.chars)),
        char_emb=ck.params.char_emb.copy(),
        char_stack=ck.params.char_stack.copy(),
        metadata=metadata,
    )


def save_encoder(bundle: EncoderBundle, path: str | Path) -> None:
    path = Path(path)
    params_doc = {"char_embeddings": _array_doc(bundle.char_emb)}
    for i, layer in enumerate(bundle.char_stack.layers):
        for dir_name, p in (("fwd", layer.fwd), ("bwd", layer.bwd)):
            prefix = f"char_to_word.layer{i}.{dir_name}"
            params_doc[f"{prefix}.w_in"] = _array_doc(p.w_in)
            params_doc[f"{prefix}.u_rec"] = _array_doc(p.u_rec)
            params_doc[f"{prefix}.b"] = _array_doc(p.b)
    doc = {
        "format_version": bundle.format_version,
        "char_vocab": bundle.char_vocab.chars,
        "params": params_doc,
        "metadata": bundle.metadata,
    }
    _write_json_atomic(doc, path)


def load_encoder(path: str | Path) -> EncoderBundle:
    path = Path(path)
    doc = _read_json(path, "encoder bundle")
    version = doc.get("format_version")
    if version != ENCODER_VERSION:
        raise CheckpointError(
            f"{path}: unsupported encoder format_version {version!r}, "
            f"this build reads version {ENCODER_VERSION}"
        )
    for key in ("char_vocab", "params", "metadata"):
        if key not in doc:
            raise CheckpointError(f"{path}: not an encoder bundle (missing {key!r})")
    if "word_vocab" in doc or "shape" in doc:
        raise CheckpointError(
            f"{path}: not an encoder bundle (looks like a full checkpoint)"
        )
    pd = doc["params"]
    n_layers = 0
    while f"char_to_word.layer{n_layers}.fwd.w_in" in pd:
        n_layers += 1
    if n_layers == 0:
        raise CheckpointError(f"{path}: bundle has no char_to_word layers")
    bundle = EncoderBundle(
        format_version=version,
        char_vocab=CharVocab(doc["char_vocab"]),
        char_emb=_parse_array(pd, "char_embeddings", path),
        char_stack=_parse_stack(pd, "char_to_word", n_layers, path),
        metadata=doc["metadata"],
    )
    expected = {"char_embeddings"}
    for i in range(n_layers):
        for d in ("fwd", "bwd"):
            for arr in ("w_in", "u_rec", "b"):
                expected.add(f"char_to_word.layer{i}.{d}.{arr}")
    extras = set(pd) - expected
    if extras:
        raise CheckpointError(f"{path}: unexpected arrays in encoder bundle: {sorted(extras)}")
    return bundle


def init_with_transfer(bundle: EncoderBundle, cfg: TrainConfig) -> tuple[ModelParams, CharVocab]:
    """Model initialized from a pre-trained char-to-word encoder.

    The bundle's character vocabulary replaces the task vocabulary (the
    transferred embedding rows are only meaningful under their original index
    assignment); everything above the word level is freshly initialized from
    cfg.seed.  All parameters remain trainable.
    """
    shape = cfg.shape
    emb = bundle.char_emb
    if emb.shape[1] != shape.char_emb_dim:
        raise CheckpointError(
            f"transfer embedding dim mismatch: bundle has {emb.shape[1]}, "
            f"config wants {shape.char_emb_dim}"
        )
    if bundle.char_stack.hidden != shape.hidden:
        raise CheckpointError(
            f"transfer hidden-size mismatch: bundle has {bundle.char_stack.hidden}, "
            f"config wants {shape.hidden}"
        )
    if len(bundle.char_stack.layers) != shape.layers_per_stack:
        raise CheckpointError(
            f"transfer layer-count mismatch: bundle has {len(bundle.char_stack.layers)}, "
            f"config wants {shape.layers_per_stack}"
        )
    rng = Rng(cfg.seed)
    params = ModelParams(
        shape,
        emb.copy(),
        bundle.char_stack.copy(),
        _init_stack(rng.fork("init/word_to_sentence"), 2 * shape.hidden, shape),
        init_uniform(rng.fork("init/head"), shape.classes, 2 * shape.hidden),
        np.zeros(shape.classes),
    )
    return params, CharVocab(list(bundle.char_vocab.chars))


# ---------------------------------------------------------------------------
# Evaluation helpers and the training loop.
# ---------------------------------------------------------------------------


def predict_labels(model: ModelParams | FrozenModel, examples: Sequence[Example]) -> list[int]:
    if isinstance(model, FrozenModel):
        probs = frozen_eval_probs(
            model, [ex.words for ex in examples], [ex.char_ids for ex in examples]
        )
    else:
        probs = eval_probs(model, [ex.char_ids for ex in examples])
    return [int(i) for i in np.argmax(probs, axis=1)]


def evaluate_model(model: ModelParams | FrozenModel, examples: Sequence[Example]) -> EvalReport:
    golds = [ex.label for ex in examples]
    return evaluate(golds, predict_labels(model, examples))


def build_frozen(ck: Checkpoint) -> FrozenModel:
    return FrozenModel(base=ck.params, train_vocab=ck.word_vocab.as_set())


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    dev_error: float
    dev_macro_f1: float
    dev_pos_f1: float
    checkpoint_file: str
    train_accuracy: float | None = None


def _select_best(history: Sequence[EpochRecord], metric: str) -> int:
    if metric == "error":
        key = lambda i: history[i].dev_error
        return min(range(len(history)), key=key)
    if metric == "macro-f1":
        return max(range(len(history)), key=lambda i: (history[i].dev_macro_f1, -i))
    return max(range(len(history)), key=lambda i: (history[i].dev_pos_f1, -i))


def train(
    cfg: TrainConfig,
    train_records: Sequence[RawRecord],
    dev_records: Sequence[RawRecord],
    out_dir: str | Path,
    *,
    log: Callable[[str], None] | None = None,
    eval_train: bool = False,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Run the full training protocol and return (best checkpoint, history).

    One checkpoint file per epoch is written to out_dir; the best epoch by
    cfg.selection_metric on the dev split (earliest on ties) is reloaded from
    disk and returned.  Fully deterministic given (cfg, data).
    """
    emit = log or (lambda s: None)
    if not train_records or not dev_records:
        raise ValueError("train and dev splits must both be nonempty")
    for rec in list(train_records) + list(dev_records):
        if rec.hs is None:
            raise CorpusError(f"record {rec.id!r} has no HS label")
    train_words = [sentence_words(r.text) for r in train_records]
    task_char_vocab, word_vocab = build_vocabs(train_words)
    if cfg.transfer_source is not None:
        bundle = load_encoder(cfg.transfer_source)
        params, char_vocab = init_with_transfer(bundle, cfg)
        emit(f"initialized char encoder from {cfg.transfer_source} "
             f"({len(char_vocab)} chars adopted)")
    else:
        char_vocab = task_char_vocab
        params = init_params(cfg.shape, len(char_vocab), Rng(cfg.seed))
    train_examples = [
        make_example(words, rec.hs, char_vocab)
        for words, rec in zip(train_words, train_records)
    ]
    dev_examples = [
        make_example(sentence_words(rec.text), rec.hs, char_vocab) for rec in dev_records
    ]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(cfg)
    grads = params.zeros_like()
    rng = Rng(cfg.seed)
    n = len(train_examples)
    history: list[EpochRecord] = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.fork(f"epoch-{epoch}/shuffle").permutation(n)
        drop_rng = rng.fork(f"epoch-{epoch}/dropout")
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            grads.zero_()
            try:
                losses, _ = backward_batch(
                    params, [train_examples[i] for i in batch], drop_rng, into=grads
                )
            except ValueError as exc:
                raise TrainingError(
                    f"epoch {epoch}, batch {start // cfg.batch_size}: {exc}"
                ) from exc
            epoch_loss += float(losses.sum())
            scale = 1.0 / len(batch)
            for _, g in grads.named_arrays():
                g *= scale
            clip_gradients(grads, cfg.gradient_clip_norm)
            optimizer.step(params, grads)
        train_loss = epoch_loss / n
        dev_report = evaluate_model(params, dev_examples)
        train_accuracy = (
            evaluate_model(params, train_examples).accuracy if eval_train else None
        )
        metadata = {
            "epoch": epoch,
            "train_loss": train_loss,
            "dev_error": dev_report.error,
            "seed": cfg.seed,
            "config_digest": cfg.digest(),
        }
        ck = Checkpoint(
            CHECKPOINT_VERSION, cfg.shape, char_vocab, word_vocab, params, metadata
        )
        filename = f"epoch_{epoch:03d}.json"
        save_checkpoint(ck, out_dir / filename)
        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            dev_error=dev_report.error,
            dev_macro_f1=dev_report.macro_f1,
            dev_pos_f1=dev_report.hate.f1,
            checkpoint_file=filename,
            train_accuracy=train_accuracy,
        )
        history.append(record)
        emit(
            f"epoch {epoch}/{cfg.max_epochs}: train_loss={train_loss:.4f} "
            f"dev_error={dev_report.error:.4f} dev_macro_f1={dev_report.macro_f1:.4f}"
        )
    best_idx = _select_best(history, cfg.selection_metric)
    best_rec = history[best_idx]
    best = load_checkpoint(out_dir / best_rec.checkpoint_file)
    emit(
        f"best epoch: {best_rec.epoch} "
        f"(dev_error={best_rec.dev_error:.4f}, dev_macro_f1={best_rec.dev_macro_f1:.4f})"
    )
    return best, history
