"""Compositional character-to-word-to-sentence GRU text classifier."""

from .corpus import (
    CharVocab,
    CorpusError,
    Example,
    RawRecord,
    WordVocab,
    build_vocabs,
    load_tsv,
    make_example,
    sentence_words,
    tokenize,
)
from .evalmetrics import Confusion, EvalReport, confusion, evaluate, macro_f1, prf1
from .netstack import (
    FrozenModel,
    ModelParams,
    ModelShape,
    backward,
    backward_batch,
    classify,
    encode_sentence,
    encode_word,
    eval_probs,
    frozen_classify,
    frozen_eval_probs,
    gradient_check,
    gru_step,
    init_params,
)
from .numkernel import Rng, finite_diff, init_uniform, matvec, softmax
from .robustness import NoisySuite, RobustnessCurve, make_suite, perturb_sentence, perturb_word, sweep
from .training import (
    Checkpoint,
    CheckpointError,
    EncoderBundle,
    TrainConfig,
    TrainingError,
    build_frozen,
    evaluate_model,
    export_encoder,
    init_with_transfer,
    load_checkpoint,
    load_encoder,
    save_checkpoint,
    save_encoder,
    train,
)

__version__ = "0.1.0"
