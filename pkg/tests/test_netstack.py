from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

import charcomp.netstack as netstack
from charcomp.corpus import Example
from charcomp.netstack import (
    FrozenModel,
    GruLayerParams,
    ModelShape,
    _inverted_dropout_mask,
    backward,
    backward_batch,
    classify,
    encode_sentence,
    encode_word,
    encode_words,
    eval_probs,
    example_loss,
    flatten_params,
    frozen_classify,
    frozen_eval_probs,
    frozen_word_representations,
    gradient_check,
    gru_step,
    init_params,
    run_stack,
    set_params_flat,
)
from charcomp.numkernel import Rng

SMALL = ModelShape(char_emb_dim=3, hidden=4, layers_per_stack=2, dropout_rate=0.0)


def small_model(seed=0, n_chars=5, shape=SMALL):
    return init_params(shape, n_chars, Rng(seed))


def random_example(rng, n_chars=5, max_words=3, max_chars=4, label=None):
    n_words = 1 + rng.randbelow(max_words)
    char_ids = tuple(
        tuple(rng.randbelow(n_chars + 1) for _ in range(1 + rng.randbelow(max_chars)))
        for _ in range(n_words)
    )
    return Example(
        words=tuple(f"w{i}" for i in range(n_words)),
        char_ids=char_ids,
        label=rng.randbelow(2) if label is None else label,
    )


class TestModelShape:
    def test_defaults(self):
        s = ModelShape()
        assert (s.char_emb_dim, s.hidden, s.layers_per_stack) == (25, 60, 2)
        assert s.word_repr_dim == s.sent_repr_dim == 120
        assert s.dropout_rate == 0.5

    def test_roundtrip(self):
        s = ModelShape(hidden=7, dropout_rate=0.25)
        assert ModelShape.from_dict(s.to_dict()) == s

    def test_validation(self):
        with pytest.raises(ValueError):
            ModelShape(hidden=0)
        with pytest.raises(ValueError):
            ModelShape(dropout_rate=1.0)
        with pytest.raises(ValueError):
            ModelShape(directions=1)
        with pytest.raises(ValueError):
            ModelShape.from_dict({**ModelShape().to_dict(), "word_repr_dim": 7})


class TestGruStep:
    def zero_params(self, in_dim=3, hidden=4):
        return GruLayerParams(
            np.zeros((3 * hidden, in_dim)), np.zeros((3 * hidden, hidden)), np.zeros(3 * hidden)
        )

    def test_zero_params_halve_state(self):
        # hand evaluation: z = sigmoid(0) = 0.5, cand = tanh(0) = 0,
        # h = (1 - 0.5) h_prev + 0.5 * 0 = 0.5 h_prev
        p = self.zero_params()
        h_prev = np.array([1.0, -2.0, 0.5, 4.0])
        out = gru_step(p, h_prev, np.array([1.0, 2.0, 3.0]))
        assert np.array_equal(out, 0.5 * h_prev)

    def test_zero_everything(self):
        p = self.zero_params()
        assert np.array_equal(gru_step(p, np.zeros(4), np.zeros(3)), np.zeros(4))

    def test_boundedness(self):
        rng = Rng(3)
        for trial in range(50):
            hidden, in_dim = 1 + rng.randbelow(6), 1 + rng.randbelow(6)
            p = GruLayerParams(
                rng.uniform(-3, 3, size=(3 * hidden, in_dim)),
                rng.uniform(-3, 3, size=(3 * hidden, hidden)),
                rng.uniform(-3, 3, size=3 * hidden),
            )
            h_prev = rng.uniform(-5, 5, size=hidden)
            out = gru_step(p, h_prev, rng.uniform(-5, 5, size=in_dim))
            assert np.all(np.abs(out) <= np.maximum(np.abs(h_prev), 1.0))

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="gru_step"):
            gru_step(self.zero_params(), np.zeros(5), np.zeros(3))


class TestEngineAgainstGruStep:
    def test_forward_states_match_stepwise(self):
        rng = Rng(9)
        m = small_model(seed=4, shape=ModelShape(char_emb_dim=3, hidden=4, layers_per_stack=1, dropout_rate=0.0))
        layer = m.char_stack.layers[0]
        seq = rng.uniform(-1, 1, size=(5, 3))
        reprs, trace = run_stack(m.char_stack, [seq])
        # forward direction, stepwise
        h = np.zeros(4)
        for t in range(5):
            h = gru_step(layer.fwd, h, seq[t])
        assert np.abs(reprs[0, :4] - h).max() < 1e-12
        # backward direction consumes the reversed sequence
        h = np.zeros(4)
        for t in range(4, -1, -1):
            h = gru_step(layer.bwd, h, seq[t])
        assert np.abs(reprs[0, 4:] - h).max() < 1e-12


class TestEncoding:
    def test_empty_word_is_zero(self):
        m = small_model()
        assert np.array_equal(encode_word(m, ()), np.zeros(8))

    def test_word_repr_dim_default_shape(self):
        m = init_params(ModelShape(), 4, Rng(1))
        assert encode_word(m, (1, 2)).shape == (120,)

    def test_empty_sentence_is_zero(self):
        m = small_model()
        assert np.array_equal(encode_sentence(m, []), np.zeros(8))

    def test_single_word_sentence_dim(self):
        m = small_model()
        w = encode_word(m, (1, 2, 3))
        assert encode_sentence(m, [w]).shape == (8,)

    def test_eval_deterministic_bitwise(self):
        m = small_model(seed=2)
        ex = random_example(Rng(5))
        a = classify(m, ex.char_ids)
        b = classify(m, ex.char_ids)
        assert np.array_equal(a, b)

    def test_order_sensitivity(self):
        # sampled experiment: "ab" vs "ba" must differ in >= 99 of 100 draws
        differing = 0
        for seed in range(100):
            m = small_model(seed=seed)
            if not np.array_equal(encode_word(m, (1, 2)), encode_word(m, (2, 1))):
                differing += 1
        assert differing >= 99

    def test_batched_encoding_matches_single(self):
        m = small_model(seed=6)
        words = [(1, 2, 3), (4,), (2, 2, 1, 3)]
        batch, _ = encode_words(m, words)
        for i, w in enumerate(words):
            assert np.abs(batch[i] - encode_word(m, w)).max() < 1e-12

    def test_char_index_out_of_range(self):
        m = small_model()
        with pytest.raises(ValueError, match="out of range"):
            encode_word(m, (99,))

    def test_invalid_mode(self):
        m = small_model()
        with pytest.raises(ValueError, match="mode"):
            encode_word(m, (1,), mode="predict")


class TestDropout:
    def test_inverted_mask_expectation(self):
        # 10,000 draws at rate 0.5; per-coordinate mean within 3% of eval value
        rng = Rng(123)
        activation = Rng(7).uniform(0.5, 1.5, size=120)
        total = np.zeros(120)
        n = 10_000
        for _ in range(n):
            total += _inverted_dropout_mask(rng, (120,), 0.5) * activation
        rel = np.abs(total / n - activation) / activation
        assert rel.max() < 0.03

    def test_train_mode_needs_rng(self):
        m = init_params(ModelShape(char_emb_dim=3, hidden=4, dropout_rate=0.5), 5, Rng(0))
        with pytest.raises(ValueError, match="rng"):
            encode_word(m, (1, 2), mode="train")

    def test_train_mode_stochastic_but_seeded(self):
        m = init_params(ModelShape(char_emb_dim=3, hidden=4, dropout_rate=0.5), 5, Rng(0))
        a = encode_word(m, (1, 2, 3), mode="train", rng=Rng(1))
        b = encode_word(m, (1, 2, 3), mode="train", rng=Rng(1))
        c = encode_word(m, (1, 2, 3), mode="train", rng=Rng(2))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestClassify:
    def test_probability_simplex(self):
        m = small_model(seed=3)
        ex = random_example(Rng(4))
        p = classify(m, ex.char_ids)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p > 0)

    def test_zero_head_uniform(self):
        m = small_model(seed=3)
        m.head_w[:] = 0.0
        m.head_b[:] = 0.0
        assert np.array_equal(classify(m, ((1, 2), (3,))), [0.5, 0.5])

    def test_compositional_equality_exact(self):
        from charcomp.numkernel import matvec, softmax

        m = small_model(seed=8)
        sentence = ((1, 2, 3), (4, 2), (3,))
        by_hand = softmax(
            matvec(m.head_w, encode_sentence(m, [encode_word(m, w) for w in sentence]))
            + m.head_b
        )
        assert np.array_equal(classify(m, sentence), by_hand)

    def test_concurrent_eval_equals_sequential(self):
        m = small_model(seed=11)
        ex = random_example(Rng(2))
        expected = classify(m, ex.char_ids)
        with ThreadPoolExecutor(max_workers=8) as pool:
            results = list(pool.map(lambda _: classify(m, ex.char_ids), range(16)))
        for r in results:
            assert np.array_equal(r, expected)


class TestFrozen:
    def make(self, seed=5):
        m = small_model(seed=seed)
        return m, FrozenModel(base=m, train_vocab=frozenset({"aa", "ab", "ba"}))

    def test_in_vocab_bitwise_equal_classify(self):
        m, f = self.make()
        words = ("aa", "ba")
        char_ids = ((1, 1), (2, 1))
        assert np.array_equal(frozen_classify(f, words, char_ids), classify(m, char_ids))

    def test_oov_word_gets_all_ones(self):
        _, f = self.make()
        reprs = frozen_word_representations(f, ("aa", "zzz"), ((1, 1), (0, 0, 0)))
        assert np.array_equal(reprs[1], np.ones(8))
        assert not np.array_equal(reprs[0], np.ones(8))

    def test_empty_vocab_all_ones(self):
        m = small_model()
        f = FrozenModel(base=m, train_vocab=frozenset())
        reprs = frozen_word_representations(f, ("a", "b"), ((1,), (2,)))
        for r in reprs:
            assert np.array_equal(r, np.ones(8))

    def test_oov_vector_validated(self):
        m = small_model()
        with pytest.raises(ValueError, match="ones"):
            FrozenModel(base=m, train_vocab=frozenset({"a"}), oov_vector=np.zeros(8))

    def test_batched_frozen_matches_frozen_classify(self):
        m, f = self.make(seed=9)
        sentences_words = [("aa", "zz"), ("ba",), ("qq", "aa", "ab")]
        sentences_ids = [((1, 1), (0, 0)), ((2, 1),), ((0,), (1, 1), (1, 2))]
        batch = frozen_eval_probs(f, sentences_words, sentences_ids)
        for i in range(3):
            single = frozen_classify(f, sentences_words[i], sentences_ids[i])
            assert np.abs(batch[i] - single).max() < 1e-12

    def test_batched_frozen_bitwise_equals_eval_probs_in_vocab(self):
        m, f = self.make(seed=10)
        sentences_ids = [((1, 1), (1, 2)), ((2, 1), (1, 1), (1, 2))]
        sentences_words = [("aa", "ab"), ("ba", "aa", "ab")]
        assert np.array_equal(
            frozen_eval_probs(f, sentences_words, sentences_ids),
            eval_probs(m, sentences_ids),
        )


class TestBackward:
    def test_softmax_ce_head_gradient(self):
        # with a zero head the prediction is uniform: p = [0.5, 0.5],
        # so d loss / d head_b = p - onehot(label) and nothing flows below
        m = small_model(seed=7)
        m.head_w[:] = 0.0
        m.head_b[:] = 0.0
        ex = Example(words=("w",), char_ids=((1, 2),), label=1)
        loss, g = backward(m, ex)
        assert abs(loss - np.log(2.0)) < 1e-15
        assert np.abs(g.head_b - [0.5, -0.5]).max() < 1e-15
        for name, a in g.named_arrays():
            if name not in ("head_b", "head_w"):
                assert np.all(a == 0.0), name

    def test_loss_nonnegative(self):
        rng = Rng(14)
        m = small_model(seed=15)
        for _ in range(20):
            ex = random_example(rng)
            assert example_loss(m, ex) >= 0.0

    def test_batch_equals_sum_of_singles(self):
        m = small_model(seed=16)
        rng = Rng(17)
        examples = [random_example(rng) for _ in range(6)]
        g_batch = m.zeros_like()
        losses, _ = backward_batch(m, examples, into=g_batch)
        g_single = m.zeros_like()
        for i, ex in enumerate(examples):
            loss, _ = backward(m, ex, into=g_single)
            assert abs(loss - losses[i]) < 1e-12
        for (_, a), (_, b) in zip(g_batch.named_arrays(), g_single.named_arrays()):
            assert np.abs(a - b).max() < 1e-12

    def test_into_accumulates(self):
        m = small_model(seed=18)
        ex = random_example(Rng(19))
        _, g1 = backward(m, ex)
        buf = m.zeros_like()
        backward(m, ex, into=buf)
        backward(m, ex, into=buf)
        for (_, a), (_, b) in zip(buf.named_arrays(), g1.named_arrays()):
            assert np.abs(a - 2.0 * b).max() < 1e-12

    def test_non_finite_loss_rejected(self):
        m = small_model(seed=20)
        m.head_w[:] = 0.0
        m.head_b[:] = np.array([800.0, -800.0])  # softmax underflows to p=0 for label 1
        ex = Example(words=("w",), char_ids=((1,),), label=1)
        with pytest.raises(ValueError, match="non-finite"):
            backward(m, ex)

    def test_bad_label_rejected(self):
        m = small_model()
        ex = Example(words=("w",), char_ids=((1,),), label=3)
        with pytest.raises(ValueError, match="label"):
            backward(m, ex)

    def test_empty_word_in_sentence(self):
        m = small_model(seed=21)
        ex = Example(words=("w", "v"), char_ids=((), (1, 2)), label=0)
        loss, g = backward(m, ex)
        assert np.isfinite(loss)

    def test_eval_probs_matches_classify(self):
        m = small_model(seed=22)
        rng = Rng(23)
        sentences = [random_example(rng).char_ids for _ in range(7)]
        batch = eval_probs(m, sentences, chunk_size=3)
        for i, s in enumerate(sentences):
            assert np.abs(batch[i] - classify(m, s)).max() < 1e-10


class TestGradientCheck:
    def test_all_groups_within_tolerance(self):
        groups = gradient_check(seed=0)
        assert groups, "gradient check produced no groups"
        for g in groups:
            assert g.max_rel_err < 1e-4, f"{g.name}: {g.max_rel_err}"

    def test_tiny_tolerance_unreachable(self):
        # O(h^2) truncation error alone exceeds 1e-12
        groups = gradient_check(seed=0, layer_counts=(1,))
        assert max(g.max_rel_err for g in groups) > 1e-12

    def test_detects_negated_bias_gradient(self, monkeypatch):
        real_backward = netstack.backward

        def sabotaged(m, example, rng=None, *, into=None):
            loss, g = real_backward(m, example, rng)
            for name, a in g.named_arrays():
                if name.endswith(".b"):
                    a *= -1.0
            if into is not None:
                for (_, dst), (_, src) in zip(into.named_arrays(), g.named_arrays()):
                    dst += src
                return loss, into
            return loss, g

        monkeypatch.setattr(netstack, "backward", sabotaged)
        groups = gradient_check(seed=0, layer_counts=(1,))
        bias = [g for g in groups if g.name.endswith(".b")]
        clean = [g for g in groups if not g.name.endswith(".b")]
        assert any(g.max_rel_err > 1e-4 for g in bias)
        assert all(g.max_rel_err < 1e-4 for g in clean)

    def test_flatten_roundtrip(self):
        m = small_model(seed=24)
        flat = flatten_params(m)
        m2 = m.zeros_like()
        set_params_flat(m2, flat)
        for (_, a), (_, b) in zip(m.named_arrays(), m2.named_arrays()):
            assert np.array_equal(a, b)
        with pytest.raises(ValueError):
            set_params_flat(m2, flat[:-1])
