"""Model tests: architecture validation, forward against hand computation,
backward against finite differences, training behaviour, serialization."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from convdoc.model import (
    BackpropResult,
    ConfigError,
    EmbeddingTable,
    LayerSpec,
    ModelConfig,
    ModelFormatError,
    ModelParams,
    TrainingDivergedError,
    TrainOptions,
    adagrad_step,
    backward,
    build_sentence_matrix,
    clone_params,
    document_forward,
    evaluate,
    forward,
    full_gradient_check,
    init_params,
    is_weight_block,
    load_model,
    parameter_blocks,
    predict,
    save_model,
    sentence_backward,
    sentence_forward,
    train,
)
from convdoc.ops import FilterBank, PoolSpec, ShapeMismatchError
from convdoc.text import RESERVED_TOKENS, Corpus, Document, Vocabulary


def fixed(k):
    return PoolSpec(mode="fixed", k_top=k)


def toy_config(**overrides) -> ModelConfig:
    base = dict(
        embedding_dim=3,
        class_count=2,
        sentence_layers=(LayerSpec(maps=2, width=2, pool=fixed(2)),),
        document_layers=(LayerSpec(maps=2, width=1, pool=fixed(1)),),
    )
    base.update(overrides)
    return ModelConfig(**base)


def imdb_like_config() -> ModelConfig:
    return ModelConfig(
        embedding_dim=10,
        class_count=2,
        sentence_layers=(LayerSpec(maps=6, width=5, pool=fixed(4)),),
        document_layers=(LayerSpec(maps=15, width=5, pool=fixed(2)),),
    )


class TestModelConfig:
    def test_embedding_dims_chain(self):
        config = imdb_like_config()
        assert config.sentence_embedding_dim == 24
        assert config.document_embedding_dim == 30
        assert config.level_depths("sentence") == [10]
        assert config.level_depths("document") == [24]

    def test_two_layer_depth_chain(self):
        config = toy_config(
            sentence_layers=(
                LayerSpec(maps=4, width=3, pool=PoolSpec("dynamic", k_top=2, fraction=0.5)),
                LayerSpec(maps=5, width=2, pool=fixed(3)),
            )
        )
        assert config.level_depths("sentence") == [3, 4]
        assert config.sentence_embedding_dim == 15

    def test_final_layer_must_be_fixed(self):
        with pytest.raises(ConfigError, match="fixed"):
            toy_config(
                sentence_layers=(
                    LayerSpec(maps=2, width=2, pool=PoolSpec("dynamic", k_top=2, fraction=0.5)),
                )
            )

    def test_empty_sentence_level_rejected(self):
        with pytest.raises(ConfigError):
            toy_config(sentence_layers=())

    def test_empty_document_level_allowed(self):
        config = toy_config(document_layers=())
        assert config.document_embedding_dim == config.sentence_embedding_dim

    def test_class_count_bound(self):
        with pytest.raises(ConfigError):
            toy_config(class_count=1)

    def test_describe_round_trip(self):
        config = imdb_like_config()
        assert ModelConfig.from_description(config.describe()) == config


class TestInitParams:
    def test_deterministic_per_seed(self):
        config = toy_config()
        a = init_params(config, vocab_size=7, seed=3)
        b = init_params(config, vocab_size=7, seed=3)
        for name, block in parameter_blocks(a).items():
            assert_array_equal(block, parameter_blocks(b)[name])

    def test_seeds_differ(self):
        config = toy_config()
        a = init_params(config, vocab_size=7, seed=3)
        b = init_params(config, vocab_size=7, seed=4)
        assert not np.array_equal(a.embedding.weights, b.embedding.weights)

    def test_fan_based_bound(self):
        config = ModelConfig(
            embedding_dim=10,
            class_count=2,
            sentence_layers=(LayerSpec(maps=6, width=5, pool=fixed(4)),),
            document_layers=(),
        )
        params = init_params(config, vocab_size=50, seed=0)
        bound = math.sqrt(6.0 / (10 * 5 + 6))
        weights = params.sentence_banks[0].weights
        assert np.abs(weights).max() <= bound
        # 300 uniform draws all but surely come within 5% of the bound
        assert np.abs(weights).max() > 0.95 * bound

    def test_embedding_scale_and_pad_column(self):
        params = init_params(toy_config(), vocab_size=9, seed=1)
        assert np.abs(params.embedding.weights).max() <= 0.1
        assert_array_equal(params.embedding.weights[:, 0], np.zeros(3))

    def test_biases_zero(self):
        params = init_params(toy_config(), vocab_size=9, seed=1)
        assert_array_equal(params.sentence_banks[0].bias, np.zeros(2))
        assert_array_equal(params.head_bias, np.zeros(2))

    def test_mismatched_blocks_rejected(self):
        params = init_params(toy_config(), vocab_size=9, seed=1)
        with pytest.raises(ConfigError, match="sentence layer 0"):
            ModelParams(
                config=params.config,
                embedding=params.embedding,
                sentence_banks=[
                    FilterBank(weights=np.zeros((3, 9, 2)), bias=np.zeros(2))
                ],
                document_banks=params.document_banks,
                head_weights=params.head_weights,
                head_bias=params.head_bias,
            )


class TestBuildSentenceMatrix:
    def test_columns_are_embeddings(self):
        table = EmbeddingTable(weights=np.arange(8.0).reshape(2, 4))
        matrix = build_sentence_matrix([3, 1, 1], table)
        assert_array_equal(matrix, [[3.0, 1.0, 1.0], [7.0, 5.0, 5.0]])

    def test_out_of_range_id(self):
        table = EmbeddingTable(weights=np.zeros((2, 4)))
        with pytest.raises(IndexError):
            build_sentence_matrix([4], table)
        with pytest.raises(IndexError):
            build_sentence_matrix([-1], table)

    def test_empty_sentence_rejected(self):
        table = EmbeddingTable(weights=np.zeros((2, 4)))
        with pytest.raises(ValueError):
            build_sentence_matrix([], table)


class TestSentenceForward:
    def test_fixed_width_for_any_length(self):
        params = init_params(toy_config(), vocab_size=9, seed=2)
        for length in range(1, 11):
            matrix = build_sentence_matrix([1 + (i % 8) for i in range(length)], params.embedding)
            embedding, _ = sentence_forward(matrix, params)
            assert embedding.shape == (4,)

    def test_zero_parameters_give_zero_embedding(self):
        config = toy_config()
        params = init_params(config, vocab_size=9, seed=2)
        for bank in params.sentence_banks:
            bank.weights[...] = 0.0
        params.embedding.weights[...] = 0.0
        matrix = build_sentence_matrix([1, 2, 3], params.embedding)
        embedding, _ = sentence_forward(matrix, params)
        assert_array_equal(embedding, np.zeros(4))

    def test_short_sentence_pads_pool_slots(self):
        # One map, width 1, k=4: a 2-word sentence leaves slots 2 and 3 at
        # tanh(0) = 0 and slots 0 and 1 nonzero.
        config = toy_config(
            embedding_dim=1,
            sentence_layers=(LayerSpec(maps=1, width=1, pool=fixed(4)),),
            document_layers=(LayerSpec(maps=1, width=1, pool=fixed(1)),),
        )
        params = init_params(config, vocab_size=4, seed=0)
        params.embedding.weights[...] = [[0.0, 1.0, 2.0, 3.0]]
        params.sentence_banks[0].weights[...] = 1.0
        matrix = build_sentence_matrix([1, 2], params.embedding)
        embedding, _ = sentence_forward(matrix, params)
        assert_allclose(embedding, [math.tanh(1.0), math.tanh(2.0), 0.0, 0.0])

    def test_flattening_is_feature_map_major(self):
        # Two maps, k=2: embedding must read map0-slot0, map0-slot1, map1-...
        config = toy_config(
            embedding_dim=1,
            sentence_layers=(LayerSpec(maps=2, width=1, pool=fixed(2)),),
            document_layers=(),
        )
        params = init_params(config, vocab_size=3, seed=0)
        params.embedding.weights[...] = [[0.0, 1.0, 2.0]]
        params.sentence_banks[0].weights[...] = [[[1.0, 10.0]]]
        matrix = build_sentence_matrix([1, 2], params.embedding)
        embedding, _ = sentence_forward(matrix, params)
        expected = [math.tanh(1.0), math.tanh(2.0), math.tanh(10.0), math.tanh(20.0)]
        assert_allclose(embedding, expected)


def hand_model() -> ModelParams:
    """d=1 pipeline small enough to evaluate with a pocket calculator."""
    config = ModelConfig(
        embedding_dim=1,
        class_count=2,
        sentence_layers=(LayerSpec(maps=1, width=1, pool=fixed(1)),),
        document_layers=(LayerSpec(maps=1, width=1, pool=fixed(1)),),
    )
    return ModelParams(
        config=config,
        embedding=EmbeddingTable(weights=np.array([[0.0, 0.5, -0.25]])),
        sentence_banks=[FilterBank(weights=np.array([[[2.0]]]), bias=np.array([0.1]))],
        document_banks=[FilterBank(weights=np.array([[[1.5]]]), bias=np.array([-0.2]))],
        head_weights=np.array([[1.0], [-1.0]]),
        head_bias=np.array([0.05, -0.05]),
    )


class TestHandComputedForward:
    def test_two_sentence_document(self):
        params = hand_model()
        doc = Document(sentences=[[1, 2], [2]], label=0)
        trace = forward(doc, params)

        s1 = math.tanh(0.1 + 2.0 * 0.5)       # winner of [1.1, -0.4]
        s2 = math.tanh(0.1 + 2.0 * -0.25)
        assert_allclose(trace.doc_matrix, [[s1, s2]])

        pre = [-0.2 + 1.5 * s1, -0.2 + 1.5 * s2]
        doc_embedding = math.tanh(max(pre))
        assert_allclose(trace.doc_embedding, [doc_embedding])

        logits = [doc_embedding + 0.05, -doc_embedding - 0.05]
        assert_allclose(trace.logits, logits)
        exp = [math.exp(z - max(logits)) for z in logits]
        assert_allclose(trace.probabilities, np.array(exp) / sum(exp))

    def test_predict_matches_probabilities(self):
        params = hand_model()
        doc = Document(sentences=[[1, 2], [2]], label=0)
        predicted, probs = predict(doc, params)
        assert predicted == int(np.argmax(probs))
        assert predicted == 0


class TestForwardProperties:
    @given(permutation=st.permutations(list(range(4))))
    @settings(max_examples=20, deadline=None)
    def test_sentence_permutation_permutes_doc_columns(self, permutation):
        params = init_params(toy_config(), vocab_size=9, seed=5)
        sentences = [[1, 2], [3], [4, 5, 6], [7, 8]]
        base = forward(Document(sentences=sentences, label=0), params)
        shuffled = forward(
            Document(sentences=[sentences[i] for i in permutation], label=0), params
        )
        assert_allclose(shuffled.doc_matrix, base.doc_matrix[:, permutation])

    def test_single_sentence_document(self):
        params = init_params(toy_config(), vocab_size=9, seed=5)
        trace = forward(Document(sentences=[[1, 2, 3]], label=0), params)
        assert trace.doc_matrix.shape == (4, 1)
        assert trace.probabilities.shape == (2,)
        assert_allclose(trace.probabilities.sum(), 1.0)

    def test_imdb_like_doc_embedding_is_30(self):
        params = init_params(imdb_like_config(), vocab_size=20, seed=0)
        for sentence_count in (1, 5):
            doc = Document(sentences=[[1, 2, 3]] * sentence_count, label=0)
            trace = forward(doc, params)
            assert trace.doc_embedding.shape == (30,)

    def test_headless_document_level_requires_single_sentence(self):
        params = init_params(toy_config(document_layers=()), vocab_size=9, seed=5)
        single = forward(Document(sentences=[[1, 2]], label=0), params)
        assert_allclose(single.doc_embedding, single.doc_matrix[:, 0])
        with pytest.raises(ShapeMismatchError, match="single-sentence"):
            forward(Document(sentences=[[1], [2]], label=0), params)

    def test_dropout_mask_scales_head_input(self):
        params = init_params(toy_config(), vocab_size=9, seed=5)
        doc = Document(sentences=[[1, 2]], label=0)
        zero_mask = np.zeros(params.config.document_embedding_dim)
        trace = forward(doc, params, dropout_mask=zero_mask)
        assert_allclose(trace.logits, params.head_bias)


class TestBackward:
    def test_gradient_check_toy_configs(self):
        # Smoke-level: a couple of shapes here; the broad randomized sweep
        # lives in the acceptance suite.
        cases = [
            (toy_config(), [[1, 2, 3], [4, 5]]),
            (
                toy_config(
                    sentence_layers=(
                        LayerSpec(maps=3, width=2, pool=PoolSpec("dynamic", k_top=1, fraction=0.6)),
                        LayerSpec(maps=2, width=2, pool=fixed(2)),
                    ),
                ),
                [[1, 2, 3, 4], [5, 6]],
            ),
            (toy_config(document_layers=()), [[1, 2, 3]]),
        ]
        for config, sentences in cases:
            params = init_params(config, vocab_size=9, seed=7)
            doc = Document(sentences=sentences, label=1)
            assert full_gradient_check(params, doc, label=1) < 1e-4

    def test_loss_matches_probability(self):
        params = hand_model()
        doc = Document(sentences=[[1, 2], [2]], label=0)
        trace = forward(doc, params)
        result = backward(trace, 0, params)
        assert_allclose(result.loss, -math.log(trace.probabilities[0]))

    def test_tied_weights_sum_per_sentence_contributions(self):
        params = init_params(toy_config(), vocab_size=9, seed=11)
        doc = Document(sentences=[[1, 2, 3], [4, 5], [1, 2, 3]], label=1)
        trace = forward(doc, params)
        result = backward(trace, 1, params)
        total_w = np.zeros_like(params.sentence_banks[0].weights)
        total_b = np.zeros_like(params.sentence_banks[0].bias)
        for s in range(len(doc.sentences)):
            _, bank_grads = sentence_backward(
                result.doc_matrix_grad[:, s], trace.sentence_traces[s], params
            )
            total_w += bank_grads[0][0]
            total_b += bank_grads[0][1]
        assert_allclose(result.grads["sentence.0.weights"], total_w, atol=1e-12)
        assert_allclose(result.grads["sentence.0.bias"], total_b, atol=1e-12)

    def test_duplicate_sentence_contribution_doubles(self):
        # Same upstream gradient through the same trace adds linearly.
        params = init_params(toy_config(), vocab_size=9, seed=11)
        trace = forward(Document(sentences=[[1, 2, 3]], label=0), params)
        g = np.full(params.config.sentence_embedding_dim, 0.3)
        _, once = sentence_backward(g, trace.sentence_traces[0], params)
        _, doubled = sentence_backward(2.0 * g, trace.sentence_traces[0], params)
        assert_allclose(doubled[0][0], 2.0 * once[0][0], atol=1e-12)
        assert_allclose(doubled[0][1], 2.0 * once[0][1], atol=1e-12)

    def test_embedding_gradient_only_touches_present_words(self):
        params = init_params(toy_config(), vocab_size=9, seed=11)
        doc = Document(sentences=[[2, 5], [5]], label=0)
        trace = forward(doc, params)
        result = backward(trace, 0, params)
        grad = result.grads["embedding"]
        absent = [i for i in range(9) if i not in (2, 5)]
        assert_array_equal(grad[:, absent], np.zeros((3, len(absent))))

    def test_confident_correct_prediction_has_tiny_gradients(self):
        params = init_params(toy_config(), vocab_size=9, seed=11)
        params.head_weights[...] = 0.0
        params.head_bias[...] = [40.0, -40.0]
        trace = forward(Document(sentences=[[1, 2]], label=0), params)
        result = backward(trace, 0, params)
        assert result.loss < 1e-12
        for grad in result.grads.values():
            assert np.abs(grad).max() < 1e-12

    def test_zero_dropout_mask_blocks_everything_but_head_bias(self):
        params = init_params(toy_config(), vocab_size=9, seed=11)
        doc = Document(sentences=[[1, 2]], label=0)
        mask = np.zeros(params.config.document_embedding_dim)
        trace = forward(doc, params, dropout_mask=mask)
        result = backward(trace, 0, params)
        for name, grad in result.grads.items():
            if name == "head.bias":
                assert np.abs(grad).max() > 0
            else:
                assert_array_equal(grad, np.zeros_like(grad))


def separable_corpus(doc_count: int = 8, seed: int = 0) -> Corpus:
    """Class 1 documents contain token 4; class 0 documents contain token 5."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(id_to_token=list(RESERVED_TOKENS) + ["pos", "neg", "x", "y", "z"])
    docs = []
    for i in range(doc_count):
        label = i % 2
        marker = 4 if label == 1 else 5
        filler = rng.integers(6, 9, size=4).tolist()
        sentences = [[marker] + filler[:2], filler[2:]]
        docs.append(Document(sentences=sentences, label=label, source_id=str(i)))
    return Corpus(documents=docs, vocabulary=vocab, class_count=2)


class TestTraining:
    def test_zero_learning_rate_changes_nothing(self):
        corpus = separable_corpus()
        params = init_params(toy_config(), vocab_size=9, seed=1)
        before = {n: b.copy() for n, b in parameter_blocks(params).items()}
        result = train(
            corpus,
            params,
            TrainOptions(epochs=3, batch_size=4, learning_rate=0.0, validation_fraction=0.0),
        )
        for name, block in parameter_blocks(result.params).items():
            assert_array_equal(block, before[name])
        losses = [r.train_loss for r in result.history]
        assert losses[0] == pytest.approx(losses[-1])

    def test_overfits_separable_corpus(self):
        corpus = separable_corpus()
        params = init_params(toy_config(), vocab_size=9, seed=1)
        result = train(
            corpus,
            params,
            TrainOptions(
                epochs=60,
                batch_size=4,
                learning_rate=0.2,
                validation_fraction=0.0,
                stop_at_train_accuracy=1.0,
            ),
        )
        assert evaluate(corpus, result.params).accuracy == 1.0
        assert result.history[-1].train_accuracy == 1.0

    def test_bit_reproducible_runs(self):
        corpus = separable_corpus()
        options = TrainOptions(
            epochs=4, batch_size=4, learning_rate=0.1, l2=0.01, dropout=0.2, seed=9,
            validation_fraction=0.25,
        )
        first = train(corpus, init_params(toy_config(), 9, seed=1), options)
        second = train(corpus, init_params(toy_config(), 9, seed=1), options)
        for name, block in parameter_blocks(first.params).items():
            assert_array_equal(block, parameter_blocks(second.params)[name])

    def test_pad_column_never_moves(self):
        corpus = separable_corpus()
        # Force PAD into a document to prove updates skip it anyway.
        corpus.documents[0].sentences[0].append(0)
        params = init_params(toy_config(), vocab_size=9, seed=1)
        result = train(
            corpus, params,
            TrainOptions(epochs=3, batch_size=4, learning_rate=0.1, l2=0.01,
                         validation_fraction=0.0),
        )
        assert_array_equal(result.params.embedding.weights[:, 0], np.zeros(3))

    def test_l2_decay_shrinks_weights_monotonically(self):
        # Decay-only dynamics: zero data gradient, pure L2 pull toward zero.
        rng = np.random.default_rng(0)
        value = rng.normal(size=(4, 3))
        accumulator = np.zeros_like(value)
        l2 = 5.0
        norms = [np.linalg.norm(value)]
        for _ in range(6):
            adagrad_step(value, l2 * value, accumulator, learning_rate=0.01)
            norms.append(np.linalg.norm(value))
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_divergence_reports_diagnostics(self):
        corpus = separable_corpus()
        params = init_params(toy_config(), vocab_size=9, seed=1)
        with pytest.raises(TrainingDivergedError, match="parameter norms"):
            train(
                corpus, params,
                TrainOptions(epochs=3, batch_size=4, learning_rate=1e308,
                             validation_fraction=0.0),
            )

    def test_best_validation_snapshot_returned(self):
        corpus = separable_corpus(doc_count=16)
        params = init_params(toy_config(), vocab_size=9, seed=1)
        result = train(
            corpus, params,
            TrainOptions(epochs=8, batch_size=4, learning_rate=0.2, seed=3,
                         validation_fraction=0.25),
        )
        recorded = [r.validation_accuracy for r in result.history]
        assert result.best_validation_accuracy == max(recorded)
        assert recorded[result.best_epoch - 1] == result.best_validation_accuracy

    def test_unlabelled_corpus_rejected(self):
        vocab = Vocabulary(id_to_token=list(RESERVED_TOKENS) + ["w"])
        corpus = Corpus(
            documents=[Document(sentences=[[4]], label=None)],
            vocabulary=vocab, class_count=2,
        )
        with pytest.raises(ValueError, match="labelled"):
            train(corpus, init_params(toy_config(), 5, seed=0), TrainOptions(epochs=1))


class TestEvaluate:
    def test_confusion_and_accuracy(self):
        params = hand_model()
        vocab = Vocabulary(id_to_token=list(RESERVED_TOKENS))
        # hand_model predicts class 0 for this document
        docs = [
            Document(sentences=[[1, 2], [2]], label=0),
            Document(sentences=[[1, 2], [2]], label=1),
        ]
        corpus = Corpus(documents=docs, vocabulary=vocab, class_count=2)
        result = evaluate(corpus, params)
        assert result.accuracy == 0.5
        assert result.correct == 1
        assert_array_equal(result.confusion, [[1, 0], [1, 0]])
        assert result.confusion.sum() == result.total


class TestWeightBlockClassification:
    def test_weights_vs_biases(self):
        assert is_weight_block("embedding")
        assert is_weight_block("sentence.0.weights")
        assert is_weight_block("head.weights")
        assert not is_weight_block("sentence.0.bias")
        assert not is_weight_block("head.bias")


class TestSerialization:
    def test_round_trip_preserves_forward(self, tmp_path):
        params = init_params(imdb_like_config(), vocab_size=25, seed=13, vocab_hash="ab" * 32)
        path = tmp_path / "model.bin"
        save_model(params, path)
        loaded = load_model(path)
        doc = Document(sentences=[[1, 2, 3, 4], [5, 6]], label=0)
        assert_array_equal(forward(doc, params).probabilities, forward(doc, loaded).probabilities)
        assert loaded.vocab_hash == params.vocab_hash
        assert loaded.config == params.config

    def test_save_load_save_is_byte_identical(self, tmp_path):
        params = init_params(toy_config(), vocab_size=9, seed=13, vocab_hash="cd" * 32)
        first, second = tmp_path / "a.bin", tmp_path / "b.bin"
        save_model(params, first)
        save_model(load_model(first), second)
        assert first.read_bytes() == second.read_bytes()

    def test_vocab_hash_mismatch_refused(self, tmp_path):
        params = init_params(toy_config(), vocab_size=9, seed=13, vocab_hash="ab" * 32)
        path = tmp_path / "model.bin"
        save_model(params, path)
        load_model(path, expected_vocab_hash="ab" * 32)
        with pytest.raises(ModelFormatError, match="vocabulary"):
            load_model(path, expected_vocab_hash="ff" * 32)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.bin"
        path.write_bytes(b"JUNKJUNK" + b"\x00" * 32)
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(path)

    def test_wrong_version(self, tmp_path):
        params = init_params(toy_config(), vocab_size=9, seed=13)
        path = tmp_path / "model.bin"
        save_model(params, path)
        data = bytearray(path.read_bytes())
        data[8:12] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_truncation(self, tmp_path):
        params = init_params(toy_config(), vocab_size=9, seed=13)
        path = tmp_path / "model.bin"
        save_model(params, path)
        data = path.read_bytes()
        path.write_bytes(data[:-5])
        with pytest.raises(ModelFormatError, match="truncated"):
            load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_model(tmp_path / "nope.bin")
