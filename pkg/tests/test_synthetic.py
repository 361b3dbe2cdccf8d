"""Checks that the generated corpora really have the structure the
experiments assume."""

import numpy as np
import pytest

from convdoc.ops import ceil_fraction
from convdoc.synthetic import (
    FILLER_WORDS,
    NEGATIVE_MARKERS,
    POSITIVE_MARKERS,
    make_planted_corpus,
    make_separable_corpus,
    summary_precision,
    synthetic_vocabulary,
)


def marker_ids(vocab):
    pos = {vocab.encode_token(t) for t in POSITIVE_MARKERS}
    neg = {vocab.encode_token(t) for t in NEGATIVE_MARKERS}
    return pos, neg


class TestSeparableCorpus:
    def test_shape_and_balance(self):
        corpus = make_separable_corpus(doc_count=32, seed=0)
        assert len(corpus) == 32
        labels = [doc.label for doc in corpus.documents]
        assert labels.count(0) == labels.count(1) == 16

    def test_marker_matches_label(self):
        corpus = make_separable_corpus(doc_count=32, seed=0)
        pos, neg = marker_ids(corpus.vocabulary)
        for doc in corpus.documents:
            tokens = {t for s in doc.sentences for t in s}
            own = pos if doc.label == 1 else neg
            other = neg if doc.label == 1 else pos
            assert tokens & own
            assert not tokens & other

    def test_deterministic(self):
        a = make_separable_corpus(doc_count=8, seed=5)
        b = make_separable_corpus(doc_count=8, seed=5)
        assert [d.sentences for d in a.documents] == [d.sentences for d in b.documents]


class TestPlantedCorpus:
    def test_counts(self):
        data = make_planted_corpus(train_docs=40, test_docs=10, seed=1)
        assert len(data.train) == 40
        assert len(data.test) == 10
        assert len(data.train_planted) == 40
        assert len(data.test_planted) == 10

    def test_planted_count_matches_twenty_percent_budget(self):
        data = make_planted_corpus(train_docs=40, test_docs=20, seed=1)
        for corpus, planted in (
            (data.train, data.train_planted),
            (data.test, data.test_planted),
        ):
            for doc, indices in zip(corpus.documents, planted):
                n = len(doc.sentences)
                assert 5 <= n <= 10
                assert len(indices) == ceil_fraction(0.2, n)

    def test_labels_live_only_in_planted_sentences(self):
        data = make_planted_corpus(train_docs=40, test_docs=20, seed=2)
        pos, neg = marker_ids(data.train.vocabulary)
        for corpus, planted in (
            (data.train, data.train_planted),
            (data.test, data.test_planted),
        ):
            for doc, indices in zip(corpus.documents, planted):
                own = pos if doc.label == 1 else neg
                other = neg if doc.label == 1 else pos
                for s, sentence in enumerate(doc.sentences):
                    own_count = len([t for t in sentence if t in own])
                    other_count = len([t for t in sentence if t in other])
                    if s in indices:
                        # Own polarity in the majority, one contrasting word.
                        assert 2 <= own_count <= 3
                        assert other_count == 1
                    else:
                        assert own_count == other_count == 0

    def test_label_recoverable_from_planted_majority(self):
        data = make_planted_corpus(train_docs=60, test_docs=10, seed=4)
        pos, neg = marker_ids(data.train.vocabulary)
        for doc, indices in zip(data.train.documents, data.train_planted):
            pos_count = sum(
                1 for s in indices for t in doc.sentences[s] if t in pos
            )
            neg_count = sum(
                1 for s in indices for t in doc.sentences[s] if t in neg
            )
            majority = int(pos_count > neg_count)
            assert majority == doc.label

    def test_vocabulary_shared_between_splits(self):
        data = make_planted_corpus(train_docs=4, test_docs=4, seed=0)
        assert data.train.vocabulary is data.test.vocabulary

    def test_deterministic(self):
        a = make_planted_corpus(train_docs=6, test_docs=6, seed=9)
        b = make_planted_corpus(train_docs=6, test_docs=6, seed=9)
        assert [d.sentences for d in a.train.documents] == [
            d.sentences for d in b.train.documents
        ]
        assert a.test_planted == b.test_planted

    def test_filler_pool_is_label_independent(self):
        # Every filler word appears in documents of both classes.
        data = make_planted_corpus(train_docs=100, test_docs=10, seed=3)
        vocab = data.train.vocabulary
        fillers = {vocab.encode_token(t) for t in FILLER_WORDS}
        seen = {0: set(), 1: set()}
        for doc in data.train.documents:
            tokens = {t for s in doc.sentences for t in s}
            seen[doc.label] |= tokens & fillers
        assert seen[0] == fillers
        assert seen[1] == fillers


class TestSummaryPrecision:
    def test_values(self):
        assert summary_precision((0, 3), (0, 3)) == 1.0
        assert summary_precision((0, 1), (0, 3)) == 0.5
        assert summary_precision((1, 2), (0, 3)) == 0.0
        assert summary_precision((2,), (2,)) == 1.0

    def test_empty_selection_rejected(self):
        with pytest.raises(ValueError):
            summary_precision((), (0,))


def test_vocabulary_contains_all_word_groups():
    vocab = synthetic_vocabulary()
    for word in POSITIVE_MARKERS + NEGATIVE_MARKERS + FILLER_WORDS:
        assert word in vocab
