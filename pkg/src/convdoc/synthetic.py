"""Synthetic corpora with known structure.

Two generators: a small linearly separable corpus (one marker word decides
the label) for overfit checks, and a planted-keyword corpus where the label
is carried entirely by a known subset of sentences, so summary quality can
be scored against ground truth.

The planted corpus plants exactly ceil(0.2 * n) polarity sentences per
n-sentence document, matching what a 20% proportion budget selects, so a
perfect summarizer can reach precision 1.0.

Planted sentences mix markers of both polarities, with the document's class
in the majority (2-3 own-class words against exactly 1 other-class word).
The mix keeps the task contrastive: no class is identifiable by the mere
absence of the other's markers, every planted sentence carries an extreme
response for any marker-sensitive feature, and the label is still fully
determined by which polarity dominates the planted sentences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import ceil_fraction
from .text import RESERVED_TOKENS, Corpus, Document, Vocabulary

POSITIVE_MARKERS = ("excellent", "wonderful", "superb", "delightful")
NEGATIVE_MARKERS = ("awful", "dreadful", "terrible", "horrid")
FILLER_WORDS = (
    "the", "plot", "moved", "along", "quickly", "camera", "panned", "across",
    "rooms", "actors", "spoke", "their", "lines", "scenes", "changed", "often",
    "music", "played", "softly", "credits",
)


def synthetic_vocabulary() -> Vocabulary:
    tokens = list(RESERVED_TOKENS) + list(POSITIVE_MARKERS + NEGATIVE_MARKERS + FILLER_WORDS)
    return Vocabulary(id_to_token=tokens, min_count=1)


def _id_ranges(vocab: Vocabulary) -> tuple[list[int], list[int], list[int]]:
    pos = [vocab.encode_token(t) for t in POSITIVE_MARKERS]
    neg = [vocab.encode_token(t) for t in NEGATIVE_MARKERS]
    fillers = [vocab.encode_token(t) for t in FILLER_WORDS]
    return pos, neg, fillers


def make_separable_corpus(doc_count: int = 32, seed: int = 0) -> Corpus:
    """Tiny corpus where one marker word fully determines the label."""
    vocab = synthetic_vocabulary()
    pos, neg, fillers = _id_ranges(vocab)
    rng = np.random.default_rng(seed)
    documents = []
    for i in range(doc_count):
        label = i % 2
        marker = int(rng.choice(pos if label == 1 else neg))
        sentences = [
            [marker] + rng.choice(fillers, size=3).tolist(),
            rng.choice(fillers, size=4).tolist(),
        ]
        documents.append(Document(sentences=sentences, label=label, source_id=f"sep-{i}"))
    return Corpus(documents=documents, vocabulary=vocab, class_count=2, split="train")


@dataclass
class PlantedCorpus:
    """Train/test pair plus the ground-truth planted sentence indices."""

    train: Corpus
    test: Corpus
    train_planted: list[tuple[int, ...]]
    test_planted: list[tuple[int, ...]]


def _planted_documents(
    doc_count: int, rng: np.random.Generator, vocab: Vocabulary, tag: str
) -> tuple[list[Document], list[tuple[int, ...]]]:
    pos, neg, fillers = _id_ranges(vocab)
    documents = []
    planted_indices = []
    for i in range(doc_count):
        label = i % 2
        own, other = (pos, neg) if label == 1 else (neg, pos)
        n = int(rng.integers(5, 11))
        planted_count = ceil_fraction(0.2, n)
        planted = sorted(rng.choice(n, size=planted_count, replace=False).tolist())
        sentences = []
        for s in range(n):
            length = int(rng.integers(4, 8))
            if s in planted:
                own_count = 2 if length == 4 else int(rng.integers(2, 4))
                tokens = (
                    rng.choice(own, size=own_count).tolist()
                    + [int(rng.choice(other))]
                    + rng.choice(fillers, size=length - own_count - 1).tolist()
                )
                sentence = [tokens[j] for j in rng.permutation(length)]
            else:
                sentence = rng.choice(fillers, size=length).tolist()
            sentences.append(sentence)
        documents.append(
            Document(sentences=sentences, label=label, source_id=f"{tag}-{i}")
        )
        planted_indices.append(tuple(planted))
    return documents, planted_indices


def make_planted_corpus(
    train_docs: int = 200, test_docs: int = 100, seed: int = 0
) -> PlantedCorpus:
    """Corpus whose labels live only in the planted sentences.

    Filler sentences draw from a label-independent word pool; each planted
    sentence carries a majority of the document's own polarity markers plus
    exactly one marker of the opposite polarity.
    """
    vocab = synthetic_vocabulary()
    rng = np.random.default_rng(seed)
    train_documents, train_planted = _planted_documents(train_docs, rng, vocab, "train")
    test_documents, test_planted = _planted_documents(test_docs, rng, vocab, "test")
    return PlantedCorpus(
        train=Corpus(documents=train_documents, vocabulary=vocab, class_count=2, split="train"),
        test=Corpus(documents=test_documents, vocabulary=vocab, class_count=2, split="test"),
        train_planted=train_planted,
        test_planted=test_planted,
    )


def summary_precision(selected: tuple[int, ...], planted: tuple[int, ...]) -> float:
    """Fraction of selected sentences that are planted ones."""
    if not selected:
        raise ValueError("cannot score an empty selection")
    hits = len(set(selected) & set(planted))
    return hits / len(selected)
