"""TF-IDF weighted Naive Bayes over unigrams, and the summary-quality
harness built on it.

The harness trains the classifier on full training documents, then measures
how well it classifies test documents reduced to extractive summaries: a
summary that keeps the sentiment-bearing sentences loses little accuracy.
Each budget row reports accuracy on saliency-chosen summaries, the mean
accuracy over seeded random summaries, and the margin between the two.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .model import ModelParams
from .saliency import (
    Budget,
    first_last_summary,
    random_summary,
    saliency_map,
    summarize,
)
from .text import Corpus, Document

log = logging.getLogger(__name__)

DEFAULT_TABLE_BUDGETS: tuple[tuple[str, Budget], ...] = (
    ("100%", Budget("proportion", 1.0)),
    ("50%", Budget("proportion", 0.5)),
    ("33%", Budget("proportion", 0.33)),
    ("25%", Budget("proportion", 0.25)),
    ("20%", Budget("proportion", 0.2)),
    ("Pick 2", Budget("fixed", 2)),
    ("Pick 3", Budget("fixed", 3)),
    ("Pick 4", Budget("fixed", 4)),
    ("Pick 5", Budget("fixed", 5)),
)


@dataclass
class TfIdfModel:
    """Document frequencies frozen from the training split."""

    vocab_size: int
    doc_count: int
    doc_frequency: np.ndarray
    idf: np.ndarray

    def __post_init__(self):
        if np.any(self.doc_frequency > self.doc_count):
            raise ValueError("a token cannot appear in more documents than exist")


def fit_tfidf(corpus: Corpus) -> TfIdfModel:
    """Count document frequencies and fix idf = ln((1+N)/(1+df)) + 1.

    The +1 terms keep idf finite and positive even for tokens present in
    every training document.
    """
    if not corpus.documents:
        raise ValueError("cannot fit tf-idf on an empty corpus")
    vocab_size = len(corpus.vocabulary)
    df = np.zeros(vocab_size, dtype=np.int64)
    for doc in corpus.documents:
        seen = {t for sentence in doc.sentences for t in sentence}
        df[list(seen)] += 1
    n = len(corpus.documents)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    return TfIdfModel(vocab_size=vocab_size, doc_count=n, doc_frequency=df, idf=idf)


def transform(
    model: TfIdfModel, document: Document, sentence_indices: tuple[int, ...] | None = None
) -> dict[int, float]:
    """Sparse feature vector {token id: tf * idf} for a document or the
    subset of its sentences named by ``sentence_indices``."""
    sentences = (
        document.sentences
        if sentence_indices is None
        else [document.sentences[i] for i in sentence_indices]
    )
    counts: dict[int, int] = {}
    for sentence in sentences:
        for token in sentence:
            counts[token] = counts.get(token, 0) + 1
    return {
        t: count * model.idf[t]
        for t, count in counts.items()
        if 0 <= t < model.vocab_size and model.doc_frequency[t] > 0
    }


@dataclass
class NaiveBayesModel:
    """Multinomial NB over fractional tf-idf mass."""

    log_priors: np.ndarray
    log_likelihoods: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.log_priors)):
            raise ValueError("log priors contain non-finite values")
        if not np.all(np.isfinite(self.log_likelihoods)):
            raise ValueError("log likelihoods contain non-finite values")
        total = np.exp(self.log_priors).sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"priors sum to {total}, expected 1")

    @property
    def class_count(self) -> int:
        return self.log_priors.size


def train_nb(
    features: list[dict[int, float]],
    labels: list[int],
    class_count: int,
    vocab_size: int,
    alpha: float = 1.0,
) -> NaiveBayesModel:
    """Laplace-smoothed multinomial fit on per-class summed feature mass."""
    if len(features) != len(labels):
        raise ValueError(f"{len(features)} feature vectors but {len(labels)} labels")
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    doc_counts = np.zeros(class_count, dtype=np.int64)
    mass = np.zeros((class_count, vocab_size))
    for vector, label in zip(features, labels):
        if not 0 <= label < class_count:
            raise ValueError(f"label {label} outside {class_count} classes")
        doc_counts[label] += 1
        for token, value in vector.items():
            mass[label, token] += value
    missing = np.nonzero(doc_counts == 0)[0]
    if missing.size:
        raise ValueError(f"classes {missing.tolist()} have no training documents")
    log_priors = np.log(doc_counts / doc_counts.sum())
    smoothed = mass + alpha
    log_likelihoods = np.log(smoothed / smoothed.sum(axis=1, keepdims=True))
    return NaiveBayesModel(log_priors=log_priors, log_likelihoods=log_likelihoods)


def nb_log_scores(model: NaiveBayesModel, features: dict[int, float]) -> np.ndarray:
    scores = model.log_priors.copy()
    for token, value in features.items():
        scores += value * model.log_likelihoods[:, token]
    return scores


def classify(model: NaiveBayesModel, features: dict[int, float]) -> int:
    """Highest posterior class; an empty vector falls back to the priors."""
    return int(np.argmax(nb_log_scores(model, features)))


def fit_nb_on_corpus(corpus: Corpus, alpha: float = 1.0) -> tuple[TfIdfModel, NaiveBayesModel]:
    tfidf = fit_tfidf(corpus)
    labelled = [doc for doc in corpus.documents if doc.label is not None]
    if not labelled:
        raise ValueError("Naive Bayes training requires labelled documents")
    features = [transform(tfidf, doc) for doc in labelled]
    labels = [doc.label for doc in labelled]
    nb = train_nb(features, labels, corpus.class_count, len(corpus.vocabulary), alpha)
    return tfidf, nb


def nb_accuracy(
    tfidf: TfIdfModel,
    nb: NaiveBayesModel,
    documents: list[Document],
    selections: list[tuple[int, ...]] | None = None,
) -> float:
    """Accuracy on documents, optionally restricted to selected sentences."""
    if not documents:
        raise ValueError("cannot evaluate on zero documents")
    correct = 0
    for i, doc in enumerate(documents):
        indices = None if selections is None else selections[i]
        predicted = classify(nb, transform(tfidf, doc, indices))
        correct += int(predicted == doc.label)
    return correct / len(documents)


# ---------------------------------------------------------------------------
# the budget table
# ---------------------------------------------------------------------------


@dataclass
class BudgetRow:
    label: str
    summary_accuracy: float
    random_accuracy_mean: float | None
    margin: float | None


@dataclass
class SummaryEvaluation:
    rows: list[BudgetRow]
    first_last_accuracy: float
    full_accuracy: float
    random_seeds: tuple[int, ...]


def run_summary_evaluation(
    params: ModelParams,
    train_corpus: Corpus,
    test_corpus: Corpus,
    budgets: tuple[tuple[str, Budget], ...] = DEFAULT_TABLE_BUDGETS,
    seeds: tuple[int, ...] = (0, 1, 2),
    alpha: float = 1.0,
    sentence_mode: str = "dot",
) -> SummaryEvaluation:
    """Accuracy of an NB classifier on extractive summaries of the test set.

    Sentence scores are computed once per document and reused across
    budgets.  The random baseline averages over ``seeds`` (at least 3) with
    per-document derived seeds so documents are selected independently.
    """
    if len(seeds) < 3:
        raise ValueError(f"random baseline needs at least 3 seeds, got {seeds}")
    tfidf, nb = fit_nb_on_corpus(train_corpus, alpha=alpha)
    documents = [doc for doc in test_corpus.documents if doc.label is not None]
    if not documents:
        raise ValueError("evaluation requires labelled test documents")

    log.info("scoring sentences of %d test documents", len(documents))
    scores = [saliency_map(doc, params, sentence_mode).sentence_scores for doc in documents]

    full_accuracy = nb_accuracy(tfidf, nb, documents)
    rows = []
    for label, budget in budgets:
        chosen = [summarize(s, budget).indices for s in scores]
        summary_acc = nb_accuracy(tfidf, nb, documents, chosen)
        random_accs = []
        for seed in seeds:
            picks = [
                random_summary(len(doc.sentences), budget, seed=seed * 100003 + i).indices
                for i, doc in enumerate(documents)
            ]
            random_accs.append(nb_accuracy(tfidf, nb, documents, picks))
        random_mean = float(np.mean(random_accs))
        rows.append(
            BudgetRow(
                label=label,
                summary_accuracy=summary_acc,
                random_accuracy_mean=random_mean,
                margin=summary_acc - random_mean,
            )
        )
        log.info(
            "budget %s: summary=%.4f random=%.4f margin=%+.4f",
            label, summary_acc, random_mean, summary_acc - random_mean,
        )

    first_last = [first_last_summary(len(doc.sentences)).indices for doc in documents]
    first_last_accuracy = nb_accuracy(tfidf, nb, documents, first_last)
    return SummaryEvaluation(
        rows=rows,
        first_last_accuracy=first_last_accuracy,
        full_accuracy=full_accuracy,
        random_seeds=tuple(seeds),
    )


def format_table(result: SummaryEvaluation) -> str:
    """Aligned text rendering of the budget table."""
    header = f"{'Budget':<12} {'Summary':>9} {'Random':>9} {'Margin':>9}"
    lines = [header, "-" * len(header)]
    for row in result.rows:
        lines.append(
            f"{row.label:<12} {100 * row.summary_accuracy:>8.2f}% "
            f"{100 * row.random_accuracy_mean:>8.2f}% "
            f"{100 * row.margin:>+8.2f}%"
        )
    lines.append(f"{'First/last':<12} {100 * result.first_last_accuracy:>8.2f}%")
    lines.append(f"{'Full text':<12} {100 * result.full_accuracy:>8.2f}%")
    lines.append(f"random seeds: {list(result.random_seeds)}")
    return "\n".join(lines)


def table_to_json(result: SummaryEvaluation) -> str:
    record = {
        "rows": [
            {
                "budget": row.label,
                "summary_acc": row.summary_accuracy,
                "random_acc_mean": row.random_accuracy_mean,
                "random_seeds": list(result.random_seeds),
                "margin": row.margin,
            }
            for row in result.rows
        ],
        "first_last_acc": result.first_last_accuracy,
        "full_acc": result.full_accuracy,
    }
    return json.dumps(record, sort_keys=True, indent=2)
