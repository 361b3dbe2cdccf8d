"""Gradient saliency and extractive summarization.

Which inputs matter to a trained classifier?  Flip its own prediction into
a pseudo-label, backpropagate that loss, and read importance off the input
gradients: a word's score is the norm of the gradient at its embedding
columns, a sentence's score is the (absolute) inner product of the gradient
at its embedding with the embedding itself.  Summaries keep the highest
scoring sentences under a budget, in original document order; random and
first/last selections provide the baselines.
"""

from __future__ import annotations

import html as html_lib
import json
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, backward, forward
from .ops import ceil_fraction
from .text import Document, Vocabulary

SENTENCE_SCORE_MODES = ("dot", "elementwise")
RENDER_FORMATS = ("ansi", "html", "json")


@dataclass(frozen=True)
class PseudoLabel:
    """The inverted prediction used as the saliency loss target."""

    label: int
    predicted: int
    probabilities: np.ndarray

    def __post_init__(self):
        if self.label == self.predicted:
            raise ValueError("pseudo-label must differ from the predicted class")


def make_pseudo_label(probabilities: np.ndarray) -> PseudoLabel:
    """Invert a prediction: binary flips to the other class, multi-class
    takes the least probable class (never the predicted one)."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if p.size < 2:
        raise ValueError(f"need at least 2 classes to invert a prediction, got {p.size}")
    predicted = int(np.argmax(p))
    if p.size == 2:
        label = 1 - predicted
    else:
        masked = p.copy()
        masked[predicted] = np.inf
        label = int(np.argmin(masked))
    return PseudoLabel(label=label, predicted=predicted, probabilities=p)


@dataclass
class SaliencyMap:
    """Per-word and per-sentence importance, aligned 1:1 with the document."""

    word_scores: list[np.ndarray]
    sentence_scores: np.ndarray
    pseudo_label: PseudoLabel

    def __post_init__(self):
        if not np.all(np.isfinite(self.sentence_scores)):
            raise ValueError("sentence scores contain non-finite values")
        if np.any(self.sentence_scores < 0):
            raise ValueError("sentence scores must be nonnegative")
        for scores in self.word_scores:
            if not np.all(np.isfinite(scores)) or np.any(scores < 0):
                raise ValueError("word scores must be finite and nonnegative")


def saliency_map(
    document: Document, params: ModelParams, sentence_mode: str = "dot"
) -> SaliencyMap:
    """Both score kinds from a single backward pass at the pseudo-label.

    ``sentence_mode`` picks between the inner product |g . e| ("dot") and
    the elementwise sum |g * e| ("elementwise") of the gradient g at a
    sentence embedding e.  Inference mode: no dropout.
    """
    if sentence_mode not in SENTENCE_SCORE_MODES:
        raise ValueError(
            f"sentence_mode must be one of {SENTENCE_SCORE_MODES}, got {sentence_mode!r}"
        )
    trace = forward(document, params)
    pseudo = make_pseudo_label(trace.probabilities)
    result = backward(trace, pseudo.label, params)

    word_scores = [
        np.linalg.norm(grad, axis=0) for grad in result.sentence_input_grads
    ]
    g, e = result.doc_matrix_grad, trace.doc_matrix
    if sentence_mode == "dot":
        sentence_scores = np.abs(np.sum(g * e, axis=0))
    else:
        sentence_scores = np.sum(np.abs(g * e), axis=0)
    return SaliencyMap(
        word_scores=word_scores, sentence_scores=sentence_scores, pseudo_label=pseudo
    )


def word_saliency(document: Document, params: ModelParams) -> list[np.ndarray]:
    return saliency_map(document, params).word_scores


def sentence_saliency(
    document: Document, params: ModelParams, sentence_mode: str = "dot"
) -> np.ndarray:
    return saliency_map(document, params, sentence_mode).sentence_scores


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Budget:
    """Either a proportion of the document or a fixed sentence count.

    A proportion p keeps max(1, ceil(p * n)) sentences; a fixed budget m
    keeps min(m, n).
    """

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("proportion", "fixed"):
            raise ValueError(f"budget kind must be 'proportion' or 'fixed', got {self.kind!r}")
        if self.kind == "proportion" and not 0.0 < self.value <= 1.0:
            raise ValueError(f"proportion budget must lie in (0, 1], got {self.value}")
        if self.kind == "fixed" and (self.value < 1 or self.value != int(self.value)):
            raise ValueError(f"fixed budget must be a positive integer, got {self.value}")

    def size_for(self, sentence_count: int) -> int:
        if sentence_count < 1:
            raise ValueError(f"sentence count must be >= 1, got {sentence_count}")
        if self.kind == "proportion":
            return max(1, ceil_fraction(self.value, sentence_count))
        return min(int(self.value), sentence_count)


@dataclass(frozen=True)
class Summary:
    """Selected sentence indices in original document order."""

    indices: tuple[int, ...]
    budget: Budget
    method: str

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError(f"summary indices must be strictly increasing, got {self.indices}")
        if self.indices and self.indices[0] < 0:
            raise ValueError(f"summary indices must be nonnegative, got {self.indices}")


def summarize(sentence_scores: np.ndarray, budget: Budget) -> Summary:
    """Top-scoring sentences under the budget, ties to the lower index."""
    scores = np.asarray(sentence_scores, dtype=np.float64).reshape(-1)
    m = budget.size_for(scores.size)
    # Stable sort on negated scores leaves equal scores in index order.
    ranked = np.argsort(-scores, kind="stable")[:m]
    return Summary(indices=tuple(sorted(int(i) for i in ranked)), budget=budget, method="saliency")


def random_summary(sentence_count: int, budget: Budget, seed: int) -> Summary:
    """Uniform selection without replacement, restored to document order."""
    m = budget.size_for(sentence_count)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(sentence_count, size=m, replace=False)
    return Summary(indices=tuple(sorted(int(i) for i in chosen)), budget=budget, method="random")


def first_last_summary(sentence_count: int) -> Summary:
    """The first and last sentence (a single sentence when they coincide)."""
    if sentence_count < 1:
        raise ValueError(f"sentence count must be >= 1, got {sentence_count}")
    indices = (0,) if sentence_count == 1 else (0, sentence_count - 1)
    return Summary(indices=indices, budget=Budget("fixed", 2), method="first_last")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _normalized_word_scores(smap: SaliencyMap) -> list[np.ndarray]:
    peak = max((float(s.max()) for s in smap.word_scores if s.size), default=0.0)
    if peak <= 0.0:
        return [np.zeros_like(s) for s in smap.word_scores]
    return [s / peak for s in smap.word_scores]


def _decode(document: Document, vocab: Vocabulary) -> list[list[str]]:
    return [[vocab.decode_id(t) for t in sentence] for sentence in document.sentences]


def render_saliency(
    document: Document,
    vocab: Vocabulary,
    smap: SaliencyMap,
    summary: Summary,
    fmt: str,
) -> str:
    """Deterministic report in one of the formats of RENDER_FORMATS.

    html shades words by normalized score and boxes selected sentences;
    ansi uses terminal colours for the same; json emits the full structured
    record (schema: source_id, prediction, pseudo_label, sentences, words).
    """
    if fmt not in RENDER_FORMATS:
        raise ValueError(f"format must be one of {RENDER_FORMATS}, got {fmt!r}")
    if len(smap.sentence_scores) != len(document.sentences):
        raise ValueError(
            f"saliency map covers {len(smap.sentence_scores)} sentences, "
            f"document has {len(document.sentences)}"
        )
    selected = set(summary.indices)
    tokens = _decode(document, vocab)
    if fmt == "json":
        return _render_json(document, tokens, smap, selected)
    if fmt == "html":
        return _render_html(tokens, smap, selected)
    return _render_ansi(tokens, smap, selected)


def _render_json(
    document: Document,
    tokens: list[list[str]],
    smap: SaliencyMap,
    selected: set[int],
) -> str:
    pseudo = smap.pseudo_label
    record = {
        "source_id": document.source_id,
        "prediction": {
            "class": pseudo.predicted,
            "probabilities": [float(p) for p in pseudo.probabilities],
        },
        "pseudo_label": pseudo.label,
        "sentences": [
            {
                "index": i,
                "text": " ".join(sentence),
                "score": float(smap.sentence_scores[i]),
                "selected": i in selected,
            }
            for i, sentence in enumerate(tokens)
        ],
        "words": [
            {
                "sentence_index": i,
                "position": j,
                "token": token,
                "score": float(smap.word_scores[i][j]),
            }
            for i, sentence in enumerate(tokens)
            for j, token in enumerate(sentence)
        ],
    }
    return json.dumps(record, sort_keys=True, indent=2)


def _render_html(
    tokens: list[list[str]], smap: SaliencyMap, selected: set[int]
) -> str:
    shades = _normalized_word_scores(smap)
    parts = ["<div class=\"saliency\">"]
    for i, sentence in enumerate(tokens):
        cls = "sentence selected" if i in selected else "sentence"
        words = []
        for j, token in enumerate(sentence):
            alpha = float(shades[i][j])
            words.append(
                f'<span style="background: rgba(255,80,0,{alpha:.2f})">'
                f"{html_lib.escape(token)}</span>"
            )
        score = float(smap.sentence_scores[i])
        parts.append(f'<p class="{cls}" data-score="{score:.6g}">{" ".join(words)}</p>')
    parts.append("</div>")
    return "\n".join(parts)


def _render_ansi(
    tokens: list[list[str]], smap: SaliencyMap, selected: set[int]
) -> str:
    shades = _normalized_word_scores(smap)
    lines = []
    for i, sentence in enumerate(tokens):
        words = []
        for j, token in enumerate(sentence):
            alpha = float(shades[i][j])
            if alpha >= 0.75:
                words.append(f"\x1b[31m{token}\x1b[0m")
            elif alpha >= 0.4:
                words.append(f"\x1b[33m{token}\x1b[0m")
            else:
                words.append(token)
        marker = "*" if i in selected else " "
        lines.append(f"{marker} [{smap.sentence_scores[i]:.4f}] {' '.join(words)}")
    return "\n".join(lines)
