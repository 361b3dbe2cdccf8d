"""Two-level hierarchical ConvNet over documents.

A shared sentence network (wide convolution, k-max pooling, tanh, possibly
several such layers) turns each sentence's word-embedding matrix into a
fixed-length sentence embedding.  The sentence embeddings, stacked as
columns, form a document matrix that a second network reduces to a document
embedding, which a softmax head classifies.  Everything, embeddings
included, trains jointly by backpropagation with minibatch Adagrad.

The sentence network weights are tied across sentences: the backward pass
sums per-sentence gradients into the shared banks and embedding columns.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .ops import (
    FilterBank,
    PoolSpec,
    PoolTrace,
    ShapeMismatchError,
    grad_check,
    kmax_backward,
    kmax_forward,
    softmax,
    softmax_xent,
    tanh_backward,
    tanh_forward,
    wide_conv_backward,
    wide_conv_forward,
)
from .text import PAD_ID, Corpus, Document

log = logging.getLogger(__name__)

EMBEDDING_INIT_SCALE = 0.1
ADAGRAD_EPS = 1e-6


class ConfigError(ValueError):
    """A model architecture description is internally inconsistent."""


class ModelFormatError(ValueError):
    """A model file is malformed, corrupt or has the wrong version."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, batch: int, norms: dict[str, float]):
        self.epoch = epoch
        self.batch = batch
        self.norms = norms
        detail = ", ".join(f"{name}={value:.3e}" for name, value in sorted(norms.items()))
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {detail}"
        )


# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    """One convolution + pooling + tanh stage: bank shape and pool rule."""

    maps: int
    width: int
    pool: PoolSpec

    def __post_init__(self):
        if self.maps < 1:
            raise ConfigError(f"feature map count must be >= 1, got {self.maps}")
        if self.width < 1:
            raise ConfigError(f"filter width must be >= 1, got {self.width}")


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of the whole network; parameter values live in ModelParams.

    ``document_layers`` may be empty, in which case the head consumes the
    sentence embedding directly and documents must be single sentences
    (the short-text configuration).
    """

    embedding_dim: int
    class_count: int
    sentence_layers: tuple[LayerSpec, ...]
    document_layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if self.embedding_dim < 1:
            raise ConfigError(f"embedding dim must be >= 1, got {self.embedding_dim}")
        if self.class_count < 2:
            raise ConfigError(f"class count must be >= 2, got {self.class_count}")
        if not self.sentence_layers:
            raise ConfigError("at least one sentence layer is required")
        for level, layers in (
            ("sentence", self.sentence_layers),
            ("document", self.document_layers),
        ):
            if layers and layers[-1].pool.mode != "fixed":
                raise ConfigError(
                    f"the final {level} layer must use fixed-mode pooling so the "
                    f"level's output width is constant"
                )

    @property
    def sentence_embedding_dim(self) -> int:
        last = self.sentence_layers[-1]
        return last.maps * last.pool.k_top

    @property
    def document_embedding_dim(self) -> int:
        if not self.document_layers:
            return self.sentence_embedding_dim
        last = self.document_layers[-1]
        return last.maps * last.pool.k_top

    def level_depths(self, level: str) -> list[int]:
        """Input row count of each layer of a level, in order."""
        layers = self.sentence_layers if level == "sentence" else self.document_layers
        start = self.embedding_dim if level == "sentence" else self.sentence_embedding_dim
        depths = []
        for layer in layers:
            depths.append(start)
            start = layer.maps
        return depths

    def describe(self) -> dict:
        """JSON-ready architecture description used by the model file header."""

        def level(layers):
            return [
                {
                    "maps": l.maps,
                    "width": l.width,
                    "pool": {"mode": l.pool.mode, "k_top": l.pool.k_top, "fraction": l.pool.fraction},
                }
                for l in layers
            ]

        return {
            "embedding_dim": self.embedding_dim,
            "class_count": self.class_count,
            "sentence_layers": level(self.sentence_layers),
            "document_layers": level(self.document_layers),
        }

    @classmethod
    def from_description(cls, desc: dict) -> "ModelConfig":
        def level(entries):
            return tuple(
                LayerSpec(
                    maps=int(e["maps"]),
                    width=int(e["width"]),
                    pool=PoolSpec(
                        mode=e["pool"]["mode"],
                        k_top=int(e["pool"]["k_top"]),
                        fraction=float(e["pool"]["fraction"]),
                    ),
                )
                for e in entries
            )

        return cls(
            embedding_dim=int(desc["embedding_dim"]),
            class_count=int(desc["class_count"]),
            sentence_layers=level(desc["sentence_layers"]),
            document_layers=level(desc["document_layers"]),
        )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    """Word embeddings, one column per vocabulary id.  Column 0 (PAD) stays
    zero and is excluded from regularisation and updates."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeMismatchError(f"embedding table must be 2-d, got {self.weights.shape}")

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[1]


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: EmbeddingTable
    sentence_banks: list[FilterBank]
    document_banks: list[FilterBank]
    head_weights: np.ndarray
    head_bias: np.ndarray
    vocab_hash: str = ""

    def __post_init__(self):
        self.head_weights = np.asarray(self.head_weights, dtype=np.float64)
        self.head_bias = np.asarray(self.head_bias, dtype=np.float64)
        validate_params(self)


def expected_bank_shapes(config: ModelConfig, level: str) -> list[tuple[int, int, int]]:
    layers = config.sentence_layers if level == "sentence" else config.document_layers
    return [
        (depth, layer.width, layer.maps)
        for depth, layer in zip(config.level_depths(level), layers)
    ]


def validate_params(params: ModelParams) -> None:
    """Check every parameter block against the architecture chain."""
    config = params.config
    if params.embedding.dim != config.embedding_dim:
        raise ConfigError(
            f"embedding table has {params.embedding.dim} rows, "
            f"config says {config.embedding_dim}"
        )
    for level, banks in (
        ("sentence", params.sentence_banks),
        ("document", params.document_banks),
    ):
        expected = expected_bank_shapes(config, level)
        if len(banks) != len(expected):
            raise ConfigError(
                f"{level} level has {len(banks)} banks, config describes {len(expected)} layers"
            )
        for i, (bank, shape) in enumerate(zip(banks, expected)):
            if bank.weights.shape != shape:
                raise ConfigError(
                    f"{level} layer {i} bank has shape {bank.weights.shape}, "
                    f"expected {shape} from the architecture chain"
                )
    head_shape = (config.class_count, config.document_embedding_dim)
    if params.head_weights.shape != head_shape:
        raise ConfigError(
            f"head weights have shape {params.head_weights.shape}, expected {head_shape}"
        )
    if params.head_bias.shape != (config.class_count,):
        raise ConfigError(
            f"head bias has shape {params.head_bias.shape}, expected ({config.class_count},)"
        )


def init_params(
    config: ModelConfig, vocab_size: int, seed: int, vocab_hash: str = ""
) -> ModelParams:
    """Deterministic initialisation: banks uniform within the fan-based bound
    sqrt(6 / (depth * width + maps)), embeddings uniform(-0.1, 0.1) with the
    PAD column zeroed, biases zero.  Draw order is fixed (embedding, sentence
    banks, document banks, head) so a seed pins every value.
    """
    rng = np.random.default_rng(seed)
    embedding = rng.uniform(
        -EMBEDDING_INIT_SCALE, EMBEDDING_INIT_SCALE, (config.embedding_dim, vocab_size)
    )
    embedding[:, PAD_ID] = 0.0

    def draw_banks(level: str) -> list[FilterBank]:
        banks = []
        for depth, width, maps in expected_bank_shapes(config, level):
            bound = math.sqrt(6.0 / (depth * width + maps))
            banks.append(
                FilterBank(
                    weights=rng.uniform(-bound, bound, (depth, width, maps)),
                    bias=np.zeros(maps),
                )
            )
        return banks

    sentence_banks = draw_banks("sentence")
    document_banks = draw_banks("document")
    head_bound = math.sqrt(6.0 / (config.document_embedding_dim + config.class_count))
    head_weights = rng.uniform(
        -head_bound, head_bound, (config.class_count, config.document_embedding_dim)
    )
    return ModelParams(
        config=config,
        embedding=EmbeddingTable(weights=embedding),
        sentence_banks=sentence_banks,
        document_banks=document_banks,
        head_weights=head_weights,
        head_bias=np.zeros(config.class_count),
        vocab_hash=vocab_hash,
    )


def parameter_blocks(params: ModelParams) -> dict[str, np.ndarray]:
    """Every trainable array keyed by a stable name, in serialization order."""
    blocks: dict[str, np.ndarray] = {"embedding": params.embedding.weights}
    for level, banks in (("sentence", params.sentence_banks), ("document", params.document_banks)):
        for i, bank in enumerate(banks):
            blocks[f"{level}.{i}.weights"] = bank.weights
            blocks[f"{level}.{i}.bias"] = bank.bias
    blocks["head.weights"] = params.head_weights
    blocks["head.bias"] = params.head_bias
    return blocks


def is_weight_block(name: str) -> bool:
    """Weight blocks get L2 decay; bias blocks do not."""
    return name == "embedding" or name.endswith(".weights")


def clone_params(params: ModelParams) -> ModelParams:
    return ModelParams(
        config=params.config,
        embedding=EmbeddingTable(weights=params.embedding.weights.copy()),
        sentence_banks=[
            FilterBank(weights=b.weights.copy(), bias=b.bias.copy())
            for b in params.sentence_banks
        ],
        document_banks=[
            FilterBank(weights=b.weights.copy(), bias=b.bias.copy())
            for b in params.document_banks
        ],
        head_weights=params.head_weights.copy(),
        head_bias=params.head_bias.copy(),
        vocab_hash=params.vocab_hash,
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class LayerTrace:
    """Intermediates of one conv + pool + tanh stage needed by backward."""

    input: np.ndarray
    pool: PoolTrace
    output: np.ndarray


@dataclass
class DocForwardTrace:
    token_ids: list[np.ndarray]
    sentence_traces: list[list[LayerTrace]]
    sentence_matrices: list[np.ndarray]
    doc_matrix: np.ndarray
    document_traces: list[LayerTrace]
    doc_embedding: np.ndarray
    dropout_mask: np.ndarray | None
    logits: np.ndarray
    probabilities: np.ndarray


def build_sentence_matrix(sentence: list[int], embedding: EmbeddingTable) -> np.ndarray:
    """Column j is the embedding of token j."""
    ids = np.asarray(sentence, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("cannot embed an empty sentence")
    if ids.min() < 0 or ids.max() >= embedding.vocab_size:
        raise IndexError(
            f"token id out of range [0, {embedding.vocab_size}) in sentence {sentence}"
        )
    return embedding.weights[:, ids]


def _level_forward(
    matrix: np.ndarray, banks: list[FilterBank], layers: tuple[LayerSpec, ...]
) -> tuple[np.ndarray, list[LayerTrace]]:
    traces = []
    x = matrix
    for bank, layer in zip(banks, layers):
        conv = wide_conv_forward(x, bank)
        # Dynamic k resolves against the layer's input width, the logical
        # sequence length at this stage.
        pooled, pool_trace = kmax_forward(conv, layer.pool, x.shape[1])
        out = tanh_forward(pooled)
        traces.append(LayerTrace(input=x, pool=pool_trace, output=out))
        x = out
    return x, traces


def sentence_forward(
    matrix: np.ndarray, params: ModelParams
) -> tuple[np.ndarray, list[LayerTrace]]:
    """Embed one sentence matrix into a fixed-length vector.

    The final (maps, k) activation flattens row-major, feature map major,
    and that order is part of the serialized model contract.
    """
    out, traces = _level_forward(matrix, params.sentence_banks, params.config.sentence_layers)
    return out.reshape(-1), traces


def document_forward(
    doc_matrix: np.ndarray, params: ModelParams, dropout_mask: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[LayerTrace]]:
    """From stacked sentence embeddings to class probabilities.

    Returns (probabilities, logits, doc_embedding, traces).  The embedding
    returned is pre-dropout; the mask, when given, scales what the head sees.
    """
    config = params.config
    if config.document_layers:
        out, traces = _level_forward(doc_matrix, params.document_banks, config.document_layers)
        doc_embedding = out.reshape(-1)
    else:
        if doc_matrix.shape[1] != 1:
            raise ShapeMismatchError(
                f"a model without document layers handles single-sentence documents "
                f"only, got {doc_matrix.shape[1]} sentences"
            )
        doc_embedding = doc_matrix[:, 0]
        traces = []
    fed = doc_embedding if dropout_mask is None else doc_embedding * dropout_mask
    logits = params.head_weights @ fed + params.head_bias
    return softmax(logits), logits, doc_embedding, traces


def forward(
    document: Document, params: ModelParams, dropout_mask: np.ndarray | None = None
) -> DocForwardTrace:
    sentence_matrices = [
        build_sentence_matrix(s, params.embedding) for s in document.sentences
    ]
    embeddings = []
    sentence_traces = []
    for matrix in sentence_matrices:
        emb, traces = sentence_forward(matrix, params)
        embeddings.append(emb)
        sentence_traces.append(traces)
    doc_matrix = np.stack(embeddings, axis=1)
    probabilities, logits, doc_embedding, document_traces = document_forward(
        doc_matrix, params, dropout_mask
    )
    return DocForwardTrace(
        token_ids=[np.asarray(s, dtype=np.int64) for s in document.sentences],
        sentence_traces=sentence_traces,
        sentence_matrices=sentence_matrices,
        doc_matrix=doc_matrix,
        document_traces=document_traces,
        doc_embedding=doc_embedding,
        dropout_mask=dropout_mask,
        logits=logits,
        probabilities=probabilities,
    )


def predict(document: Document, params: ModelParams) -> tuple[int, np.ndarray]:
    trace = forward(document, params)
    return int(np.argmax(trace.probabilities)), trace.probabilities


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


@dataclass
class BackpropResult:
    loss: float
    grads: dict[str, np.ndarray]
    doc_matrix_grad: np.ndarray
    sentence_input_grads: list[np.ndarray]
    probabilities: np.ndarray


def _level_backward(
    grad_out: np.ndarray,
    traces: list[LayerTrace],
    banks: list[FilterBank],
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Walk one level's layers in reverse; returns (grad wrt level input,
    per-layer (grad_weights, grad_bias) in forward order)."""
    bank_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(traces)
    g = grad_out
    for i in range(len(traces) - 1, -1, -1):
        trace = traces[i]
        g = tanh_backward(g, trace.output)
        g = kmax_backward(g, trace.pool)
        g, grad_w, grad_b = wide_conv_backward(g, trace.input, banks[i])
        bank_grads[i] = (grad_w, grad_b)
    return g, bank_grads


def sentence_backward(
    grad_embedding: np.ndarray, traces: list[LayerTrace], params: ModelParams
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Backward through the shared sentence network for one sentence.

    ``grad_embedding`` is the loss gradient at this sentence's embedding
    vector; returns the gradient at the sentence's word-embedding matrix and
    this sentence's (unsummed) contribution to each bank's gradient.
    """
    last = params.config.sentence_layers[-1]
    g = grad_embedding.reshape(last.maps, last.pool.k_top)
    return _level_backward(g, traces, params.sentence_banks)


def backward(trace: DocForwardTrace, label: int, params: ModelParams) -> BackpropResult:
    """Exact cross-entropy gradients for every parameter block.

    Tied weights: each sentence's contribution is summed into the shared
    sentence banks and into the embedding columns of the words it contains.
    """
    config = params.config
    probs, loss, grad_logits = softmax_xent(trace.logits, label)

    fed = (
        trace.doc_embedding
        if trace.dropout_mask is None
        else trace.doc_embedding * trace.dropout_mask
    )
    grads: dict[str, np.ndarray] = {
        "head.weights": np.outer(grad_logits, fed),
        "head.bias": grad_logits,
    }
    grad_doc_embedding = params.head_weights.T @ grad_logits
    if trace.dropout_mask is not None:
        grad_doc_embedding = grad_doc_embedding * trace.dropout_mask

    if config.document_layers:
        last = config.document_layers[-1]
        g = grad_doc_embedding.reshape(last.maps, last.pool.k_top)
        doc_matrix_grad, doc_bank_grads = _level_backward(
            g, trace.document_traces, params.document_banks
        )
        for i, (gw, gb) in enumerate(doc_bank_grads):
            grads[f"document.{i}.weights"] = gw
            grads[f"document.{i}.bias"] = gb
    else:
        doc_matrix_grad = grad_doc_embedding[:, np.newaxis]

    sentence_grads = [
        (np.zeros_like(b.weights), np.zeros_like(b.bias)) for b in params.sentence_banks
    ]
    grad_embedding = np.zeros_like(params.embedding.weights)
    sentence_input_grads = []
    for s, (sentence, traces) in enumerate(
        zip(trace.sentence_matrices, trace.sentence_traces)
    ):
        grad_matrix, bank_grads = sentence_backward(doc_matrix_grad[:, s], traces, params)
        sentence_input_grads.append(grad_matrix)
        for i, (gw, gb) in enumerate(bank_grads):
            sentence_grads[i] = (sentence_grads[i][0] + gw, sentence_grads[i][1] + gb)
        # Accumulate per occurrence: a repeated word gathers every column.
        np.add.at(grad_embedding.T, trace.token_ids[s], grad_matrix.T)
    for i, (gw, gb) in enumerate(sentence_grads):
        grads[f"sentence.{i}.weights"] = gw
        grads[f"sentence.{i}.bias"] = gb
    grads["embedding"] = grad_embedding

    return BackpropResult(
        loss=loss,
        grads=grads,
        doc_matrix_grad=doc_matrix_grad,
        sentence_input_grads=sentence_input_grads,
        probabilities=probs,
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainOptions:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 0.05
    l2: float = 0.0
    dropout: float = 0.0
    validation_fraction: float = 0.1
    seed: int = 0
    stop_at_train_accuracy: float | None = None
    log_every: int = 1
    on_epoch: Callable[["EpochRecord"], None] | None = dataclasses.field(
        default=None, repr=False, compare=False
    )

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(
                f"validation fraction must lie in [0, 1), got {self.validation_fraction}"
            )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float | None
    validation_accuracy: float | None


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]
    best_epoch: int
    best_validation_accuracy: float | None


def adagrad_step(
    value: np.ndarray,
    grad: np.ndarray,
    accumulator: np.ndarray,
    learning_rate: float,
    eps: float = ADAGRAD_EPS,
) -> None:
    """One in-place Adagrad update; the accumulator gathers squared gradients."""
    accumulator += grad * grad
    value -= learning_rate * grad / (np.sqrt(accumulator) + eps)


def _param_norms(params: ModelParams) -> dict[str, float]:
    return {
        name: float(np.linalg.norm(block))
        for name, block in parameter_blocks(params).items()
    }


def train(corpus: Corpus, params: ModelParams, options: TrainOptions) -> TrainResult:
    """Minibatch Adagrad with L2 on weights (not biases, not the PAD column).

    A fixed seed makes the run bit-reproducible: the validation split, the
    per-epoch shuffle and the dropout masks all come from one generator, and
    batches reduce in document order.  The returned parameters are the
    best-validation snapshot (final parameters when there is no validation
    split).
    """
    labelled = [doc for doc in corpus.documents if doc.label is not None]
    if not labelled:
        raise ValueError("training requires labelled documents")
    rng = np.random.default_rng(options.seed)
    order = rng.permutation(len(labelled))
    val_count = int(round(options.validation_fraction * len(labelled)))
    val_docs = [labelled[i] for i in order[:val_count]]
    train_docs = [labelled[i] for i in order[val_count:]]
    if not train_docs:
        raise ValueError("validation fraction leaves no training documents")

    params = clone_params(params)
    blocks = parameter_blocks(params)
    accumulators = {name: np.zeros_like(block) for name, block in blocks.items()}
    doc_dim = params.config.document_embedding_dim

    history: list[EpochRecord] = []
    best = clone_params(params)
    best_epoch = 0
    best_val = -1.0
    for epoch in range(1, options.epochs + 1):
        epoch_order = rng.permutation(len(train_docs))
        total_loss = 0.0
        for batch_index, start in enumerate(range(0, len(epoch_order), options.batch_size)):
            batch = [train_docs[i] for i in epoch_order[start : start + options.batch_size]]
            batch_grads = {name: np.zeros_like(block) for name, block in blocks.items()}
            batch_loss = 0.0
            for doc in batch:
                mask = None
                if options.dropout > 0.0:
                    keep = 1.0 - options.dropout
                    mask = (rng.random(doc_dim) < keep) / keep
                trace = forward(doc, params, dropout_mask=mask)
                if not np.all(np.isfinite(trace.logits)):
                    raise TrainingDivergedError(epoch, batch_index, _param_norms(params))
                result = backward(trace, doc.label, params)
                batch_loss += result.loss
                for name, grad in result.grads.items():
                    batch_grads[name] += grad
            scale = 1.0 / len(batch)
            batch_loss *= scale
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, batch_index, _param_norms(params))
            for name, block in blocks.items():
                grad = batch_grads[name] * scale
                if options.l2 > 0.0 and is_weight_block(name):
                    grad = grad + options.l2 * block
                if name == "embedding":
                    grad[:, PAD_ID] = 0.0
                adagrad_step(block, grad, accumulators[name], options.learning_rate)
            total_loss += batch_loss * len(batch)
        train_loss = total_loss / len(train_docs)
        if not np.isfinite(train_loss):
            raise TrainingDivergedError(epoch, -1, _param_norms(params))

        train_accuracy = None
        if options.stop_at_train_accuracy is not None:
            train_accuracy = evaluate_documents(train_docs, params).accuracy
        val_accuracy = None
        if val_docs:
            val_accuracy = evaluate_documents(val_docs, params).accuracy
            if val_accuracy > best_val:
                best_val = val_accuracy
                best = clone_params(params)
                best_epoch = epoch
        history.append(EpochRecord(epoch, train_loss, train_accuracy, val_accuracy))
        if options.on_epoch is not None:
            options.on_epoch(history[-1])
        if epoch % options.log_every == 0:
            log.info(
                "epoch %d: train_loss=%.4f%s%s",
                epoch,
                train_loss,
                "" if train_accuracy is None else f" train_acc={train_accuracy:.4f}",
                "" if val_accuracy is None else f" val_acc={val_accuracy:.4f}",
            )
        if (
            options.stop_at_train_accuracy is not None
            and train_accuracy >= options.stop_at_train_accuracy
        ):
            break

    if not val_docs:
        best = params
        best_epoch = history[-1].epoch
    return TrainResult(
        params=best,
        history=history,
        best_epoch=best_epoch,
        best_validation_accuracy=None if not val_docs else best_val,
    )


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    confusion: np.ndarray


def evaluate_documents(documents: list[Document], params: ModelParams) -> EvalResult:
    classes = params.config.class_count
    confusion = np.zeros((classes, classes), dtype=np.int64)
    correct = 0
    for doc in documents:
        predicted, _ = predict(doc, params)
        confusion[doc.label, predicted] += 1
        correct += int(predicted == doc.label)
    total = len(documents)
    return EvalResult(
        accuracy=correct / total if total else 0.0,
        correct=correct,
        total=total,
        confusion=confusion,
    )


def evaluate(corpus: Corpus, params: ModelParams) -> EvalResult:
    labelled = [doc for doc in corpus.documents if doc.label is not None]
    if not labelled:
        raise ValueError("evaluation requires labelled documents")
    return evaluate_documents(labelled, params)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

MODEL_MAGIC = b"CDOCMDL\x00"
MODEL_VERSION = 1


def save_model(params: ModelParams, path: str | Path) -> None:
    """Versioned binary model file.

    Layout: magic, u32 version, u32 header length, canonical JSON header
    (architecture, vocabulary hash, block order and shapes), then each block
    as little-endian float64 in header order.  Canonical JSON keeps the
    save -> load -> save round trip byte-identical.
    """
    blocks = parameter_blocks(params)
    header = {
        "format_version": MODEL_VERSION,
        "architecture": params.config.describe(),
        "vocab_size": params.embedding.vocab_size,
        "vocab_hash": params.vocab_hash,
        "blocks": [
            {"name": name, "shape": list(block.shape)} for name, block in blocks.items()
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MODEL_MAGIC, struct.pack("<I", MODEL_VERSION), struct.pack("<I", len(header_bytes))]
    out.append(header_bytes)
    for block in blocks.values():
        out.append(np.ascontiguousarray(block, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_model(path: str | Path, expected_vocab_hash: str | None = None) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"expected model file {path}")
    data = path.read_bytes()
    if data[: len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError(f"{path} is not a model file (bad magic)")
    pos = len(MODEL_MAGIC)
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path} has format version {version}, expected {MODEL_VERSION}")
    (header_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        header = json.loads(data[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path} has a corrupt header: {exc}") from exc
    pos += header_len

    vocab_hash = header["vocab_hash"]
    if expected_vocab_hash is not None and vocab_hash != expected_vocab_hash:
        raise ModelFormatError(
            f"{path} was trained against vocabulary {vocab_hash[:12]}..., "
            f"refusing to pair it with vocabulary {expected_vocab_hash[:12]}..."
        )
    config = ModelConfig.from_description(header["architecture"])

    arrays = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > len(data):
            raise ModelFormatError(f"{path} truncated inside block {entry['name']!r}")
        arrays[entry["name"]] = (
            np.frombuffer(data[pos : pos + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        )
        pos += nbytes
    if pos != len(data):
        raise ModelFormatError(f"{path} has {len(data) - pos} trailing bytes")

    def take(name):
        if name not in arrays:
            raise ModelFormatError(f"{path} is missing parameter block {name!r}")
        return arrays[name]

    sentence_banks = [
        FilterBank(weights=take(f"sentence.{i}.weights"), bias=take(f"sentence.{i}.bias"))
        for i in range(len(config.sentence_layers))
    ]
    document_banks = [
        FilterBank(weights=take(f"document.{i}.weights"), bias=take(f"document.{i}.bias"))
        for i in range(len(config.document_layers))
    ]
    try:
        return ModelParams(
            config=config,
            embedding=EmbeddingTable(weights=take("embedding")),
            sentence_banks=sentence_banks,
            document_banks=document_banks,
            head_weights=take("head.weights"),
            head_bias=take("head.bias"),
            vocab_hash=vocab_hash,
        )
    except ConfigError as exc:
        raise ModelFormatError(f"{path} parameter blocks do not match its header: {exc}") from exc


# ---------------------------------------------------------------------------
# whole-model gradient checking
# ---------------------------------------------------------------------------


def full_gradient_check(
    params: ModelParams, document: Document, label: int, eps: float = 1e-5
) -> float:
    """Finite-difference check of the complete backward pass.

    Every parameter block is perturbed coordinate by coordinate; returns the
    worst relative error across all blocks.
    """
    worst = 0.0
    block_names = list(parameter_blocks(params).keys())
    for name in block_names:
        def fn(block_value, _name=name):
            trial = clone_params(params)
            trial_blocks = parameter_blocks(trial)
            trial_blocks[_name][...] = block_value
            trace = forward(document, trial)
            result = backward(trace, label, trial)
            return result.loss, result.grads[_name]

        worst = max(worst, grad_check(fn, parameter_blocks(params)[name], eps=eps))
    return worst
