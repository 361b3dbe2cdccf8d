"""Corpus ingestion: HTML stripping, sentence splitting, tokenisation,
vocabulary construction and the binary corpus cache.

The preprocessing rules are deliberately simple and fully deterministic:
tags become single spaces, a small fixed entity table is decoded, sentences
split after runs of ``.?!`` followed by whitespace, tokens are lowercased
words (apostrophes kept inside), decimals, or single punctuation marks.
Numbers map to NUMBER, non-``.?!`` symbols to SYMBOL, and rare words to
UNKNOWN.  Reserved tokens are uppercase so they can never collide with the
lowercased text tokens.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

PAD_TOKEN = "PAD"
UNKNOWN_TOKEN = "UNKNOWN"
NUMBER_TOKEN = "NUMBER"
SYMBOL_TOKEN = "SYMBOL"
RESERVED_TOKENS = (PAD_TOKEN, UNKNOWN_TOKEN, NUMBER_TOKEN, SYMBOL_TOKEN)
PAD_ID = 0
UNKNOWN_ID = 1

SENTENCE_TERMINATORS = (".", "?", "!")


class EmptyDocumentError(ValueError):
    """A document reduced to zero sentences during preprocessing."""


class EmptyCorpusError(ValueError):
    """No usable documents or tokens where at least one is required."""


class MissingDataError(FileNotFoundError):
    """A dataset path does not exist."""


class CorpusFormatError(ValueError):
    """A corpus cache file is malformed, corrupt or has the wrong version."""


# ---------------------------------------------------------------------------
# raw text handling
# ---------------------------------------------------------------------------

_TAG_RE = re.compile(r"<[^>]*>")
_NUMERIC_ENTITY_RE = re.compile(r"&#(\d+);")
_NAMED_ENTITIES = (("&lt;", "<"), ("&gt;", ">"), ("&quot;", '"'), ("&amp;", "&"))

_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.?!])\s+")

# Decimals first so "3.5" stays whole, then words (apostrophes allowed
# inside), then any single non-space character.
_TOKEN_RE = re.compile(r"\d+\.\d+|\w+(?:'\w+)*|\S")

_NUMBER_RE = re.compile(r"[+-]?\d+(?:\.\d+)?\Z")


def _decode_numeric_entity(match: re.Match) -> str:
    code = int(match.group(1))
    return chr(code) if code < 0x110000 else match.group(0)


def strip_html(raw: str) -> str:
    """Replace tag spans with single spaces and decode the fixed entity table.

    An unterminated tag at the end of input is left as literal text.
    ``&amp;`` is decoded last so already-plain text passes through unchanged.
    """
    text = _TAG_RE.sub(" ", raw)
    text = _NUMERIC_ENTITY_RE.sub(_decode_numeric_entity, text)
    for entity, char in _NAMED_ENTITIES:
        text = text.replace(entity, char)
    return text


def split_sentences(text: str) -> list[str]:
    """Split after maximal runs of ``.?!`` followed by whitespace.

    A trailing fragment without a terminator becomes the final sentence;
    empty sentences are dropped.
    """
    return [part.strip() for part in _SENTENCE_SPLIT_RE.split(text) if part.strip()]


def tokenize(sentence: str) -> list[str]:
    """Lowercase and split into word, decimal-number and punctuation tokens."""
    return _TOKEN_RE.findall(sentence.lower())


def normalize_token(token: str) -> str:
    """Map numbers to NUMBER and symbols outside ``.?!`` to SYMBOL."""
    if token in SENTENCE_TERMINATORS:
        return token
    if _NUMBER_RE.match(token):
        return NUMBER_TOKEN
    if token and not any(ch.isalnum() for ch in token):
        return SYMBOL_TOKEN
    return token


def preprocess_text(raw: str) -> list[list[str]]:
    """Full pipeline from raw text to normalised tokens, one list per sentence."""
    sentences = []
    for sentence in split_sentences(strip_html(raw)):
        tokens = [normalize_token(t) for t in tokenize(sentence)]
        if tokens:
            sentences.append(tokens)
    return sentences


# ---------------------------------------------------------------------------
# vocabulary and documents
# ---------------------------------------------------------------------------


@dataclass
class Vocabulary:
    """Bijection between retained tokens and contiguous ids.

    Ids 0..3 are the reserved PAD/UNKNOWN/NUMBER/SYMBOL tokens; everything
    else occurred at least ``min_count`` times in the training split.
    """

    id_to_token: list[str]
    min_count: int = 1
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.id_to_token[: len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise ValueError(f"vocabulary must start with the reserved tokens {RESERVED_TOKENS}")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNKNOWN_ID)

    def decode_id(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    @property
    def content_hash(self) -> str:
        """SHA-256 over the token list in id order; pins model/corpus pairing."""
        return hashlib.sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()

    @classmethod
    def empty(cls) -> "Vocabulary":
        return cls(id_to_token=list(RESERVED_TOKENS), min_count=1)


def build_vocabulary(
    tokenized_documents: Iterable[Sequence[Sequence[str]]], min_count: int = 5
) -> Vocabulary:
    """Count normalised tokens over the training split and freeze the survivors.

    Tokens seen fewer than ``min_count`` times encode to UNKNOWN.  Retained
    tokens are ordered by descending count, ties alphabetically, after the
    reserved block.
    """
    counts: Counter[str] = Counter()
    for doc in tokenized_documents:
        for sentence in doc:
            counts.update(sentence)
    if not counts:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    retained = sorted(
        (t for t, c in counts.items() if c >= min_count and t not in RESERVED_TOKENS),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(id_to_token=list(RESERVED_TOKENS) + retained, min_count=min_count)


@dataclass
class Document:
    """Sentence-segmented token ids plus an optional class label."""

    sentences: list[list[int]]
    label: int | None = None
    source_id: str = ""

    @property
    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)


@dataclass
class Corpus:
    documents: list[Document]
    vocabulary: Vocabulary
    class_count: int
    split: str = "train"

    def __post_init__(self):
        for doc in self.documents:
            if doc.label is not None and not 0 <= doc.label < self.class_count:
                raise ValueError(
                    f"document {doc.source_id!r} has label {doc.label} "
                    f"outside {self.class_count} classes"
                )

    def __len__(self) -> int:
        return len(self.documents)


def encode_document(
    raw_text: str, label: int | None, vocab: Vocabulary, source_id: str = ""
) -> Document:
    """Preprocess and encode one raw text; rejects documents that end up empty."""
    if not raw_text or not raw_text.strip():
        raise EmptyDocumentError(f"document {source_id!r} is empty")
    sentences = [
        [vocab.encode_token(t) for t in tokens] for tokens in preprocess_text(raw_text)
    ]
    if not sentences:
        raise EmptyDocumentError(
            f"document {source_id!r} reduced to zero sentences after preprocessing"
        )
    return Document(sentences=sentences, label=label, source_id=source_id)


# ---------------------------------------------------------------------------
# dataset loaders
# ---------------------------------------------------------------------------


def _encode_all(
    texts: list[tuple[str, int | None, str]], vocab: Vocabulary, split: str, class_count: int
) -> Corpus:
    documents = []
    rejected = 0
    for raw, label, source_id in texts:
        try:
            documents.append(encode_document(raw, label, vocab, source_id))
        except EmptyDocumentError:
            rejected += 1
            log.warning("skipping empty document %s", source_id)
    if rejected:
        log.warning("%d documents rejected as empty", rejected)
    return Corpus(documents=documents, vocabulary=vocab, class_count=class_count, split=split)


def load_imdb(
    root: str | Path,
    split: str,
    vocab: Vocabulary | None = None,
    min_count: int = 5,
) -> Corpus:
    """Load the pos/neg directory layout ``<root>/<split>/{pos,neg}/*.txt``.

    Labels come from the directory: neg=0, pos=1.  When ``vocab`` is None a
    vocabulary is built from this split (intended for the training split
    only; test text must be encoded with the training vocabulary).
    """
    root = Path(root)
    texts: list[tuple[str, int | None, str]] = []
    for label, name in ((0, "neg"), (1, "pos")):
        directory = root / split / name
        if not directory.is_dir():
            raise MissingDataError(f"expected dataset directory {directory}")
        for path in sorted(directory.glob("*.txt")):
            texts.append((path.read_text(encoding="utf-8"), label, f"{split}/{name}/{path.name}"))
    if not texts:
        log.warning("no review files found under %s/%s", root, split)
        vocab = vocab or Vocabulary.empty()
    elif vocab is None:
        vocab = build_vocabulary(
            (preprocess_text(raw) for raw, _, _ in texts), min_count=min_count
        )
    corpus = _encode_all(texts, vocab, split, class_count=2)
    balance = Counter(doc.label for doc in corpus.documents)
    log.info(
        "loaded %d %s documents (balance %s), vocabulary %d tokens",
        len(corpus), split, dict(sorted(balance.items())), len(vocab),
    )
    return corpus


def parse_label_map(spec: str) -> dict[str, int]:
    """Parse a remapping table like ``0:0,4:1`` (raw label -> class index)."""
    mapping = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        raw, _, target = part.partition(":")
        if not target:
            raise ValueError(f"label map entry {part!r} is not of the form raw:class")
        mapping[raw.strip()] = int(target)
    return mapping


def load_labelled_csv(
    path: str | Path,
    text_column: int | str,
    label_column: int | str,
    *,
    delimiter: str = ",",
    has_header: bool = True,
    label_map: dict[str, int] | None = None,
    vocab: Vocabulary | None = None,
    min_count: int = 5,
    single_sentence: bool = True,
    split: str = "train",
    encoding: str = "utf-8",
    max_skipped_fraction: float = 0.01,
) -> Corpus:
    """Load a delimited file of labelled texts, one document per row.

    Tweets and similar short texts ingest as single-sentence documents by
    default; pass ``single_sentence=False`` to run the sentence splitter.
    Malformed rows are skipped and counted; more than
    ``max_skipped_fraction`` of them fails the load.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(f"expected CSV file {path}")
    with path.open(newline="", encoding=encoding, errors="replace") as handle:
        reader = csv.reader(handle, delimiter=delimiter)
        rows = list(reader)
    if has_header:
        if not rows:
            raise EmptyCorpusError(f"{path} is empty")
        header, rows = rows[0], rows[1:]
        text_idx = header.index(text_column) if isinstance(text_column, str) and text_column in header else int(text_column)
        label_idx = header.index(label_column) if isinstance(label_column, str) and label_column in header else int(label_column)
    else:
        text_idx, label_idx = int(text_column), int(label_column)
    if not rows:
        raise EmptyCorpusError(f"{path} contains no data rows")

    texts: list[tuple[str, int | None, str]] = []
    skipped = 0
    for i, row in enumerate(rows):
        try:
            raw, raw_label = row[text_idx], row[label_idx].strip()
            label = label_map[raw_label] if label_map is not None else int(raw_label)
            if not raw.strip():
                raise ValueError("empty text")
        except (IndexError, KeyError, ValueError):
            skipped += 1
            continue
        texts.append((raw, label, f"{path.name}:{i}"))
    if skipped > max_skipped_fraction * len(rows):
        raise CorpusFormatError(
            f"{skipped} of {len(rows)} rows malformed in {path}, above the "
            f"{max_skipped_fraction:.0%} limit"
        )
    if skipped:
        log.warning("skipped %d malformed rows in %s", skipped, path)
    if not texts:
        raise EmptyCorpusError(f"no usable rows in {path}")

    if label_map is not None:
        class_count = max(label_map.values()) + 1
    else:
        class_count = max(label for _, label, _ in texts) + 1

    def row_tokens(raw: str) -> list[list[str]]:
        if single_sentence:
            tokens = [normalize_token(t) for t in tokenize(strip_html(raw))]
            return [tokens] if tokens else []
        return preprocess_text(raw)

    if vocab is None:
        vocab = build_vocabulary((row_tokens(raw) for raw, _, _ in texts), min_count=min_count)

    documents = []
    rejected = 0
    for raw, label, source_id in texts:
        sentences = [[vocab.encode_token(t) for t in toks] for toks in row_tokens(raw)]
        if not sentences:
            rejected += 1
            continue
        documents.append(Document(sentences=sentences, label=label, source_id=source_id))
    if rejected:
        log.warning("%d rows rejected as empty after preprocessing", rejected)
    corpus = Corpus(documents=documents, vocabulary=vocab, class_count=class_count, split=split)
    log.info("loaded %d documents from %s", len(corpus), path)
    return corpus


# ---------------------------------------------------------------------------
# binary corpus cache
# ---------------------------------------------------------------------------

CORPUS_MAGIC = b"CDOCCRP\x00"
CORPUS_VERSION = 1


def _write_str(out: list[bytes], value: str):
    data = value.encode("utf-8")
    out.append(struct.pack("<I", len(data)))
    out.append(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise CorpusFormatError("corpus cache truncated")
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write the versioned binary cache: vocabulary in id order, then documents.

    All counts are little-endian; the header carries the format version and
    the vocabulary hash so stale caches are detected on load.
    """
    out: list[bytes] = [CORPUS_MAGIC, struct.pack("<I", CORPUS_VERSION)]
    out.append(bytes.fromhex(corpus.vocabulary.content_hash))
    out.append(struct.pack("<I", corpus.class_count))
    _write_str(out, corpus.split)
    out.append(struct.pack("<I", corpus.vocabulary.min_count))
    out.append(struct.pack("<I", len(corpus.vocabulary)))
    for token in corpus.vocabulary.id_to_token:
        _write_str(out, token)
    out.append(struct.pack("<I", len(corpus.documents)))
    for doc in corpus.documents:
        _write_str(out, doc.source_id)
        out.append(struct.pack("<i", -1 if doc.label is None else doc.label))
        out.append(struct.pack("<I", len(doc.sentences)))
        for sentence in doc.sentences:
            out.append(struct.pack("<I", len(sentence)))
            out.append(struct.pack(f"<{len(sentence)}I", *sentence))
    Path(path).write_bytes(b"".join(out))


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(f"expected corpus cache {path}")
    reader = _Reader(path.read_bytes())
    if reader.take(len(CORPUS_MAGIC)) != CORPUS_MAGIC:
        raise CorpusFormatError(f"{path} is not a corpus cache (bad magic)")
    version = reader.u32()
    if version != CORPUS_VERSION:
        raise CorpusFormatError(
            f"{path} has cache version {version}, expected {CORPUS_VERSION}"
        )
    stored_hash = reader.take(32).hex()
    class_count = reader.u32()
    split = reader.string()
    min_count = reader.u32()
    vocab_size = reader.u32()
    tokens = [reader.string() for _ in range(vocab_size)]
    vocab = Vocabulary(id_to_token=tokens, min_count=min_count)
    if vocab.content_hash != stored_hash:
        raise CorpusFormatError(f"{path} vocabulary hash mismatch; cache is corrupt")
    doc_count = reader.u32()
    documents = []
    for _ in range(doc_count):
        source_id = reader.string()
        label = reader.i32()
        sentence_count = reader.u32()
        sentences = []
        for _ in range(sentence_count):
            length = reader.u32()
            ids = list(struct.unpack(f"<{length}I", reader.take(4 * length)))
            sentences.append(ids)
        documents.append(
            Document(sentences=sentences, label=None if label < 0 else label, source_id=source_id)
        )
    if reader.pos != len(reader.data):
        raise CorpusFormatError(f"{path} has {len(reader.data) - reader.pos} trailing bytes")
    return Corpus(documents=documents, vocabulary=vocab, class_count=class_count, split=split)
