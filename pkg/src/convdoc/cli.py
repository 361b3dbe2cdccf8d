"""Command-line entry point.

Subcommands: preprocess, train, eval, summarize, saliency, gradcheck,
nb-eval.  Exit codes: 0 success, 1 user or configuration error, 2 internal
failure.  Logs and progress heartbeats go to stderr; results go to files in
the run directory and to stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as cfg
from . import model as mdl
from . import nb, saliency, synthetic, text

log = logging.getLogger("convdoc")

RUN_ROOT_ENV = "CONVDOC_RUN_ROOT"
LOCK_NAME = ".lock"


class UserError(Exception):
    """A problem the user can fix: bad flags, bad config, missing files."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(f"{message}\n{self.format_usage()}".rstrip())


def build_parser() -> _Parser:
    parser = _Parser(prog="convdoc", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def with_config(p):
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--config", help="path to an INI run config")
        group.add_argument("--preset", help="name of a shipped preset",
                           choices=sorted(cfg.preset_configs()))
        return p

    with_config(sub.add_parser("preprocess", help="ingest the dataset and cache encoded corpora"))
    with_config(sub.add_parser("train", help="train a model into the run directory"))

    p = with_config(sub.add_parser("eval", help="accuracy and confusion on the test split"))
    p.add_argument("--model", help="model file (default: the run directory's model.bin)")

    for name, default_fmt, formats in (
        ("summarize", "text", ("text", "ansi", "html", "json")),
        ("saliency", "ansi", ("ansi", "html", "json")),
    ):
        p = sub.add_parser(name, help=f"{name} a raw text file with a trained model")
        p.add_argument("--model", required=True, help="trained model file")
        p.add_argument("--corpus", required=True,
                       help="corpus cache supplying the vocabulary (from preprocess)")
        p.add_argument("--input", required=True, help="raw UTF-8 text file")
        p.add_argument("--budget", default="0.2",
                       help="proportion like 0.2 or 20%%, or a fixed count like 3")
        p.add_argument("--format", default=default_fmt, choices=formats)
        p.add_argument("--output", help="write here instead of stdout")

    p = with_config(sub.add_parser("gradcheck", help="finite-difference check of the architecture"))
    p.add_argument("--trials", type=int, default=5, help="number of random documents")
    p.add_argument("--seed", type=int, default=0)

    p = with_config(sub.add_parser("nb-eval", help="summary-quality table on the test split"))
    p.add_argument("--model", help="model file (default: the run directory's model.bin)")
    return parser


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------


def load_run_config(args) -> cfg.RunConfig:
    if args.preset:
        return cfg.preset_configs()[args.preset]
    try:
        return cfg.load_config(args.config)
    except cfg.ConfigFileError as exc:
        raise UserError(str(exc)) from exc


def run_directory(config: cfg.RunConfig) -> Path:
    root = os.environ.get(RUN_ROOT_ENV) or config.output_root
    return Path(root) / config.name


@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise UserError(
            f"run directory {run_dir} is locked by another process; "
            f"remove {lock} if that run is dead"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def write_metrics(run_dir: Path, config: cfg.RunConfig, metrics: dict) -> dict:
    record = {
        "run_id": f"{config.name}-{cfg.config_hash(config)[:12]}",
        "config_hash": cfg.config_hash(config),
        "metrics": metrics,
    }
    (run_dir / "metrics.json").write_text(
        json.dumps(record, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    return record


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# corpus plumbing
# ---------------------------------------------------------------------------


def ingest(config: cfg.RunConfig) -> tuple[text.Corpus, text.Corpus | None]:
    """Load (train, test) corpora straight from the configured dataset."""
    ds = config.dataset
    try:
        if ds.kind == "synthetic":
            data = synthetic.make_planted_corpus(
                train_docs=ds.train_docs, test_docs=ds.test_docs, seed=ds.seed
            )
            return data.train, data.test
        if ds.kind == "imdb":
            if not ds.root:
                raise UserError("dataset kind imdb requires the root key")
            train = text.load_imdb(ds.root, "train", min_count=ds.min_count)
            test = text.load_imdb(ds.root, "test", vocab=train.vocabulary)
            return train, test
        label_map = text.parse_label_map(ds.label_map) if ds.label_map else None
        if not ds.csv_path:
            raise UserError("dataset kind csv requires the csv_path key")
        train = text.load_labelled_csv(
            ds.csv_path, ds.text_column, ds.label_column,
            delimiter=ds.delimiter, has_header=ds.has_header, label_map=label_map,
            min_count=ds.min_count, single_sentence=ds.single_sentence, split="train",
        )
        test = None
        if ds.test_csv_path:
            test = text.load_labelled_csv(
                ds.test_csv_path, ds.text_column, ds.label_column,
                delimiter=ds.delimiter, has_header=ds.has_header, label_map=label_map,
                vocab=train.vocabulary, single_sentence=ds.single_sentence, split="test",
            )
        return train, test
    except (text.MissingDataError, text.EmptyCorpusError, text.CorpusFormatError) as exc:
        raise UserError(str(exc)) from exc


def load_corpora(config: cfg.RunConfig, run_dir: Path) -> tuple[text.Corpus, text.Corpus | None]:
    """Prefer the preprocess caches in the run directory; fall back to raw."""
    train_cache = run_dir / "train.corpus"
    if train_cache.is_file():
        log.info("loading cached corpora from %s", run_dir)
        train = text.load_corpus(train_cache)
        test_cache = run_dir / "test.corpus"
        test = text.load_corpus(test_cache) if test_cache.is_file() else None
        return train, test
    return ingest(config)


def _load_vocab_from_cache(path: str) -> text.Vocabulary:
    try:
        return text.load_corpus(path).vocabulary
    except (text.MissingDataError, text.CorpusFormatError) as exc:
        raise UserError(str(exc)) from exc


def _load_model(path: str | Path) -> mdl.ModelParams:
    try:
        return mdl.load_model(path)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc
    except mdl.ModelFormatError as exc:
        raise UserError(str(exc)) from exc


def parse_budget(value: str) -> saliency.Budget:
    value = value.strip()
    try:
        if value.endswith("%"):
            return saliency.Budget("proportion", float(value[:-1]) / 100.0)
        if "." in value or "e" in value.lower():
            return saliency.Budget("proportion", float(value))
        return saliency.Budget("fixed", int(value))
    except ValueError as exc:
        raise UserError(f"cannot parse budget {value!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    config = load_run_config(args)
    with run_lock(run_directory(config)) as run_dir:
        train, test = ingest(config)
        text.save_corpus(train, run_dir / "train.corpus")
        names = ["train.corpus"]
        if test is not None:
            text.save_corpus(test, run_dir / "test.corpus")
            names.append("test.corpus")
        (run_dir / "config.cfg").write_text(cfg.config_to_text(config), encoding="utf-8")
        print(f"cached {', '.join(names)} in {run_dir}")
        print(f"documents={len(train)} vocabulary={len(train.vocabulary)}")
    return 0


def cmd_train(args) -> int:
    config = load_run_config(args)
    with run_lock(run_directory(config)) as run_dir:
        train_corpus, test_corpus = load_corpora(config, run_dir)
        model_config = config.model_config()
        params = mdl.init_params(
            model_config,
            vocab_size=len(train_corpus.vocabulary),
            seed=config.training.seed,
            vocab_hash=train_corpus.vocabulary.content_hash,
        )

        def heartbeat(record: mdl.EpochRecord):
            fields = [f"heartbeat epoch={record.epoch}", f"loss={record.train_loss:.6f}"]
            if record.validation_accuracy is not None:
                fields.append(f"val_acc={record.validation_accuracy:.4f}")
            print(" ".join(fields), file=sys.stderr, flush=True)

        options = mdl.TrainOptions(
            epochs=config.training.epochs,
            batch_size=config.training.batch_size,
            learning_rate=config.training.learning_rate,
            l2=config.training.l2,
            dropout=config.training.dropout,
            validation_fraction=config.training.validation_fraction,
            seed=config.training.seed,
            on_epoch=heartbeat,
        )
        try:
            result = mdl.train(train_corpus, params, options)
        except mdl.TrainingDivergedError as exc:
            raise UserError(f"training diverged: {exc}") from exc

        model_path = run_dir / "model.bin"
        mdl.save_model(result.params, model_path)
        (run_dir / "config.cfg").write_text(cfg.config_to_text(config), encoding="utf-8")
        metrics = {
            "seed": config.training.seed,
            "model_hash": _file_hash(model_path),
            "epochs_run": len(result.history),
            "best_epoch": result.best_epoch,
            "final_train_loss": result.history[-1].train_loss,
            "best_validation_accuracy": result.best_validation_accuracy,
        }
        if test_corpus is not None:
            metrics["test_accuracy"] = mdl.evaluate(test_corpus, result.params).accuracy
        record = write_metrics(run_dir, config, metrics)
        print(json.dumps(record, sort_keys=True, indent=2))
    return 0


def cmd_eval(args) -> int:
    config = load_run_config(args)
    run_dir = run_directory(config)
    model_path = Path(args.model) if args.model else run_dir / "model.bin"
    params = _load_model(model_path)
    _, test_corpus = load_corpora(config, run_dir)
    if test_corpus is None:
        raise UserError("this configuration has no test split to evaluate")
    if params.vocab_hash and params.vocab_hash != test_corpus.vocabulary.content_hash:
        raise UserError(
            f"model {model_path} was trained with a different vocabulary "
            f"than the configured dataset produces"
        )
    result = mdl.evaluate(test_corpus, params)
    print(
        json.dumps(
            {
                "accuracy": result.accuracy,
                "correct": result.correct,
                "total": result.total,
                "error_count": result.total - result.correct,
                "confusion": result.confusion.tolist(),
            },
            sort_keys=True,
            indent=2,
        )
    )
    return 0


def _render_for_document(args) -> str:
    params = _load_model(args.model)
    vocab = _load_vocab_from_cache(args.corpus)
    if params.vocab_hash and params.vocab_hash != vocab.content_hash:
        raise UserError(
            f"model {args.model} and corpus {args.corpus} carry different vocabularies"
        )
    input_path = Path(args.input)
    if not input_path.is_file():
        raise UserError(f"input file {input_path} does not exist")
    try:
        document = text.encode_document(
            input_path.read_text(encoding="utf-8"), None, vocab, source_id=input_path.name
        )
    except text.EmptyDocumentError as exc:
        raise UserError(str(exc)) from exc
    budget = parse_budget(args.budget)
    smap = saliency.saliency_map(document, params)
    summary = saliency.summarize(smap.sentence_scores, budget)
    if args.format == "text":
        sentences = [
            " ".join(vocab.decode_id(t) for t in document.sentences[i])
            for i in summary.indices
        ]
        return "\n".join(sentences)
    return saliency.render_saliency(document, vocab, smap, summary, args.format)


def cmd_summarize(args) -> int:
    rendered = _render_for_document(args)
    if args.output:
        Path(args.output).write_text(rendered + "\n", encoding="utf-8")
        print(f"wrote {args.output}")
    else:
        print(rendered)
    return 0


def cmd_gradcheck(args) -> int:
    config = load_run_config(args)
    model_config = config.model_config()
    rng = np.random.default_rng(args.seed)
    vocab_size = 12
    worst = 0.0
    for trial in range(args.trials):
        params = mdl.init_params(model_config, vocab_size, seed=int(rng.integers(1 << 30)))
        sentence_count = 1 if not model_config.document_layers else int(rng.integers(1, 4))
        sentences = [
            rng.integers(1, vocab_size, size=rng.integers(1, 6)).tolist()
            for _ in range(sentence_count)
        ]
        label = int(rng.integers(model_config.class_count))
        document = text.Document(sentences=sentences, label=label)
        error = mdl.full_gradient_check(params, document, label)
        worst = max(worst, error)
        print(f"trial={trial} rel_error={error:.3e}", file=sys.stderr, flush=True)
    print(f"max_rel_error={worst:.6e} trials={args.trials}")
    if worst >= 1e-4:
        print("gradient check FAILED (threshold 1e-4)", file=sys.stderr)
        return 1
    return 0


def cmd_nb_eval(args) -> int:
    config = load_run_config(args)
    with run_lock(run_directory(config)) as run_dir:
        model_path = Path(args.model) if args.model else run_dir / "model.bin"
        params = _load_model(model_path)
        train_corpus, test_corpus = load_corpora(config, run_dir)
        if test_corpus is None:
            raise UserError("the summary-quality table needs a test split")
        result = nb.run_summary_evaluation(
            params, train_corpus, test_corpus, sentence_mode=config.saliency_mode
        )
        table = nb.format_table(result)
        (run_dir / "summary_table.txt").write_text(table + "\n", encoding="utf-8")
        (run_dir / "summary_table.json").write_text(
            nb.table_to_json(result) + "\n", encoding="utf-8"
        )
        write_metrics(
            run_dir,
            config,
            {
                "seed": config.training.seed,
                "model_hash": _file_hash(model_path),
                "full_accuracy": result.full_accuracy,
                "first_last_accuracy": result.first_last_accuracy,
                "margins": {row.label: row.margin for row in result.rows},
            },
        )
        print(table)
    return 0


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "summarize": cmd_summarize,
    "saliency": cmd_summarize,
    "gradcheck": cmd_gradcheck,
    "nb-eval": cmd_nb_eval,
}


def run(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UserError(parser.format_usage().rstrip())
        return COMMANDS[args.command](args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the exit-code contract needs a catch-all
        traceback.print_exc()
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


def main() -> int:
    return run()


if __name__ == "__main__":
    sys.exit(main())
