#!/usr/bin/env python3
"""Full IMDB experiment: hierarchical convnet, then the summary budget table.

Expects the standard aclImdb directory (train/{pos,neg}, test/{pos,neg}).
Trains the imdb-hierarchical preset, reports test accuracy, then evaluates
an NB bag-of-words classifier on extractive summaries at every budget
against seeded random baselines.  This is a CPU run measured in hours; use
--epochs 1 --limit 500 for a quick smoke pass.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from convdoc import model as mdl
from convdoc import nb
from convdoc.config import preset_configs
from convdoc.model import TrainOptions
from convdoc.text import load_imdb


def limit_documents(corpus, n):
    """Keep roughly n documents, split evenly across classes."""
    by_class = {}
    for doc in corpus.documents:
        by_class.setdefault(doc.label, []).append(doc)
    per_class = max(1, n // max(1, len(by_class)))
    corpus.documents = [doc for docs in by_class.values() for doc in docs[:per_class]]


def parse_args(argv):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", type=Path, help="path to the aclImdb directory")
    parser.add_argument("--out", type=Path, default=Path("runs/imdb-script"))
    parser.add_argument("--epochs", type=int, default=None, help="override preset epochs")
    parser.add_argument("--seed", type=int, default=None, help="override preset seed")
    parser.add_argument(
        "--limit", type=int, default=None,
        help="use only the first N documents per split (smoke runs)",
    )
    parser.add_argument(
        "--mode", choices=("dot", "elementwise"), default="dot",
        help="sentence score used to rank sentences for summaries",
    )
    return parser.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    log = logging.getLogger("run_imdb")

    preset = preset_configs()["imdb-hierarchical"]
    training = preset.training
    epochs = args.epochs if args.epochs is not None else training.epochs
    seed = args.seed if args.seed is not None else training.seed

    log.info("loading %s", args.root)
    train_corpus = load_imdb(args.root, "train", min_count=preset.dataset.min_count)
    test_corpus = load_imdb(args.root, "test", vocab=train_corpus.vocabulary)
    if args.limit is not None:
        limit_documents(train_corpus, args.limit)
        limit_documents(test_corpus, args.limit)
    log.info(
        "train %d docs, test %d docs, vocabulary %d",
        len(train_corpus.documents), len(test_corpus.documents),
        len(train_corpus.vocabulary),
    )

    params = mdl.init_params(
        preset.model_config(),
        vocab_size=len(train_corpus.vocabulary),
        seed=seed,
        vocab_hash=train_corpus.vocabulary.content_hash,
    )
    options = TrainOptions(
        epochs=epochs,
        batch_size=training.batch_size,
        learning_rate=training.learning_rate,
        l2=training.l2,
        dropout=training.dropout,
        validation_fraction=training.validation_fraction,
        seed=seed,
    )
    result = mdl.train(train_corpus, params, options)
    test = mdl.evaluate(test_corpus, result.params)
    log.info("convnet test accuracy: %.4f", test.accuracy)

    args.out.mkdir(parents=True, exist_ok=True)
    mdl.save_model(result.params, args.out / "model.bin")

    table = nb.run_summary_evaluation(
        result.params, train_corpus, test_corpus, sentence_mode=args.mode
    )
    rendered = nb.format_table(table)
    print(f"convnet test accuracy: {test.accuracy:.4f}")
    print(rendered)

    (args.out / "summary_table.txt").write_text(rendered + "\n", encoding="utf-8")
    (args.out / "summary_table.json").write_text(nb.table_to_json(table), encoding="utf-8")
    (args.out / "metrics.json").write_text(
        json.dumps(
            {
                "test_accuracy": test.accuracy,
                "best_validation_accuracy": result.best_validation_accuracy,
                "full_text_nb_accuracy": table.full_accuracy,
                "first_last_nb_accuracy": table.first_last_accuracy,
                "epochs": epochs,
                "seed": seed,
                "sentence_mode": args.mode,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    log.info("wrote artifacts to %s", args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
