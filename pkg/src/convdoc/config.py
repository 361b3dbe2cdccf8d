"""Run configuration: a flat INI format with [run], [dataset],
[architecture] and [training] sections, plus the shipped presets.

Layer stacks are written in a one-line syntax, layers separated by "|":

    6 maps, width 5, kmax 4
    6 maps, width 7, dynmax 0.5 min 4 | 14 maps, width 5, kmax 4

``kmax k`` is fixed k-max pooling; ``dynmax f min k`` keeps a fraction f of
the sequence with floor k.  An empty string means no layers at that level
(single-sentence models feed the head directly from the sentence network).

Unknown sections or keys are rejected so typos cannot silently fall back to
defaults, and `to_text` emits a canonical form: parse(to_text(c)) == c.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import LayerSpec, ModelConfig
from .ops import PoolSpec


class ConfigFileError(ValueError):
    """A config file is malformed or inconsistent."""


_LAYER_RE = re.compile(
    r"^\s*(?P<maps>\d+)\s+maps\s*,\s*width\s+(?P<width>\d+)\s*,\s*"
    r"(?:kmax\s+(?P<kmax>\d+)|dynmax\s+(?P<fraction>[0-9.]+)\s+min\s+(?P<floor>\d+))\s*$"
)


def parse_layers(text: str) -> tuple[LayerSpec, ...]:
    """Parse the one-line layer syntax; empty text means no layers."""
    text = text.strip()
    if not text:
        return ()
    layers = []
    for part in text.split("|"):
        match = _LAYER_RE.match(part)
        if not match:
            raise ConfigFileError(
                f"cannot parse layer {part.strip()!r}; expected "
                f"'<maps> maps, width <w>, kmax <k>' or "
                f"'<maps> maps, width <w>, dynmax <fraction> min <k>'"
            )
        if match.group("kmax") is not None:
            pool = PoolSpec(mode="fixed", k_top=int(match.group("kmax")))
        else:
            pool = PoolSpec(
                mode="dynamic",
                k_top=int(match.group("floor")),
                fraction=float(match.group("fraction")),
            )
        layers.append(
            LayerSpec(maps=int(match.group("maps")), width=int(match.group("width")), pool=pool)
        )
    return tuple(layers)


def format_layers(layers: tuple[LayerSpec, ...]) -> str:
    parts = []
    for layer in layers:
        if layer.pool.mode == "fixed":
            pool = f"kmax {layer.pool.k_top}"
        else:
            pool = f"dynmax {layer.pool.fraction:g} min {layer.pool.k_top}"
        parts.append(f"{layer.maps} maps, width {layer.width}, {pool}")
    return " | ".join(parts)


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    root: str = ""
    csv_path: str = ""
    test_csv_path: str = ""
    text_column: str = "text"
    label_column: str = "label"
    delimiter: str = ","
    has_header: bool = True
    label_map: str = ""
    single_sentence: bool = True
    min_count: int = 5
    train_docs: int = 200
    test_docs: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("imdb", "csv", "synthetic"):
            raise ConfigFileError(
                f"dataset kind must be imdb, csv or synthetic, got {self.kind!r}"
            )


@dataclass
class TrainingConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 0.05
    l2: float = 0.0
    dropout: float = 0.0
    validation_fraction: float = 0.1
    seed: int = 0


@dataclass
class RunConfig:
    name: str = "run"
    output_root: str = "runs"
    saliency_mode: str = "dot"
    embedding_dim: int = 10
    class_count: int = 2
    sentence_layers: tuple[LayerSpec, ...] = ()
    document_layers: tuple[LayerSpec, ...] = ()
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if not re.fullmatch(r"[A-Za-z0-9._-]+", self.name):
            raise ConfigFileError(
                f"run name must be filesystem-safe ([A-Za-z0-9._-]+), got {self.name!r}"
            )
        if self.saliency_mode not in ("dot", "elementwise"):
            raise ConfigFileError(
                f"saliency_mode must be dot or elementwise, got {self.saliency_mode!r}"
            )
        # Validates the layer chaining rules as a side effect.
        self.model_config()

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            embedding_dim=self.embedding_dim,
            class_count=self.class_count,
            sentence_layers=self.sentence_layers,
            document_layers=self.document_layers,
        )


_BOOL_KEYS = {"has_header", "single_sentence"}
_INT_KEYS = {
    "min_count", "train_docs", "test_docs", "seed", "epochs", "batch_size",
    "embedding_dim", "class_count",
}
_FLOAT_KEYS = {"learning_rate", "l2", "dropout", "validation_fraction"}


def _coerce(key: str, value: str):
    if key in _BOOL_KEYS:
        lowered = value.strip().lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ConfigFileError(f"{key} must be a boolean, got {value!r}")
    try:
        if key in _INT_KEYS:
            return int(value)
        if key in _FLOAT_KEYS:
            return float(value)
    except ValueError as exc:
        raise ConfigFileError(f"{key} must be a number, got {value!r}") from exc
    return value


def _section_into(cls, section_name: str, items: dict[str, str]):
    known = {f.name for f in fields(cls)}
    values = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigFileError(f"unknown key {key!r} in [{section_name}]")
        values[key] = _coerce(key, raw)
    try:
        return cls(**values)
    except (ValueError, TypeError) as exc:
        raise ConfigFileError(f"invalid [{section_name}] section: {exc}") from exc


def config_from_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigFileError(f"cannot parse config: {exc}") from exc
    allowed = {"run", "architecture", "dataset", "training"}
    unknown = set(parser.sections()) - allowed
    if unknown:
        raise ConfigFileError(f"unknown config sections: {sorted(unknown)}")

    run_items = dict(parser.items("run")) if parser.has_section("run") else {}
    arch_items = dict(parser.items("architecture")) if parser.has_section("architecture") else {}
    known_run = {"name", "output_root", "saliency_mode"}
    for key in run_items:
        if key not in known_run:
            raise ConfigFileError(f"unknown key {key!r} in [run]")
    known_arch = {"embedding_dim", "class_count", "sentence_layers", "document_layers"}
    for key in arch_items:
        if key not in known_arch:
            raise ConfigFileError(f"unknown key {key!r} in [architecture]")

    dataset = _section_into(
        DatasetConfig, "dataset",
        dict(parser.items("dataset")) if parser.has_section("dataset") else {},
    )
    training = _section_into(
        TrainingConfig, "training",
        dict(parser.items("training")) if parser.has_section("training") else {},
    )
    try:
        return RunConfig(
            name=run_items.get("name", "run"),
            output_root=run_items.get("output_root", "runs"),
            saliency_mode=run_items.get("saliency_mode", "dot"),
            embedding_dim=int(_coerce("embedding_dim", arch_items.get("embedding_dim", "10"))),
            class_count=int(_coerce("class_count", arch_items.get("class_count", "2"))),
            sentence_layers=parse_layers(arch_items.get("sentence_layers", "")),
            document_layers=parse_layers(arch_items.get("document_layers", "")),
            dataset=dataset,
            training=training,
        )
    except ConfigFileError:
        raise
    except ValueError as exc:
        raise ConfigFileError(str(exc)) from exc


def config_to_text(config: RunConfig) -> str:
    """Canonical INI rendering: fixed section and key order."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {
        "name": config.name,
        "output_root": config.output_root,
        "saliency_mode": config.saliency_mode,
    }
    parser["architecture"] = {
        "embedding_dim": str(config.embedding_dim),
        "class_count": str(config.class_count),
        "sentence_layers": format_layers(config.sentence_layers),
        "document_layers": format_layers(config.document_layers),
    }
    parser["dataset"] = {
        key: str(value).lower() if isinstance(value, bool) else str(value)
        for key, value in asdict(config.dataset).items()
    }
    parser["training"] = {
        key: repr(value) if isinstance(value, float) else str(value)
        for key, value in asdict(config.training).items()
    }
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigFileError(f"config file {path} does not exist")
    return config_from_text(path.read_text(encoding="utf-8"))


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(config_to_text(config).encode("utf-8")).hexdigest()


def preset_configs() -> dict[str, RunConfig]:
    """Shipped experiment configurations.

    ``imdb-hierarchical``: 10-d embeddings, one sentence layer of 6 maps
    width 5 pooled to k=4, one document layer of 15 maps width 5 pooled to
    k=2 (30-d document embedding).  ``twitter-dcnn-like``: 60-d embeddings,
    two sentence layers (6 maps width 7 with dynamic pooling, then 14 maps
    width 5 to k=4) and no document level, for single-sentence inputs.
    ``toy``: a minimal synthetic setup for smoke runs and gradient checks.
    """
    imdb = RunConfig(
        name="imdb-hierarchical",
        embedding_dim=10,
        class_count=2,
        sentence_layers=parse_layers("6 maps, width 5, kmax 4"),
        document_layers=parse_layers("15 maps, width 5, kmax 2"),
        dataset=DatasetConfig(kind="imdb", root="data/aclImdb", min_count=5),
        training=TrainingConfig(
            epochs=8, batch_size=25, learning_rate=0.03, l2=1e-5,
            dropout=0.5, validation_fraction=0.08, seed=0,
        ),
    )
    twitter = RunConfig(
        name="twitter-dcnn-like",
        embedding_dim=60,
        class_count=2,
        sentence_layers=parse_layers(
            "6 maps, width 7, dynmax 0.5 min 4 | 14 maps, width 5, kmax 4"
        ),
        document_layers=(),
        dataset=DatasetConfig(
            kind="csv", csv_path="data/twitter/train.csv",
            text_column="text", label_column="label",
            single_sentence=True, min_count=5,
        ),
        training=TrainingConfig(
            epochs=3, batch_size=50, learning_rate=0.02, l2=1e-6,
            dropout=0.2, validation_fraction=0.02, seed=0,
        ),
    )
    toy = RunConfig(
        name="toy",
        embedding_dim=4,
        class_count=2,
        sentence_layers=parse_layers("3 maps, width 2, kmax 2"),
        document_layers=parse_layers("3 maps, width 2, kmax 2"),
        dataset=DatasetConfig(kind="synthetic", train_docs=40, test_docs=20, seed=0),
        training=TrainingConfig(
            epochs=12, batch_size=8, learning_rate=0.15, l2=1e-4,
            validation_fraction=0.15, seed=0,
        ),
    )
    return {"imdb-hierarchical": imdb, "twitter-dcnn-like": twitter, "toy": toy}
