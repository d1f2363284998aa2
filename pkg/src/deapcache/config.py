"""Flat ``key = value`` run configuration with range validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def _choice(*options):
    return ("choice", options)


def _range(lo, hi):
    return ("range", (lo, hi))


@dataclass
class RunConfig:
    # training
    num_epochs: int = 20
    training_batch_size: int = 256
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    training_temperature: float = 1e-3
    lstm_hidden_cell_size: int = 40
    decoder_hidden_size: int = 10
    prefetching_input_sequence_length: int = 30
    address_embedding_size: int = 20
    weight_for_cross_entropy_loss: float = 0.33
    weight_for_frequency_mse_loss: float = 0.33
    weight_for_reuse_distance_mse_loss: float = 0.33
    # byte embeddings
    word2vec_number_of_epochs: int = 120
    word2vec_learning_rate: float = 3e-3
    word2vec_weight_decay: float = 1e-3
    word2vec_optimizer: str = "adam"
    word2vec_encoder_hidden_layer_size: int = 128
    word2vec_byte_embedding_dimension: int = 20
    word2vec_context_size: int = 4
    # online simulation
    admission_frequency_threshold: float = 3000.0
    admission_reuse_distance_threshold: float = 7000.0
    miss_buffer_size: int = 50
    test_simulation_prefetching_interval: int = 30
    cache_size: int = 32
    test_simulation_batch_size: int = 10000
    # choices without a published range
    kde_probes: int = 16
    kde_bandwidth_floor: float = 1e-2
    prefetch_n: int = 5
    label_cap: int = 0  # 0 means trace length + 1
    label_scale: float = 1e-4
    rng_seed: int = 0
    lecar_lambda: float = 0.45
    lecar_discount: float = 0.0  # 0 means 0.005 ** (1 / cache_size)
    score_cache: str = "fresh"
    buffer_sampling: str = "recent"
    freeze_byte_tables: bool = False
    # paths
    train_traces: list = field(default_factory=list)
    test_traces: list = field(default_factory=list)
    tables_path: str = "tables.npy"
    checkpoint_path: str = "model.ckpt"
    output_dir: str = "out"


# Published search spaces. Epochs may be 0 so that a no-op training run is expressible.
RANGES = {
    "num_epochs": _range(0, 20),
    "training_batch_size": _choice(32, 64, 128, 256, 512),
    "optimizer": _choice("adam", "sgd"),
    "learning_rate": _range(1e-5, 1e-1),
    "training_temperature": _choice(1e-3, 1e-2),
    "lstm_hidden_cell_size": _range(20, 40),
    "prefetching_input_sequence_length": _choice(20, 30),
    "address_embedding_size": _range(5, 25),
    "word2vec_number_of_epochs": _range(20, 500),
    "word2vec_learning_rate": _range(1e-5, 1e-2),
    "word2vec_weight_decay": _range(1e-6, 10),
    "word2vec_optimizer": _choice("adam", "sgd"),
    "word2vec_encoder_hidden_layer_size": _range(50, 200),
    "word2vec_byte_embedding_dimension": _range(5, 25),
    "word2vec_context_size": _range(2, 10),
    "admission_frequency_threshold": _choice(50, 300, 500, 1000, 3000),
    "admission_reuse_distance_threshold": _choice(500, 3000, 5000, 7000, 8000),
    "miss_buffer_size": _choice(30, 50, 70, 100),
    "test_simulation_prefetching_interval": _choice(10, 20, 30, 50),
    "cache_size": _choice(32, 64),
    "test_simulation_batch_size": _choice(5000, 10000),
    "kde_probes": _range(1, 1024),
    "kde_bandwidth_floor": _range(1e-12, 1e3),
    "prefetch_n": _range(0, 256),
    "label_cap": _range(0, 2 ** 62),
    "label_scale": _range(1e-12, 1.0),
    "lecar_lambda": _range(0.0, 10.0),
    "lecar_discount": _range(0.0, 1.0),
    "score_cache": _choice("fresh", "stale"),
    "buffer_sampling": _choice("recent", "uniform"),
}

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
# short names accepted for the two admission thresholds
ALIASES = {"alpha": "admission_frequency_threshold", "beta": "admission_reuse_distance_threshold"}
_LIST_KEYS = ("train_traces", "test_traces")


def _parse_value(key, text):
    default = _FIELDS[key].default
    text = text.strip()
    if key in _LIST_KEYS:
        return [p.strip() for p in text.split(",") if p.strip()]
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text, 0)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text.lower() if key in RANGES else text


def validate(cfg):
    for key, (kind, rule) in RANGES.items():
        value = getattr(cfg, key)
        if kind == "choice":
            ok = value in rule
            allowed = "one of " + ", ".join(str(s) for s in rule)
        else:
            lo, hi = rule
            ok = lo <= value <= hi
            allowed = f"in [{lo}, {hi}]"
        if not ok:
            raise ConfigError(f"{key}={value!r} is outside the permitted range: {allowed}")
    if cfg.prefetching_input_sequence_length > cfg.miss_buffer_size:
        raise ConfigError("prefetching_input_sequence_length must not exceed miss_buffer_size")
    return cfg


def apply_overrides(cfg, pairs):
    """Return a copy of ``cfg`` with ``key=value`` strings applied."""
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        key = key.strip()
        key = ALIASES.get(key, key)
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, value)
    return dataclasses.replace(cfg, **updates)


def parse_config(text):
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        pairs.append(line)
    return validate(apply_overrides(RunConfig(), pairs))


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``overrides``; validated."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
        cfg = parse_config(text)
    return validate(apply_overrides(cfg, overrides))


def dump_config(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
