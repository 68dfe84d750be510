"""Flat dotted-key configuration with a typed schema.

Config files are YAML. Nested mappings are flattened on load, so
``train: {lr: 0.01}`` and ``train.lr: 0.01`` are interchangeable.
Command-line overrides are ``key=value`` strings applied after the file.
Unknown keys are rejected rather than ignored; a typo in an ablation sweep
should fail loudly, not silently run the default.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigurationError


@dataclass(frozen=True)
class SchemaKey:
    type: type
    default: object
    choices: tuple | None = None
    minimum: float | None = None
    help: str = ""


SCHEMA: dict[str, SchemaKey] = {
    # synthetic benchmark
    "dataset.seed": SchemaKey(int, 0, help="master seed for class prototypes and samples"),
    "dataset.n_classes": SchemaKey(int, 20, minimum=2, help="total classes before the base/novel split"),
    "dataset.tokens_per_image": SchemaKey(int, 8, minimum=1, help="patch tokens per image"),
    "dataset.text_len": SchemaKey(int, 6, minimum=1, help="tokens per class text sequence"),
    "dataset.sketch_dim": SchemaKey(int, 8, minimum=1, help="width of the numeric sketch in class descriptions"),
    "dataset.class_sep": SchemaKey(float, 1.0, minimum=0.0, help="scale of class prototypes"),
    "dataset.noise": SchemaKey(float, 0.35, minimum=0.0, help="per-token noise around the prototype"),
    "dataset.noise_rank": SchemaKey(int, 0, minimum=0,
                                    help="0 = per-token full-rank noise; k > 0 makes it a per-image "
                                         "offset from a fixed k-dim subspace"),
    "dataset.train_bias": SchemaKey(float, 0.0, minimum=0.0,
                                    help="per-class offset on train images only, a train/test domain gap"),
    "dataset.train_per_class": SchemaKey(int, 20, minimum=1, help="training pool size per class"),
    "dataset.test_per_class": SchemaKey(int, 20, minimum=1, help="test samples per class"),
    # frozen two-tower encoder
    "encoder.depth": SchemaKey(int, 3, minimum=0, help="transformer blocks per tower"),
    "encoder.width": SchemaKey(int, 32, minimum=4, help="token width inside the towers"),
    "encoder.embed_width": SchemaKey(int, 16, minimum=2, help="shared embedding width after projection"),
    "encoder.seed": SchemaKey(int, 0, help="seed for the frozen tower weights"),
    "encoder.score_temperature": SchemaKey(float, 0.05, help="cosine scores are divided by this before softmax"),
    # learnable prompts
    "prompt.n_ctx": SchemaKey(int, 4, minimum=1, help="prompt tokens per layer"),
    "prompt.depth": SchemaKey(int, 2, minimum=1, help="number of layers that receive fresh prompts"),
    "prompt.seed": SchemaKey(int, 1, help="seed for the random prompt layers"),
    "text.pool": SchemaKey(str, "eos", choices=("eos", "sos"), help="which text position becomes the class feature"),
    # loss composition
    "loss.lambda1": SchemaKey(float, 1.0, minimum=0.0, help="weight of the visual feature loss"),
    "loss.lambda2": SchemaKey(float, 25.0, minimum=0.0, help="weight of the textual feature loss"),
    "loss.lambda3": SchemaKey(float, 1.0, minimum=0.0, help="weight of the score distillation loss"),
    "loss.mac_type": SchemaKey(str, "kl", choices=("kl", "l1", "mse"), help="divergence for score distillation"),
    "loss.mac_source": SchemaKey(str, "learned_scores", choices=("learned_scores", "prompted_logits"),
                                 help="student score vector fed to score distillation"),
    "loss.vac_mode": SchemaKey(str, "layer_wise", choices=("layer_wise", "last_layer"),
                               help="distill every prompted layer or only the final feature"),
    "loss.temperature": SchemaKey(float, 1.0, help="softmax temperature inside score distillation"),
    # teacher fusion
    "fusion.mode": SchemaKey(str, "gating", choices=("gating", "average", "add"),
                             help="how multiple agents are combined"),
    "agents.t2i_pool": SchemaKey(str, "lse", choices=("lse", "average", "max"),
                                 help="pooling of cross-attention maps into class scores"),
    # optimization
    "train.epochs": SchemaKey(int, 20, minimum=0),
    "train.batch_size": SchemaKey(int, 4, minimum=1),
    "train.lr": SchemaKey(float, 0.0025),
    "train.momentum": SchemaKey(float, 0.0, minimum=0.0),
    "train.weight_decay": SchemaKey(float, 0.0, minimum=0.0),
    "train.seed": SchemaKey(int, 0),
    "train.shots": SchemaKey(int, 16, minimum=1, help="labeled samples per class"),
    # evaluation protocol
    "split.seed": SchemaKey(int, 0, help="seed for the base/novel class partition"),
    "eval.n_seeds": SchemaKey(int, 3, minimum=1, help="seeds averaged in reports"),
}


def default_config() -> dict:
    return {k: spec.default for k, spec in SCHEMA.items()}


def _flatten(prefix: str, node, out: dict) -> None:
    if isinstance(node, dict):
        for k, v in node.items():
            _flatten(f"{prefix}{k}.", v, out)
    else:
        out[prefix[:-1]] = node


def _coerce(key: str, value):
    if key not in SCHEMA:
        raise ConfigurationError(f"unknown config key: {key}")
    spec = SCHEMA[key]
    if isinstance(value, bool):
        raise ConfigurationError(f"{key}: boolean values are not part of the schema")
    if spec.type is float and isinstance(value, int):
        value = float(value)
    if isinstance(value, str) and spec.type is not str:
        try:
            value = spec.type(value)
        except ValueError:
            raise ConfigurationError(f"{key}: cannot parse {value!r} as {spec.type.__name__}") from None
    if not isinstance(value, spec.type):
        raise ConfigurationError(f"{key}: expected {spec.type.__name__}, got {type(value).__name__}")
    if spec.choices is not None and value not in spec.choices:
        raise ConfigurationError(f"{key}: {value!r} is not one of {spec.choices}")
    if spec.minimum is not None and value < spec.minimum:
        raise ConfigurationError(f"{key}: {value} is below the minimum {spec.minimum}")
    return value


def load_config(path=None, overrides=()) -> dict:
    cfg = default_config()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
        flat: dict = {}
        _flatten("", raw, flat)
        for key, value in flat.items():
            cfg[key] = _coerce(key, value)
    for item in overrides:
        key, sep, value = str(item).partition("=")
        if not sep or not key:
            raise ConfigurationError(f"override must look like key=value, got {item!r}")
        cfg[key.strip()] = _coerce(key.strip(), value.strip())
    return cfg


def config_hash(cfg: dict) -> str:
    lines = "\n".join(f"{k}={cfg[k]!r}" for k in sorted(cfg))
    return hashlib.sha256(lines.encode("utf-8")).hexdigest()


def save_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(dict(sorted(cfg.items())), sort_keys=True))


def schema_help() -> str:
    """One line per key, rendered into --help."""
    width = max(len(k) for k in SCHEMA)
    lines = []
    for key in sorted(SCHEMA):
        spec = SCHEMA[key]
        extra = f" (one of {', '.join(map(str, spec.choices))})" if spec.choices else ""
        lines.append(f"  {key.ljust(width)}  default={spec.default!r}{extra}  {spec.help}")
    return "config keys:\n" + "\n".join(lines)
