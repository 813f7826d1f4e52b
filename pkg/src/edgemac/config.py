"""Run configuration: a flat key = value document with strict validation.

Unknown keys are rejected, missing keys take the documented defaults, and
every value is range-checked against the module that owns it. The network
architecture is a compact layer string, e.g.

    network = conv(1,16)-relu-pool-conv(16,32)-relu

where conv takes (in_channels, out_channels[, kernel[, stride]]).
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, fields

from .convnet import MAXPOOL, RELU, ConvLayer, NetworkConfig
from .errors import ConfigError
from .training import TrainConfig

DEFAULT_NETWORK = (
    "conv(1,16)-relu-pool-conv(16,32)-relu-pool-conv(32,64)-relu-pool-conv(64,64)-relu"
)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # training
    margin: float = 0.7
    lr0: float = 0.001
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 20
    max_epochs: int = 20
    mining_per_epoch: int = 3
    train_max_side: int = 200
    network: str = DEFAULT_NETWORK
    # descriptor extraction
    extract_max_side: int = 227
    pad_border: int = 30
    # diffusion re-ranking
    alpha: float = 0.9
    graph_k: int = 50
    gamma: float = 3.0
    seed_k: int = 10
    # classification
    classifier_lambda: float = 0.001


_RANGES = {
    "seed": lambda v: v >= 0,
    "margin": lambda v: 0.0 < v <= 2.0,
    "lr0": lambda v: v > 0.0,
    "lr_decay": lambda v: v >= 0.0,
    "momentum": lambda v: 0.0 <= v < 1.0,
    "weight_decay": lambda v: v >= 0.0,
    "batch_size": lambda v: v >= 1,
    "max_epochs": lambda v: v >= 1,
    "mining_per_epoch": lambda v: v >= 1,
    "train_max_side": lambda v: v >= 1,
    "extract_max_side": lambda v: v >= 1,
    "pad_border": lambda v: v >= 0,
    "alpha": lambda v: 0.0 < v < 1.0,
    "graph_k": lambda v: v >= 1,
    "gamma": lambda v: v > 0.0,
    "seed_k": lambda v: v >= 1,
    "classifier_lambda": lambda v: v > 0.0,
}


def _coerce(name: str, raw: str, target_type):
    try:
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name!r}: cannot parse {raw!r} as {target_type.__name__}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse a key = value document; '#' starts a comment."""
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {"seed": int, "batch_size": int, "max_epochs": int, "mining_per_epoch": int,
             "train_max_side": int, "extract_max_side": int, "pad_border": int,
             "graph_k": int, "seed_k": int, "network": str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"duplicate config key {key!r}")
        values[key] = _coerce(key, raw, types.get(key, float))
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    for name, check in _RANGES.items():
        if not check(getattr(cfg, name)):
            raise ConfigError(f"config key {name!r} out of range: {getattr(cfg, name)}")
    parse_network(cfg.network)  # raises ConfigError on a bad layer string


def serialize_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()[:16]


_CONV_RE = re.compile(r"^conv\((\d+),(\d+)(?:,(\d+))?(?:,(\d+))?\)$")


def parse_network(spec: str) -> NetworkConfig:
    """Parse a layer string into a NetworkConfig."""
    layers = []
    for token in spec.replace(" ", "").split("-"):
        if token == "relu":
            layers.append(RELU)
        elif token == "pool":
            layers.append(MAXPOOL)
        else:
            m = _CONV_RE.match(token)
            if not m:
                raise ConfigError(f"cannot parse network layer {token!r}")
            cin, cout = int(m.group(1)), int(m.group(2))
            kernel = int(m.group(3)) if m.group(3) else 3
            stride = int(m.group(4)) if m.group(4) else 1
            layers.append(ConvLayer(cin, cout, kernel=kernel, stride=stride))
    convs = [l for l in layers if isinstance(l, ConvLayer)]
    if not convs:
        raise ConfigError(f"network {spec!r} has no conv layer")
    return NetworkConfig(tuple(layers), descriptor_dim=convs[-1].out_channels)


def to_train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        margin=cfg.margin, lr0=cfg.lr0, lr_decay=cfg.lr_decay, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
        mining_per_epoch=cfg.mining_per_epoch, train_max_side=cfg.train_max_side,
        seed=cfg.seed,
    )
