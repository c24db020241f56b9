"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 4096
    dtype: str = "float64"
    # data
    data_root: str = "data/toy"
    n_images: int = 2500
    n_classes: int = 8
    image_size: int = 32
    min_objects: int = 2
    max_objects: int = 5
    zipf: float = 1.0
    color_jitter: float = 0.15
    # architecture
    patch_size: int = 8
    width: int = 64
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    text_width: int = 64
    text_depth: int = 2
    text_heads: int = 4
    mlp_ratio: int = 4
    # contrastive pretraining
    pretrain_epochs: int = 5
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 32
    pretrain_warmup: int = 30
    pretrain_weight_decay: float = 0.01
    pretrain_checkpoint: str = "runs/pretrain.ckpt"
    # grounding stage
    lr: float = 1e-3
    batch_size: int = 32
    warmup: int = 100
    total_steps: int = 600
    schedule: str = "cosine"
    optimizer: str = "galore_adamw"
    weight_decay: float = 0.0
    galore_rank: int = 4
    galore_scale: float = 0.25
    galore_projection_type: str = "std"
    galore_refresh_period: int = 200
    theta: float = 0.25
    sig_scale: float = 10.0
    sig_bias: float = 0.0
    freeze_text: bool = False
    freeze_cls: bool = False
    supervision: str = "seq"
    balanced: bool = True
    eval_every: int = 100
    checkpoint_every: int = 100
    out_dir: str = "runs/tune"
    # evaluation
    probe_lr: float = 0.1
    probe_epochs: int = 500

    def validate(self) -> "TrainConfig":
        choices = {
            "dtype": ("float64", "float32"),
            "schedule": ("cosine", "constant"),
            "optimizer": ("adamw", "galore_adamw"),
            "galore_projection_type": ("std", "left", "right"),
            "supervision": ("cls", "seq", "both"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        positive = ("n_images", "n_classes", "image_size", "patch_size", "width", "embed_dim",
                    "depth", "heads", "text_width", "text_depth", "text_heads", "mlp_ratio",
                    "pretrain_batch_size", "batch_size", "total_steps", "galore_rank",
                    "galore_refresh_period", "eval_every", "checkpoint_every", "probe_epochs")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        for key in ("pretrain_epochs", "warmup", "pretrain_warmup"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        if not 0 < self.theta <= 1:
            raise ConfigError(f"theta must be in (0, 1], got {self.theta}")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.zipf < 0:
            raise ConfigError("zipf must be >= 0")
        if self.sig_scale <= 0:
            raise ConfigError("sig_scale must be positive")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


PRESETS = {
    "desk": {},
    # hyperparameters reported for the full-scale run; documentation only at desk scale
    "full_scale": {
        "lr": 4e-6,
        "batch_size": 512,
        "warmup": 25000,
        "optimizer": "galore_adamw",
        "galore_rank": 128,
        "galore_scale": 0.25,
        "galore_projection_type": "std",
        "seed": 4096,
    },
    # small enough for finite-difference gradient checks
    "tiny": {
        "n_images": 4,
        "n_classes": 3,
        "image_size": 16,
        "patch_size": 8,
        "width": 8,
        "embed_dim": 4,
        "depth": 1,
        "heads": 2,
        "text_width": 8,
        "text_depth": 1,
        "text_heads": 2,
        "mlp_ratio": 2,
        "min_objects": 1,
        "max_objects": 2,
    },
}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError as err:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from err
    return raw


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def parse_pairs(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    values = {}
    for key, raw in pairs.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = parse_value(key, raw, _TYPES[key])
    return dataclasses.replace(base, **values).validate()


def parse_text(text: str, base: TrainConfig | None = None, source: str = "<config>") -> TrainConfig:
    pairs = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = line.split("=", 1)
        pairs[key.strip()] = raw
    return parse_pairs(pairs, base)


def load_config(path=None, overrides=(), preset: str | None = None) -> TrainConfig:
    """Defaults, then ``preset``, then the file at ``path``, then ``key=value`` overrides."""
    cfg = TrainConfig()
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        cfg = dataclasses.replace(cfg, **PRESETS[preset])
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as err:
            raise ConfigError(f"{p}: cannot read config ({err.strerror})") from err
        cfg = parse_text(text, cfg, str(p))
    pairs = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    return parse_pairs(pairs, cfg)
