"""Run configuration: one YAML tree covering every stage, with strict key checking."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import DEFAULT_LANGUAGES
from .lm import LoraConfig, ModelConfig
from .metrics import DEFAULT_BUCKET_EDGES, parse_bucket_edges
from .pipeline import PretrainConfig, TrainConfig
from .quantizer import SWEEP_KS


class ConfigError(ValueError):
    """Missing, unknown or ill-typed configuration key; the message names the key."""


@dataclass
class PathsConfig:
    corpus: str = "corpus.jsonl"
    codebook: str = "codebook.json"
    base: str = "base_lm.json"
    checkpoint: str = "model.json"
    report_dir: str = "reports"


@dataclass
class CorpusConfig:
    n: int = 500
    d_vis: int = 24
    noise_sigma: float = 0.05
    hold_frames: tuple[int, int] = (2, 4)
    blend_frames: int = 0
    frame_rate_hz: float = 25.0
    min_distance: float = 0.8
    languages: tuple[str, ...] = DEFAULT_LANGUAGES
    val_frac: float = 0.1
    test_frac: float = 0.1


@dataclass
class QuantizerConfig:
    k: int = 13
    sweep: tuple[int, ...] = SWEEP_KS
    n_init: int = 10
    max_iters: int = 100


@dataclass
class ModelSection:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_len: int = 256
    dropout: float = 0.0


@dataclass
class LoraSection:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05
    target_matrices: tuple[str, ...] = ("attn_q", "attn_v")


@dataclass
class PretrainSection:
    updates: int = 2000
    peak_lr: float = 1e-3
    batch_size: int = 16
    n_sentences: int = 4000
    instruction_text: bool = True


@dataclass
class TrainSection:
    updates: int = 3000
    peak_lr: float = TrainConfig.peak_lr
    batch_size: int = TrainConfig.batch_size
    warmup_frac: float = 0.1
    hold_frac: float = 0.4
    decay_frac: float = 0.5
    final_lr_scale: float = 0.05
    task_mix: dict | None = None
    token_mean_loss: bool = False
    dedup: bool = True
    val_every: int = 500
    val_samples: int = 25


@dataclass
class DecodeSection:
    width: int = 20
    alpha: float = 0.0
    max_new_tokens: int = 16


@dataclass
class EvalSection:
    bucket_edges: str = "0-2,2-4,4-6,>6"


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    model: ModelSection = field(default_factory=ModelSection)
    lora: LoraSection = field(default_factory=LoraSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    train: TrainSection = field(default_factory=TrainSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ----------------------------------------------------------- derived

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **dataclasses.asdict(self.model))

    def lora_config(self) -> LoraConfig:
        return LoraConfig(**dataclasses.asdict(self.lora))

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(seed=self.seed, **dataclasses.asdict(self.pretrain))

    def train_config(self) -> TrainConfig:
        t = dataclasses.asdict(self.train)
        t.pop("dedup")
        return TrainConfig(
            seed=self.seed, max_new_tokens=self.decode.max_new_tokens, **t
        )

    def bucket_edges(self) -> tuple[float, ...]:
        return parse_bucket_edges(self.eval.bucket_edges) if self.eval.bucket_edges else DEFAULT_BUCKET_EDGES

    def to_yaml(self) -> str:
        return yaml.safe_dump(_plain(dataclasses.asdict(self)), sort_keys=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, default, key):
    """Check ``value`` against the type of the field's default and normalize sequences."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{key}' must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key '{key}' must be a list, got {value!r}")
        if default:
            return tuple(_coerce(v, default[0], f"{key}[{i}]") for i, v in enumerate(value))
        return tuple(value)
    return value


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{prefix or 'root'}' must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key '{prefix}{unknown[0]}'")
    instance = cls()
    for name, value in data.items():
        key = f"{prefix}{name}"
        current = getattr(instance, name)
        if dataclasses.is_dataclass(current):
            setattr(instance, name, _build(type(current), value, f"{key}."))
        else:
            setattr(instance, name, _coerce(value, current, key))
    return instance


def from_dict(data: dict | None) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "")
    validate(cfg)
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return from_dict(data)


def validate(cfg: RunConfig) -> None:
    checks = [
        ("corpus.n", cfg.corpus.n >= 1, "must be >= 1"),
        ("corpus.d_vis", cfg.corpus.d_vis >= 1, "must be >= 1"),
        ("corpus.noise_sigma", cfg.corpus.noise_sigma >= 0, "must be >= 0"),
        ("corpus.hold_frames", len(cfg.corpus.hold_frames) == 2, "must have two entries"),
        ("quantizer.k", cfg.quantizer.k >= 1, "must be >= 1"),
        ("quantizer.sweep", all(k >= 1 for k in cfg.quantizer.sweep), "entries must be >= 1"),
        ("decode.width", cfg.decode.width >= 1, "must be >= 1"),
        ("train.updates", cfg.train.updates >= 1, "must be >= 1"),
        ("pretrain.updates", cfg.pretrain.updates >= 1, "must be >= 1"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(f"config key '{key}' {msg}")
    try:
        cfg.bucket_edges()
    except ValueError as exc:
        raise ConfigError(f"config key 'eval.bucket_edges': {exc}") from None
