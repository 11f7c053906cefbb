import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Any, Dict, Optional, Tuple

from app.errors import ConfigError
from app.encoder import resolve_mode
from config import Config


@dataclass
class EmbedderConfig:
    layers: int = 2
    heads: int = 2
    hidden: int = 32
    node_residual: bool = True
    patch_relative_time: bool = True
    freeze_channel_matrix: bool = False


@dataclass
class EncoderConfig:
    layers: int = 2
    heads: int = 2
    mode: str = "ci"
    ffn_dim: Optional[int] = None


@dataclass
class HeadConfig:
    time_dim: int = 16
    decoder_hidden: int = 32


@dataclass
class ModelConfig:
    patches: int = 8
    ref_points: int = 8
    patch_dim: int = 32
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 200
    patience: int = 30


@dataclass
class DataConfig:
    train: Optional[str] = None
    val: Optional[str] = None
    test: Optional[str] = None
    synthetic: Optional[str] = None
    synthetic_instances: Optional[int] = None
    split: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    observed_fraction: float = 0.7


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    runs: int = 1
    out_dir: str = Config.RUN_DIR

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["data"]["split"] = list(self.data.split)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return _merge(cls(), data, "").validate()

    def validate(self) -> "RunConfig":
        validate_run_config(self)
        return self


def _coerce(current: Any, value: Any, path: str) -> Any:
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true or false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not float(value).is_integer():
            raise ConfigError(f"'{path}' must be an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{path}' must be a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"'{path}' must be a list, got {value!r}")
        try:
            return tuple(float(v) for v in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"'{path}' must be a list of numbers, got {value!r}") from exc
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"'{path}' must be a string, got {value!r}")
    return value


# Recursively overlays a plain mapping onto a config dataclass, rejecting unknown keys.
def _merge(node, data: Dict[str, Any], prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix or 'config'}' must be a JSON object")
    known = {item.name: item for item in fields(node)}
    updates = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key '{path}'")
        current = getattr(node, key)
        if is_dataclass(current):
            updates[key] = _merge(current, value, f"{path}.")
        else:
            updates[key] = _coerce(current, value, path)
    return replace(node, **updates)


def load_run_config(path: Optional[str] = None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from exc
    return RunConfig.from_dict(data)


def apply_env(config: RunConfig) -> RunConfig:
    raw = os.getenv("TIMECHEAT_SEED")
    if raw is None or raw.strip() == "":
        return config
    try:
        seed = int(raw)
    except ValueError as exc:
        raise ConfigError(f"TIMECHEAT_SEED must be an integer, got {raw!r}") from exc
    return replace(config, seed=seed)


def apply_overrides(config: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides (``model.encoder.mode``); ``None`` values are skipped."""
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        cursor = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            cursor = cursor.setdefault(part, {})
        cursor[parts[-1]] = value
    return _merge(config, nested, "").validate()


# Defaults, then the JSON file, then TIMECHEAT_SEED, then explicit flags.
def resolve_run_config(path: Optional[str], overrides: Dict[str, Any]) -> RunConfig:
    return apply_overrides(apply_env(load_run_config(path)), overrides)


def validate_run_config(config: RunConfig) -> None:
    model, optimizer, data = config.model, config.optimizer, config.data
    if model.patches < 1:
        raise ConfigError(f"model.patches must be >= 1, got {model.patches}")
    if model.ref_points < 1:
        raise ConfigError(f"model.ref_points must be >= 1, got {model.ref_points}")
    if model.patch_dim < 2 or model.patch_dim % 2 != 0:
        raise ConfigError(f"model.patch_dim must be a positive even number, got {model.patch_dim}")
    embedder = model.embedder
    if embedder.layers < 0:
        raise ConfigError(f"model.embedder.layers must be >= 0, got {embedder.layers}")
    if embedder.heads < 1 or embedder.hidden < 1 or embedder.hidden % embedder.heads != 0:
        raise ConfigError(
            f"model.embedder.heads ({embedder.heads}) must divide model.embedder.hidden ({embedder.hidden})"
        )
    encoder = model.encoder
    if encoder.layers < 0:
        raise ConfigError(f"model.encoder.layers must be >= 0, got {encoder.layers}")
    if encoder.heads < 1 or model.patch_dim % encoder.heads != 0:
        raise ConfigError(f"model.encoder.heads ({encoder.heads}) must divide model.patch_dim ({model.patch_dim})")
    if encoder.ffn_dim is not None and encoder.ffn_dim < 1:
        raise ConfigError(f"model.encoder.ffn_dim must be positive, got {encoder.ffn_dim}")
    resolve_mode(encoder.mode)
    if model.head.time_dim < 1 or model.head.decoder_hidden < 1:
        raise ConfigError("model.head widths must be positive")

    if optimizer.lr <= 0:
        raise ConfigError(f"optimizer.lr must be positive, got {optimizer.lr}")
    if not (0.0 <= optimizer.beta1 < 1.0 and 0.0 <= optimizer.beta2 < 1.0):
        raise ConfigError("optimizer betas must lie in [0, 1)")
    if optimizer.batch_size < 1:
        raise ConfigError(f"optimizer.batch_size must be positive, got {optimizer.batch_size}")
    if optimizer.epochs < 1:
        raise ConfigError(f"optimizer.epochs must be positive, got {optimizer.epochs}")
    if optimizer.patience < 1:
        raise ConfigError(f"optimizer.patience must be positive, got {optimizer.patience}")

    if len(data.split) != 3 or any(r <= 0 for r in data.split) or abs(sum(data.split) - 1.0) > 1e-9:
        raise ConfigError(f"data.split must be three positive ratios summing to 1, got {data.split}")
    if not 0.0 < data.observed_fraction < 1.0:
        raise ConfigError(f"data.observed_fraction must lie in (0, 1), got {data.observed_fraction}")
    if data.synthetic_instances is not None and data.synthetic_instances < 1:
        raise ConfigError("data.synthetic_instances must be positive")
    if config.runs < 1:
        raise ConfigError(f"runs must be >= 1, got {config.runs}")
