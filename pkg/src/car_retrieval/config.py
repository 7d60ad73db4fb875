"""Training configuration and its flat ``key = value`` file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .encoders import ModelConfig
from .losses import CircleConfig, MultiLevelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a run.  Field defaults are the full-scale settings;
    :meth:`desk` gives the small preset used for local verification."""

    epochs: int = 100
    base_lr: float = 1e-4
    lr_decay: float = 0.1
    lr_step_epochs: int = 30
    paired_batch: int = 128
    unpaired_batch: int = 256
    loss: str = "circle"
    circle_m: float = 0.25
    circle_gamma: float = 32.0
    circle_pooled: bool = False
    alpha: float = 1.0
    beta: float = 1.0
    sigma: float = 1.0
    adapters_image: bool = True
    adapters_recipe: bool = True
    adapters_description: bool = True
    use_segment_loss: bool = True
    use_description_loss: bool = True
    use_recipe_loss: bool = True
    use_unpaired: bool = True
    d: int = 512
    vocab_size: int = 0  # 0: taken from the corpus
    t_max: int = 32
    backbone_layers: int = 2
    backbone_heads: int = 2
    aggregator_layers: int = 2
    aggregator_heads: int = 4
    bottleneck: int = 64
    max_sentences: int = 15
    max_tokens: int = 20
    instruction_positions: bool = False
    per_pair_projection: bool = False
    shared_token_space: bool = True
    init_std: float = 0.01
    weight_decay: float = 0.0
    grad_clip: float = 0.0  # 0: off
    select_direction: str = "i2r"
    val_subset_size: int = 0  # 0: whole validation split
    val_n_subsets: int = 1
    seed: int = 0

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(epochs=20, paired_batch=32, unpaired_batch=64, d=64, bottleneck=16)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if self.loss not in ("circle", "triplet"):
            raise ConfigError(f"loss must be 'circle' or 'triplet', got {self.loss!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.paired_batch < 2 or self.unpaired_batch < 2:
            raise ConfigError("batch sizes must be at least 2")
        if not 0 < self.bottleneck < self.d:
            raise ConfigError(f"bottleneck must satisfy 0 < bottleneck < d, got {self.bottleneck}, d={self.d}")
        if self.d % self.backbone_heads or self.d % self.aggregator_heads:
            raise ConfigError("d must be divisible by the head counts")
        if self.select_direction not in ("i2r", "r2i"):
            raise ConfigError("select_direction must be i2r or r2i")
        try:
            self.circle()
            self.multi_level()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def circle(self) -> CircleConfig:
        return CircleConfig(self.circle_m, self.circle_gamma, self.circle_pooled)

    def multi_level(self) -> MultiLevelConfig:
        return MultiLevelConfig(self.alpha, self.beta, self.sigma, self.use_segment_loss,
                                self.use_description_loss, self.use_recipe_loss)

    def model(self, vocab_size: int | None = None) -> ModelConfig:
        vocab = self.vocab_size or vocab_size
        if not vocab:
            raise ConfigError("vocab_size is unknown (set it or supply a corpus)")
        names = {f.name for f in fields(ModelConfig)}
        kwargs = {k: v for k, v in asdict(self).items() if k in names}
        kwargs["vocab_size"] = vocab
        return ModelConfig(**kwargs)

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        return replace(self, **coerce_values(overrides))

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in asdict(self).items())


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(name: str, raw):
    kind = _TYPES[name]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def coerce_values(values: dict) -> dict:
    out = {}
    for key, raw in values.items():
        key = key.strip().replace("-", "_")
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _parse(key, raw)
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return coerce_values(values)


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig.desk()
    values = parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))
    return replace(base, **values)
