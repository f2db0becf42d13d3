"""Run configuration, presets and ``--set key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .compositing import AugmentConfig, SceneConfig
from .perception import NetworkConfig
from .supervision import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    algorithm: str = "adamw"
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    epochs: int = 0  # used when steps == 0
    steps: int = 3000
    batch_size: int = 4
    grad_clip: float = 10.0
    warmup_steps: int = 0


@dataclass
class RunConfig:
    model: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: SceneConfig = field(default_factory=SceneConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    dataset: str | None = None
    num_scenes: int = 64
    seed: int = 0
    select_threshold: float = 0.5
    log_every: int = 1
    checkpoint_every: int = 500

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e

    def total_steps(self, dataset_size: int | None = None) -> int:
        if self.optim.steps > 0:
            return self.optim.steps
        n = dataset_size if dataset_size is not None else self.num_scenes
        per_epoch = -(-n // self.optim.batch_size)
        return self.optim.epochs * per_epoch

    def validate(self) -> None:
        try:
            self.model.validate()
            self.data.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.data.max_instances > self.model.queries:
            raise ConfigError("scenes may hold more instances than there are queries")
        if self.optim.algorithm != "adamw" or self.optim.schedule != "cosine":
            raise ConfigError("only adamw with a cosine schedule is supported")
        if self.total_steps() <= 0:
            raise ConfigError("training needs optim.steps > 0 or optim.epochs > 0")


def _build(cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` assignments; values are parsed as JSON when possible."""
    d = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config section {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return RunConfig.from_dict(d)


def toy_preset() -> RunConfig:
    """Desk-scale overfit setting: C=64, N=8, S=2, 128x128 scenes with 1-4 instances."""
    return RunConfig()


def paper_preset() -> RunConfig:
    """The published training recipe (needs real data and GPUs to be meaningful)."""
    return RunConfig(
        model=NetworkConfig.paper(),
        loss=LossWeights(),
        data=SceneConfig(height=640, width=640, max_instances=12),
        augment=AugmentConfig.paper(crop=640, max_instances=20),
        optim=OptimConfig(lr=8e-5, betas=(0.9, 0.999), weight_decay=5e-4, epochs=40, steps=0, batch_size=4),
    )


PRESETS = {"toy": toy_preset, "paper": paper_preset}
