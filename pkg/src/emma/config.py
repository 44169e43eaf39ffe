"""Run configuration: one INI-style file of flat ``key = value`` sections.

Every section maps onto a dataclass; unknown keys are rejected by name.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import ModelConfig, TrainConfig
from .regularization import LossWeights
from .tasks import SyntheticTask


class ConfigError(ValueError):
    pass


@dataclass
class TaskSection:
    kind: str = "lexicon-map"
    vocab: int = 64
    min_len: int = 5
    max_len: int = 20
    train_size: int = 50_000
    valid_size: int = 500
    test_size: int = 500
    swap_rate: float = 0.2
    seed: int = 0

    def build(self) -> SyntheticTask:
        return SyntheticTask(**dataclasses.asdict(self))


@dataclass
class OfflineSection:
    steps: int = 4000
    batch_size: int = 32
    learning_rate: float = 3e-3
    warmup: int = 100
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 50
    time_budget: float = 0.0
    target_accuracy: float = 0.995
    eval_every: int = 100

    def build(self) -> TrainConfig:
        return TrainConfig(**dataclasses.asdict(self))


@dataclass
class FinetuneSection:
    steps: int = 400
    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup: int = 50
    clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 25
    absorb_eos: bool = True
    variance_scale: str = "normalized"
    latency_metric: str = "mean_delay"
    nll_reduction: str = "sentence"
    latency_weight: float = 0.5
    variance_weight: float = 0.1
    policy_seed: int = 0

    def build(self) -> TrainConfig:
        skip = {"latency_weight", "variance_weight", "policy_seed"}
        return TrainConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k not in skip})

    def weights(self) -> LossWeights:
        return LossWeights(self.latency_weight, self.variance_weight)


@dataclass
class EvalSection:
    thresholds: list[float] = field(default_factory=lambda: [0.4, 0.5, 0.6, 0.7])
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_size: int = 200
    max_len: int = 0
    wait_k: int = 3
    chunk_seconds: float = 0.0
    example: int = 0


@dataclass
class RunSection:
    output_dir: str = "runs/default"
    offline_checkpoint: str = ""
    checkpoint: str = ""
    sweep_checkpoints: list[str] = field(default_factory=list)
    bench_lengths: list[int] = field(default_factory=lambda: [16, 64, 128, 256, 500])
    bench_p: float = 0.9
    bench_ylen: int = 8


@dataclass
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: OfflineSection = field(default_factory=OfflineSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def sections(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name, section in self.sections().items():
            parser[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.read_string(text)
        cfg = cls()
        known = cfg.sections()
        for name in parser.sections():
            if name not in known:
                raise ConfigError(f"unknown config section [{name}]")
            for key, value in parser[name].items():
                cfg.set(name, key, value)
        return cfg

    @classmethod
    def load(cls, path: Path) -> "RunConfig":
        return cls.from_ini(Path(path).read_text(encoding="utf-8"))

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8", newline="\n")

    def set(self, section: str, key: str, value: str) -> None:
        sections = self.sections()
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        obj = sections[section]
        types = {f.name: f.type for f in fields(obj)}
        if key not in types:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        try:
            setattr(obj, key, _parse(value, types[key]))
        except ValueError as exc:
            raise ConfigError(f"bad value for '{section}.{key}': {value!r}") from exc


def _format(value) -> str:
    if isinstance(value, list):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    text = text.strip()
    if typ.startswith("list["):
        inner = typ[5:-1]
        return [_parse(part, inner) for part in text.split(",") if part.strip()]
    if typ == "bool":
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(text)
    if typ == "int":
        return int(text)
    if typ == "float":
        return float(text)
    return text
