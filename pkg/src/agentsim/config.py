"""Benchmark configuration file (JSON) with strict validation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .agent import AgentConfig
from .exceptions import ConfigError

MODES = ("cpu", "gpu", "fpga-agent", "fpga-heuristic", "fpga-oracle")
FORMATS = ("table", "csv", "json")
CONFIG_VERSION = 1


@dataclass
class GeneratorConfig:
    num_blocks: int = 4
    base_channels: int = 16
    input_shape: list = field(default_factory=lambda: [1, 3, 32, 32])
    num_classes: int = 10


@dataclass
class AccuracyConfig:
    enabled: bool = False
    threshold_points: float = 0.5
    calibration_size: int = 128
    fit_samples: int = 1000
    noise: float = 1.0
    weights: str | None = None


@dataclass
class OutputConfig:
    report: str | None = None
    format: str = "table"
    timeline: str | None = None
    qtable: str | None = None


@dataclass
class BenchmarkConfig:
    mode: str = "fpga-agent"
    model: str | None = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    platforms: str = "paper_calibrated"
    agent: AgentConfig | None = field(default_factory=AgentConfig)
    num_images: int = 10000
    rng_seed: int = 0
    heuristic_threshold: float | str = "auto"
    oracle_max_layers: int = 14
    double_buffering: bool = True
    accuracy: AccuracyConfig = field(default_factory=AccuracyConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        self.validate()

    def validate(self, path=None):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}", path, "mode")
        if self.mode == "fpga-agent" and self.agent is None:
            raise ConfigError("fpga-agent mode needs an agent section", path, "agent")
        if not isinstance(self.num_images, int) or self.num_images < 1:
            raise ConfigError("num_images must be a positive integer", path, "num_images")
        if self.oracle_max_layers < 1:
            raise ConfigError("oracle_max_layers must be >= 1", path, "oracle_max_layers")
        th = self.heuristic_threshold
        if not (th == "auto" or (isinstance(th, (int, float)) and not isinstance(th, bool) and th >= 0)):
            raise ConfigError("heuristic_threshold must be 'auto' or a number >= 0", path,
                              "heuristic_threshold")
        if self.outputs.format not in FORMATS:
            raise ConfigError(f"format must be one of {', '.join(FORMATS)}", path, "outputs.format")
        if self.accuracy.threshold_points < 0:
            raise ConfigError("threshold_points must be >= 0", path, "accuracy.threshold_points")
        if self.accuracy.calibration_size < 1 or self.accuracy.fit_samples < 1:
            raise ConfigError("calibration_size and fit_samples must be >= 1", path, "accuracy")
        g = self.generator
        if len(g.input_shape) != 4 or min(g.input_shape) < 1 or g.num_blocks < 0 or g.base_channels < 1:
            raise ConfigError("invalid generator parameters", path, "generator")

    def to_dict(self):
        d = {"version": CONFIG_VERSION}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, AgentConfig):
                v = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                v = asdict(v)
            d[f.name] = v
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d, path=None):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object", path)
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version}", path, "version")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]!r}", path, unknown[0])
        kwargs = {}
        sections = {"generator": GeneratorConfig, "accuracy": AccuracyConfig, "outputs": OutputConfig}
        for name, value in d.items():
            if name in sections:
                kwargs[name] = _section(sections[name], value, path, name)
            elif name == "agent":
                if value is None:
                    kwargs[name] = None
                elif not isinstance(value, dict):
                    raise ConfigError("agent must be an object", path, "agent")
                else:
                    try:
                        kwargs[name] = AgentConfig(**value)
                    except TypeError as exc:
                        raise ConfigError(str(exc), path, "agent") from None
                    except ConfigError as exc:
                        raise ConfigError(exc.message, path, "agent") from None
            else:
                kwargs[name] = value
        if "agent" not in d and kwargs.get("mode", "fpga-agent") == "fpga-agent":
            raise ConfigError("fpga-agent mode needs an agent section", path, "agent")
        try:
            return cls(**kwargs)
        except ConfigError as exc:
            raise ConfigError(exc.message, path, exc.field) from None
        except TypeError as exc:
            raise ConfigError(str(exc), path) from None

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", path) from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", path) from None
        return cls.from_dict(data, path)

    def save(self, path):
        Path(path).write_text(self.to_json())


def _section(kind, value, path, name):
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be an object", path, name)
    allowed = {f.name for f in fields(kind)}
    for key in value:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r}", path, f"{name}.{key}")
    try:
        return kind(**value)
    except TypeError as exc:
        raise ConfigError(str(exc), path, name) from None
