"""Experiment configuration: flat INI sections with strict key checking.

Unknown sections or keys are hard errors, every defaulted field is filled
in, and the fully resolved configuration is what gets echoed into the
output directory before any compute runs.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

DATA_ROOT_ENV = "SCALLA_DATA_ROOT"

METHODS = ("map", "lla-exact", "scalla", "scalla-biased")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "two_moons"  # two_moons | blobs | idx
    n_train: int = 200
    n_test: int = 200
    noise: float = 0.1
    n_context: int = 200
    context_radius: float = 2.5
    n_ood: int = 200
    ood_radius: float = 3.5
    normalize: bool = True
    root: str = ""
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    context_images: str = ""
    context_labels: str = ""
    ood_images: str = ""
    ood_labels: str = ""


@dataclass
class ModelConfig:
    arch: str = "mlp"  # mlp | cnn
    hidden: tuple[int, ...] = (16, 16)
    activation: str = "tanh"
    conv: tuple[tuple[int, int], ...] = ((8, 3),)  # (out_channels, kernel) pairs
    n_classes: int = 2


@dataclass
class MapConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-3
    sigma0: float = 1.0


@dataclass
class PriorConfig:
    sigma0: str = "auto"  # "auto" or a positive float literal
    grid_min: float = 1e-2
    grid_max: float = 1e2
    grid_points: int = 25


@dataclass
class SurrogateSection:
    m: int = 8
    steps: int = 5000
    batch_size: int = 32
    context_batch_size: int = 16
    learning_rate: float = 1e-3
    biased: bool = False
    sketches_per_step: int = 1
    distribution: str = "rademacher"


@dataclass
class EvalConfig:
    methods: tuple[str, ...] = ("map", "lla-exact", "scalla")
    mc_samples: int = 1024
    ece_bins: int = 15


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str = ""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    map: MapConfig = field(default_factory=MapConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    surrogate: SurrogateSection = field(default_factory=SurrogateSection)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def data_root(self) -> str:
        return os.environ.get(DATA_ROOT_ENV, self.dataset.root)


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(part) for part in raw.split(","))


def _parse_conv(raw: str) -> tuple[tuple[int, int], ...]:
    out = []
    for part in raw.split(","):
        channels, _, kernel = part.strip().partition(":")
        out.append((int(channels), int(kernel)))
    return tuple(out)


def _set_field(obj, key: str, raw: str, section: str) -> None:
    name = key.replace("-", "_")
    if not hasattr(obj, name):
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    current = getattr(obj, name)
    label = f"[{section}] {key}"
    if isinstance(current, bool):
        value = _parse_bool(raw, label)
    elif isinstance(current, int):
        value = int(raw)
    elif isinstance(current, float):
        value = float(raw)
    elif name == "hidden":
        value = _parse_int_tuple(raw)
    elif name == "conv":
        value = _parse_conv(raw)
    elif name == "methods":
        value = tuple(part.strip() for part in raw.split(",") if part.strip())
        for method in value:
            if method not in METHODS:
                raise ConfigError(f"{label}: unknown method {method!r}")
    else:
        value = raw.strip()
    setattr(obj, name, value)


_SECTIONS = {
    "dataset": "dataset",
    "model": "model",
    "map": "map",
    "prior": "prior",
    "surrogate": "surrogate",
    "evaluation": "evaluation",
}


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    if "experiment" not in parser or "seed" not in parser["experiment"]:
        raise ConfigError("config must define [experiment] seed")
    exp_keys = set(parser["experiment"].keys())
    unknown = exp_keys - {"seed", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section [experiment]")
    cfg = ExperimentConfig(
        seed=int(parser["experiment"]["seed"]),
        output_dir=parser["experiment"].get("output_dir", ""),
    )

    for section in parser.sections():
        if section == "experiment":
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        target = getattr(cfg, _SECTIONS[section])
        for key, raw in parser[section].items():
            _set_field(target, key, raw, section)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.dataset.kind not in ("two_moons", "blobs", "idx"):
        raise ConfigError(f"unknown dataset kind {cfg.dataset.kind!r}")
    if cfg.model.arch not in ("mlp", "cnn"):
        raise ConfigError(f"unknown model arch {cfg.model.arch!r}")
    if cfg.model.activation not in ("tanh", "relu"):
        raise ConfigError(f"unknown activation {cfg.model.activation!r}")
    if cfg.surrogate.distribution not in ("rademacher", "gaussian"):
        raise ConfigError(f"unknown projection distribution {cfg.surrogate.distribution!r}")
    if cfg.prior.sigma0 != "auto":
        try:
            value = float(cfg.prior.sigma0)
        except ValueError as exc:
            raise ConfigError(f"[prior] sigma0 must be 'auto' or a number") from exc
        if value <= 0:
            raise ConfigError("[prior] sigma0 must be positive")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{a}:{b}" for a, b in value)
        return ",".join(str(v) for v in value)
    return str(value)


def resolved_config_text(cfg: ExperimentConfig) -> str:
    """Full INI text with every default filled in; byte-stable per config."""
    lines = ["[experiment]", f"seed = {cfg.seed}", f"output_dir = {cfg.output_dir}", ""]
    for section, attr in _SECTIONS.items():
        lines.append(f"[{section}]")
        obj = getattr(cfg, attr)
        for name, value in vars(obj).items():
            lines.append(f"{name} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def write_resolved_config(cfg: ExperimentConfig, out_dir, stage: str) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"resolved-config-{stage}.ini"
    path.write_text(resolved_config_text(cfg))
    return path
