"""One nested config for every module, loaded from YAML with dotted overrides.

Defaults follow the full-scale setting; the ``desk`` preset shrinks the
model, clip shape and run lengths to something a laptop CPU can train.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .schedule import NoiseSchedule
from .training import TrainConfig
from .unet3d import UNet3DConfig

log = logging.getLogger(__name__)

PRESETS = ("full", "desk")
_EXP_FLOAT = re.compile(r"[-+]?\d+(\.\d*)?[eE][-+]?\d+")


class ConfigError(ValueError):
    pass


@dataclass
class SamplerSection:
    solver: str = "heun"
    t_i: int = 15
    guidance_scale: float = 7.0
    num_samples: int = 1
    preview_gif: bool = False


@dataclass
class PseudoSection:
    bins: int = 64
    epsilon: float = 1e-3
    max_iters: int = 50_000
    tol: float = 1e-6
    overrelaxation: float = 1.95
    hist_max_videos: int | None = None


@dataclass
class DataSection:
    format: str = "toy-container"
    frames: int = 24
    height: int = 128
    width: int = 128
    loop: bool = False
    toy_num_videos: int = 500
    toy_test_videos: int = 50
    toy_labels: int = 4


@dataclass
class EvalSection:
    samples_per_condition: int = 10
    methods: list[str] = field(default_factory=lambda: ["free-echo", "sdedit", "cls-free"])
    t_values: list[int] = field(default_factory=lambda: [15, 35, 55])
    max_conditions: int | None = None
    extractor_seed: int = 2024
    with_l2: bool = False


# section name -> (dataclass, keys that live elsewhere and are not accepted here)
_SECTIONS = {
    "schedule": (NoiseSchedule, ()),
    "model": (UNet3DConfig, ()),
    "training": (TrainConfig, ("seed",)),
    "sampler": (SamplerSection, ()),
    "pseudo": (PseudoSection, ()),
    "data": (DataSection, ()),
    "eval": (EvalSection, ()),
}


@dataclass
class Config:
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    model: UNet3DConfig = field(default_factory=lambda: UNet3DConfig.full(in_channels=1))
    training: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    pseudo: PseudoSection = field(default_factory=PseudoSection)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    preset: str = "full"

    def to_dict(self) -> dict:
        out = {"preset": self.preset, "seed": self.seed}
        for name, (_, skip) in _SECTIONS.items():
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: v for k, v in sec.items() if k not in skip}
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.training, seed=self.seed)


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose one of {PRESETS}")
    base = Config().to_dict()
    if name == "desk":
        base["preset"] = "desk"
        base["model"] = dataclasses.asdict(UNet3DConfig.desk())
        base["training"].update(batch_size=8, total_iterations=1500, checkpoint_every=500, log_every=50)
        base["data"].update(frames=8, height=32, width=32, toy_num_videos=80, toy_test_videos=16)
        base["eval"].update(t_values=[16, 54], methods=["free-echo", "sdedit"])
    return base


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} is a section; expected a mapping")
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _build(tree: dict) -> Config:
    kw = {"seed": tree["seed"], "preset": tree["preset"]}
    for name, (cls, _) in _SECTIONS.items():
        try:
            kw[name] = cls(**tree[name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} section: {exc}") from exc
    if not isinstance(kw["seed"], int):
        raise ConfigError("seed must be an integer")
    cfg = Config(**kw)
    _check(cfg)
    return cfg


def _check(cfg: Config) -> None:
    s = cfg.sampler
    if s.solver not in ("euler", "heun"):
        raise ConfigError(f"sampler.solver must be 'euler' or 'heun', got {s.solver!r}")
    if not 0 <= s.t_i <= cfg.schedule.num_steps:
        raise ConfigError(f"sampler.t_i={s.t_i} outside [0, {cfg.schedule.num_steps}]")
    if s.guidance_scale < 0 or s.num_samples < 1:
        raise ConfigError("sampler.guidance_scale must be >= 0 and sampler.num_samples >= 1")
    if cfg.pseudo.bins < 2 or cfg.pseudo.epsilon <= 0:
        raise ConfigError("pseudo.bins must be >= 2 and pseudo.epsilon > 0")
    bad = [t for t in cfg.eval.t_values if not 1 <= t <= cfg.schedule.num_steps]
    if bad:
        raise ConfigError(f"eval.t_values {bad} outside [1, {cfg.schedule.num_steps}]")
    if cfg.eval.samples_per_condition < 1:
        raise ConfigError("eval.samples_per_condition must be positive")
    try:
        cfg.model.check_input_shape(cfg.data.frames, cfg.data.height, cfg.data.width)
    except ValueError as exc:
        raise ConfigError(f"model/data shape mismatch: {exc}") from exc


def _numeric(value):
    # YAML 1.1 reads "1e-4" (no dot) as a string
    if isinstance(value, str) and _EXP_FLOAT.fullmatch(value.strip()):
        return float(value)
    if isinstance(value, dict):
        return {k: _numeric(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_numeric(v) for v in value]
    return value


def parse_override(item: str) -> tuple[list[str], object]:
    """``"training.learning_rate=1e-4"`` -> (["training", "learning_rate"], 1e-4)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key!r}: {exc}") from exc
    return parts, _numeric(value)


def _nest(parts: list[str], value) -> dict:
    out: dict = {parts[-1]: value}
    for p in reversed(parts[:-1]):
        out = {p: out}
    return out


def load_config(path=None, overrides=(), preset: str | None = None) -> Config:
    """Merge ``preset`` (or the file's ``preset`` key, default ``full``),
    the YAML file at ``path`` and ``key=value`` overrides, in that order.
    Unknown keys anywhere raise :class:`ConfigError`."""
    user: dict = {}
    if path is not None:
        p = Path(path)
        try:
            user = yaml.safe_load(p.read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {p}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{p} must hold a mapping at the top level")
        user = _numeric(user)
    name = preset or user.get("preset", "full")
    tree = _merge(preset_dict(name), {k: v for k, v in user.items() if k != "preset"})
    tree["preset"] = name
    for item in overrides:
        parts, value = parse_override(item)
        log.info("override %s = %r", ".".join(parts), value)
        tree = _merge(tree, _nest(parts, value))
    return _build(tree)
