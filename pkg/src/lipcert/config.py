"""INI-style run configuration with typed keys and presets.

Sections ``[model]``, ``[train]``, ``[data]``, ``[certify]``; every key is
optional, unknown sections or keys are errors. Epsilons accept fractions such
as ``36/255`` and are kept as exact rationals until used.
"""
from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction

from .data import MixSpec
from .errors import ConfigError
from .layers import normalize_mechanism
from .train import TrainConfig

PRESETS = {
    # L blocks, D channels, dense stack depth x width
    "desk": {"blocks": 4, "channels": 64, "dense_depth": 8, "dense_width": 256},
    "full": {"blocks": 12, "channels": 512, "dense_depth": 8, "dense_width": 2048},
}


def parse_fraction(text) -> Fraction:
    try:
        value = Fraction(str(text).strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc
    if value < 0:
        raise ConfigError(f"epsilon must be non-negative: {text!r}")
    return value


def parse_eps_list(text) -> list[Fraction]:
    items = [t for t in str(text).replace(";", ",").split(",") if t.strip()]
    if not items:
        raise ConfigError("empty epsilon list")
    return [parse_fraction(t) for t in items]


@dataclass
class ModelSection:
    arch: str = "mlp"  # mlp | liresnet
    preset: str = "desk"
    mechanism: str = "cholesky_residual"
    width: int = 16
    depth: int = 4
    blocks: int | None = None
    channels: int | None = None
    dense_depth: int | None = None
    dense_width: int | None = None
    kernel: int = 3
    spatial_blocks: int = 0
    groups: int = 1

    def resolved(self):
        base = dict(PRESETS[self.preset])
        for k in base:
            if getattr(self, k) is not None:
                base[k] = getattr(self, k)
        return base


@dataclass
class TrainSection:
    epsilon_train: Fraction = Fraction(108, 255)
    epochs: int = 10
    batch_size: int = 256
    mix: str = "1:0"
    lr: float | None = None
    momentum: float = 0.9
    ramp: float = 0.5
    method: str = "tight"
    seed: int = 0
    steps_per_epoch: int | None = None


@dataclass
class DataSection:
    task: str = "moons"  # moons | images | files
    n_train: int = 600
    n_test: int = 600
    margin: float = 0.3
    noise: float = 0.08
    image_size: int = 8
    n_classes: int = 4
    train_path: str = ""
    test_path: str = ""
    generated: int = 0
    filter_fraction: float = 0.2
    seed: int = 0


@dataclass
class CertifySection:
    eps: list = field(default_factory=lambda: [Fraction(0), Fraction(36, 255),
                                               Fraction(72, 255), Fraction(108, 255)])
    method: str = "tight"


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    certify: CertifySection = field(default_factory=CertifySection)

    def train_config(self, record_time=True) -> TrainConfig:
        t = self.train
        real, gen = (int(v) for v in t.mix.split(":"))
        return TrainConfig(epsilon_train=float(t.epsilon_train), epochs=t.epochs,
                           mix=MixSpec(real, gen, t.batch_size), lr=t.lr, momentum=t.momentum,
                           ramp=t.ramp, method=t.method, seed=t.seed,
                           eval_eps=tuple(float(e) for e in self.certify.eps),
                           steps_per_epoch=t.steps_per_epoch, record_time=record_time)

    def echo(self) -> dict:
        """JSON-friendly copy (fractions as strings)."""
        def conv(v):
            if isinstance(v, Fraction):
                return str(v)
            if isinstance(v, list):
                return [conv(i) for i in v]
            return v
        return {name: {k: conv(v) for k, v in asdict(getattr(self, name)).items()}
                for name in ("model", "train", "data", "certify")}


_SECTIONS = {"model": ModelSection, "train": TrainSection, "data": DataSection,
             "certify": CertifySection}


def _coerce(cls, key, raw):
    f = {f.name: f for f in fields(cls)}[key]
    kind = str(f.type)
    try:
        if key in ("epsilon_train",):
            return parse_fraction(raw)
        if key == "eps":
            return parse_eps_list(raw)
        if raw.strip().lower() in ("none", "") and "None" in kind:
            return None
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(Fraction(raw.strip()))
        return raw.strip()
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"[{cls.__name__}] {key}: cannot parse {raw!r}") from exc


def validate(cfg: RunConfig):
    m, t, d, c = cfg.model, cfg.train, cfg.data, cfg.certify
    if m.arch not in ("mlp", "liresnet"):
        raise ConfigError(f"model.arch must be mlp or liresnet, got {m.arch!r}")
    if m.preset not in PRESETS:
        raise ConfigError(f"unknown preset {m.preset!r}")
    try:
        m.mechanism = normalize_mechanism(m.mechanism)
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if t.method not in ("naive", "tight") or c.method not in ("naive", "tight", "both"):
        raise ConfigError("method must be naive or tight")
    if d.task not in ("moons", "images", "files"):
        raise ConfigError(f"data.task must be moons, images or files, got {d.task!r}")
    if d.task == "files" and not (d.train_path and d.test_path):
        raise ConfigError("data.task = files needs train_path and test_path")
    if not 0 <= d.filter_fraction < 1:
        raise ConfigError("filter_fraction must lie in [0, 1)")
    if min(d.n_train, d.n_test) < 1 or d.generated < 0:
        raise ConfigError("dataset sizes must be positive")
    return cfg


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, strict=True,
                                       inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        cls = _SECTIONS[section]
        known = {f.name for f in fields(cls)}
        target = getattr(cfg, section)
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(target, key, _coerce(cls, key, raw))
    return validate(cfg)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)
