"""Run configuration: a flat ``key = value`` file with ``[section]`` headers.

Sections and keys are listed in ``docs/config.md``. Unknown sections or keys
are rejected so typos fail loudly instead of silently using a default.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .core import LifParams
from .learn import TP_APPLY, TP_MODES, TrainConfig

DATA_KINDS = ("mnist", "cifar10", "event", "synth")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class RunConfig:
    # [model]
    topology: str = "Cov5*5x28(valid,stride1)-FC1000-FC10"
    init_scale: float = 1.0
    conv_init_scale: float = 3.0
    g: float = 0.2
    v_th: float = 0.5
    v_reset: float = 0.0
    v_rest: float = 0.0
    tau_ref: int = 1
    surrogate_width: float = 0.5
    # [train]
    mode: str = "brp"
    T: int = 20
    alpha: float = 1.0
    polarity: str = "intensity"
    eta_conv: float = 1e-4
    eta_fc: float = 1e-4
    batch: int = 50
    epochs: int = 20
    seed: int = 0
    tp_apply: str = "per_window"
    feedback_scale: str = "unit"
    shuffle: bool = True
    # [data]
    kind: str = "mnist"
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_files: tuple = ()
    test_files: tuple = ()
    train_events: str = ""
    test_events: str = ""
    synth_kind: str = "order2"
    synth_train: int = 200  # per class
    synth_test: int = 100  # per class
    synth_length: int = 16
    num_classes: int = 2
    train_subset: int = 0
    test_subset: int = 0
    # [output]
    out_dir: str = "runs/default"

    def validate(self, check_paths: bool = True) -> RunConfig:
        if self.mode not in TP_MODES:
            raise ConfigError(f"mode must be one of {TP_MODES}, got {self.mode!r}")
        if self.tp_apply not in TP_APPLY:
            raise ConfigError(f"tp_apply must be one of {TP_APPLY}, got {self.tp_apply!r}")
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"kind must be one of {DATA_KINDS}, got {self.kind!r}")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.eta_conv <= 0 or self.eta_fc <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.init_scale <= 0 or self.conv_init_scale <= 0:
            raise ConfigError("init scales must be > 0")
        if self.batch < 1 or self.epochs < 0:
            raise ConfigError("batch must be >= 1 and epochs >= 0")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError("alpha must lie in (0, 1]")
        if self.polarity not in ("intensity", "literal"):
            raise ConfigError("polarity must be 'intensity' or 'literal'")
        if self.feedback_scale not in ("unit", "fan"):
            try:
                float(self.feedback_scale)
            except ValueError:
                raise ConfigError("feedback_scale must be 'unit', 'fan' or a number") from None
        if self.train_subset < 0 or self.test_subset < 0:
            raise ConfigError("subset sizes must be >= 0")
        try:
            self.lif_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.kind == "synth" and (self.synth_train < 1 or self.synth_test < 1):
            raise ConfigError("synth_train and synth_test must be >= 1")
        if check_paths:
            self.check_paths()
        return self

    def data_paths(self) -> list[str]:
        if self.kind == "mnist":
            return [self.train_images, self.train_labels, self.test_images, self.test_labels]
        if self.kind == "cifar10":
            return list(self.train_files) + list(self.test_files)
        if self.kind == "event":
            return [self.train_events, self.test_events]
        return []

    def check_paths(self) -> None:
        from .data import DataFormatError

        for p in self.data_paths():
            if not p:
                raise ConfigError(f"data kind {self.kind!r} needs all of its path keys set")
            if not Path(p).is_file():
                raise DataFormatError(f"dataset file not found: {p}")

    def lif_params(self) -> LifParams:
        return LifParams(g=self.g, v_th=self.v_th, v_reset=self.v_reset, v_rest=self.v_rest,
                         tau_ref=self.tau_ref, surrogate_width=self.surrogate_width)

    def train_config(self) -> TrainConfig:
        return TrainConfig(mode=self.mode, T=self.T, alpha=self.alpha, polarity=self.polarity,
                           eta_conv=self.eta_conv, eta_fc=self.eta_fc, batch=self.batch,
                           seed=self.seed, tp_apply=self.tp_apply,
                           feedback_scale=self.feedback_scale, shuffle=self.shuffle)


SECTIONS = {
    "model": ("topology", "init_scale", "conv_init_scale", "g", "v_th", "v_reset", "v_rest",
              "tau_ref", "surrogate_width"),
    "train": ("mode", "T", "alpha", "polarity", "eta_conv", "eta_fc", "batch", "epochs", "seed",
              "tp_apply", "feedback_scale", "shuffle"),
    "data": ("kind", "train_images", "train_labels", "test_images", "test_labels", "train_files",
             "test_files", "train_events", "test_events", "synth_kind", "synth_train",
             "synth_test", "synth_length", "num_classes", "train_subset", "test_subset"),
    "output": ("out_dir",),
}
_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "tuple":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw.strip()


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case: T is distinct from t
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _coerce(key, raw)
    return replace(base or RunConfig(), **values)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(p.read_text(encoding="utf-8"))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """``{"key": "string value"}`` pairs, as given on the command line."""
    values = {}
    for key, raw in overrides.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, str(raw))
    return replace(cfg, **values)


def dump_config(cfg: RunConfig) -> str:
    d = asdict(cfg)
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for k in keys:
            v = d[k]
            if isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


PRESETS = {
    "mnist": RunConfig(
        topology="Cov5*5x28(valid,stride1)-FC1000-FC10", kind="mnist",
        train_images="data/mnist/train-images-idx3-ubyte",
        train_labels="data/mnist/train-labels-idx1-ubyte",
        test_images="data/mnist/t10k-images-idx3-ubyte",
        test_labels="data/mnist/t10k-labels-idx1-ubyte",
        train_subset=10_000, test_subset=2_000, out_dir="runs/mnist"),
    "cifar10": RunConfig(
        topology="Cov5*5x32-S2-FC1000-FC10", kind="cifar10",
        train_files=tuple(f"data/cifar-10-batches-bin/data_batch_{i}.bin" for i in range(1, 6)),
        test_files=("data/cifar-10-batches-bin/test_batch.bin",),
        out_dir="runs/cifar10"),
    "synth-1d": RunConfig(
        topology="Cov1*3x100-S1-FC1000-FC2", conv_init_scale=1.0, kind="synth",
        synth_kind="order2", num_classes=2, alpha=0.1, eta_fc=3e-3, tp_apply="per_step",
        out_dir="runs/synth-1d"),
    "event-2d": RunConfig(
        topology="Cov5*5x32-S2-FC1000-FC11", kind="event", T=100,
        train_events="data/events/train.txt", test_events="data/events/test.txt",
        out_dir="runs/event-2d"),
}


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return dump_config(PRESETS[name])
