"""INI run configuration with ``[model]``, ``[train]`` and ``[data]`` sections.

Unknown sections or keys are errors and point at the offending line.

    [model]
    preset = tiny          ; optional, fields below override it
    dim = 32
    depth = 4
    block_design = alt-bi

    [train]
    max_steps = 2000
    batch_size = 64

    [data]
    n_train = 2048
"""

from __future__ import annotations

import configparser
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .backbone import PRESETS, ViLConfig
from .errors import ConfigError


@dataclass
class DataConfig:
    n_train: int = 2048
    n_eval: int = 512
    marker_size: int | None = None
    noise: int = 12
    seed: int = 0
    dir: str | None = None


@dataclass
class TrainConfig:
    model: ViLConfig = field(default_factory=lambda: ViLConfig(image_size=32, patch_size=16, dim=32, depth=4,
                                                               num_classes=8))
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 10
    max_steps: int | None = None
    batch_size: int = 64
    base_lr: float = 1e-3
    lr_scale_divisor: int = 1024
    end_lr: float = 1e-6
    warmup_epochs: float = 1.0
    weight_decay: float = 0.05
    grad_clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    eval_every: int = 100
    log_every: int = 10
    record_timing: bool = True
    precision: str = "f32"
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigError("epochs and max_steps must be non-negative")
        if self.batch_size < 1 or self.lr_scale_divisor < 1:
            raise ConfigError("batch_size and lr_scale_divisor must be positive")
        if self.warmup_epochs < 0 or self.base_lr < 0 or self.end_lr < 0:
            raise ConfigError("learning rates and warmup must be non-negative")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.eval_every < 1 or self.log_every < 1:
            raise ConfigError("eval_every and log_every must be positive")

    @property
    def peak_lr(self) -> float:
        """Linearly scaled learning rate ``base_lr * batch / divisor``."""
        return self.base_lr * self.batch_size / self.lr_scale_divisor


def _convert(raw: str, annotation, where: str):
    tp = annotation
    if isinstance(tp, str):
        try:
            tp = eval(tp, vars(typing), {})
        except NameError:
            tp = str  # enum-like fields are validated by the dataclass itself
    optional = False
    if isinstance(tp, types.UnionType) or typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        optional = len(args) < len(typing.get_args(tp))
        tp = args[0]
    value = raw.strip()
    if optional and value.lower() in ("", "none"):
        return None
    try:
        if tp is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ValueError(value)
            return low in ("true", "1", "yes", "on")
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {getattr(tp, '__name__', tp)}") from None


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    out, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            out[(section, "")] = no
        elif section and s and s[0] not in "#;" and ("=" in s or ":" in s):
            key = s.split("=", 1)[0].split(":", 1)[0].strip().lower()
            out.setdefault((section, key), no)
    return out


def _section_values(cp, section: str, cls, lines, source: str, skip=()) -> dict:
    known = {f.name: f for f in fields(cls)}
    out = {}
    for key, raw in cp.items(section):
        where = f"{source}:{lines.get((section, key), '?')}"
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        out[key] = _convert(raw, known[key].type, where)
    return out


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), default_section="__none__")
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(str(e)) from None
    lines = _key_lines(text)
    for section in cp.sections():
        if section not in ("model", "train", "data"):
            raise ConfigError(f"{source}:{lines.get((section, ''), '?')}: unknown section [{section}]")
    model_kw: dict = {}
    if cp.has_section("model"):
        if cp.has_option("model", "preset"):
            name = cp.get("model", "preset").strip()
            if name not in PRESETS:
                raise ConfigError(f"{source}:{lines.get(('model', 'preset'), '?')}: unknown preset {name!r}")
            model_kw.update(PRESETS[name])
        model_kw.update(_section_values(cp, "model", ViLConfig, lines, source, skip=("preset",)))
    try:
        model = ViLConfig(**model_kw) if model_kw else TrainConfig().model
    except ConfigError as e:
        raise ConfigError(f"{source}: [model] {e}") from None
    data = DataConfig(**(_section_values(cp, "data", DataConfig, lines, source) if cp.has_section("data") else {}))
    train_kw = _section_values(cp, "train", TrainConfig, lines, source) if cp.has_section("train") else {}
    for bad in ("model", "data"):
        if bad in train_kw:
            raise ConfigError(f"{source}: [{bad}] must be its own section")
    try:
        return TrainConfig(model=model, data=data, **train_kw)
    except ConfigError as e:
        raise ConfigError(f"{source}: [train] {e}") from None


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, str(path))


def dump_config(cfg: TrainConfig) -> str:
    """Inverse of :func:`parse_config` for the fields it understands."""
    def fmt(v):
        if v is None:
            return "none"
        if isinstance(v, bool):
            return "true" if v else "false"
        return str(v)

    out = ["[model]"]
    for f in fields(ViLConfig):
        v = getattr(cfg.model, f.name)
        if f.name == "block_design":
            if v.name == "custom":
                raise ConfigError("custom block designs cannot be written to an INI config")
            v = v.name
        elif hasattr(v, "value"):
            v = v.value
        out.append(f"{f.name} = {fmt(v)}")
    out.append("\n[train]")
    for f in fields(TrainConfig):
        if f.name not in ("model", "data"):
            out.append(f"{f.name} = {fmt(getattr(cfg, f.name))}")
    out.append("\n[data]")
    for f in fields(DataConfig):
        out.append(f"{f.name} = {fmt(getattr(cfg.data, f.name))}")
    return "\n".join(out) + "\n"
