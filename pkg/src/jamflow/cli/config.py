"""Flat text run configuration.

One `section.key = value` per line, `#` starts a comment, unknown keys
are errors.  Serialization emits every key in a fixed order with
repr-stable values, so parse -> serialize -> parse is a fixed point and
two configs differing in one knob diff in one line.
"""

import dataclasses
from dataclasses import dataclass, field

from ..data import DropoutSpec
from ..dit import ModelConfig
from ..flow import SamplerConfig


class ConfigError(Exception):
    pass


@dataclass
class TrainConfig:
    stage: str = "2_joint"   # 1_motion | 1_audio | 2_joint
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    ckpt_every: int = 500
    init_audio: str = ""     # stage-1 audio checkpoint for stage 2
    init_motion: str = ""    # stage-1 motion checkpoint for stage 2


@dataclass
class DataConfig:
    corpus_size: int = 256
    corpus_seed: int = 1
    lm_min: int = 16
    lm_max: int = 16
    mask_min_frac: float = 0.3
    mask_max_frac: float = 1.0
    full_mask_prob: float = 0.1
    p_audio: float = 0.1
    p_motion: float = 0.1
    p_text: float = 0.2
    p_rest: float = 0.8


@dataclass
class PathsConfig:
    ckpt_dir: str = "runs/ckpt"
    metrics: str = "runs/metrics.csv"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def dropout_spec(self):
        d = self.data
        return DropoutSpec(d.p_audio, d.p_motion, d.p_text, d.p_rest)

    def validate(self):
        self.model.validate()
        self.dropout_spec().validate()
        if self.train.stage not in ("1_motion", "1_audio", "2_joint"):
            raise ConfigError(f"train.stage must be 1_motion, 1_audio or 2_joint, "
                              f"got '{self.train.stage}'")
        for name, v in (("train.steps", self.train.steps),
                        ("train.batch_size", self.train.batch_size),
                        ("train.ckpt_every", self.train.ckpt_every),
                        ("data.corpus_size", self.data.corpus_size)):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.train.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.train.lr}")
        if self.data.lm_min > self.data.lm_max or self.data.lm_min < 8:
            raise ConfigError(
                f"data.lm_min..lm_max must satisfy 8 <= min <= max, got "
                f"{self.data.lm_min}..{self.data.lm_max}"
            )
        if self.sampler.nfe < 1:
            raise ConfigError(f"sampler.nfe must be >= 1, got {self.sampler.nfe}")
        if self.sampler.cfg_scale < 0:
            raise ConfigError(f"sampler.cfg_scale must be >= 0, got {self.sampler.cfg_scale}")


_SECTIONS = (
    ("model", "model"),
    ("train", "train"),
    ("sampler", "sampler"),
    ("data", "data"),
    ("paths", "paths"),
)


def _coerce(section, key, raw, ftype, line_no):
    raw = raw.strip()
    where = f"line {line_no}: {section}.{key}" if line_no else f"{section}.{key}"
    try:
        if ftype is bool:
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        if ftype is str:
            return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse '{raw}' as {ftype.__name__}") from None
    raise ConfigError(f"{where}: unsupported field type {ftype}")


def _field_map(obj):
    return {f.name: f.type for f in dataclasses.fields(obj)}


def _set_key(rc, dotted, raw, line_no=0):
    if "." not in dotted:
        raise ConfigError(f"line {line_no}: key '{dotted}' is not section.key" if line_no
                          else f"key '{dotted}' is not section.key")
    section, key = dotted.split(".", 1)
    for name, attr in _SECTIONS:
        if name == section:
            sub = getattr(rc, attr)
            fmap = {f.name: f for f in dataclasses.fields(sub)}
            if key not in fmap:
                raise ConfigError(
                    f"line {line_no}: unknown key '{dotted}'" if line_no
                    else f"unknown key '{dotted}'"
                )
            ftype = type(getattr(sub, key))
            setattr(sub, key, _coerce(section, key, raw, ftype, line_no))
            return
    raise ConfigError(f"line {line_no}: unknown section '{section}'" if line_no
                      else f"unknown section '{section}'")


def parse_config(text):
    rc = RunConfig()
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {i}: expected 'section.key = value', got '{line}'")
        dotted, raw = line.split("=", 1)
        _set_key(rc, dotted.strip(), raw, line_no=i)
    return rc


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(rc):
    lines = []
    for name, attr in _SECTIONS:
        sub = getattr(rc, attr)
        for f in dataclasses.fields(sub):
            lines.append(f"{name}.{f.name} = {_fmt(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def apply_overrides(rc, pairs):
    """pairs: iterable of 'section.key=value' strings (from --set)."""
    for p in pairs:
        if "=" not in p:
            raise ConfigError(f"override '{p}' is not section.key=value")
        dotted, raw = p.split("=", 1)
        _set_key(rc, dotted.strip(), raw)
    return rc


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
