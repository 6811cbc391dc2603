"""Flat ``section.key = value`` run configuration.

File format: one assignment per line, ``#`` starts a comment, blank lines are
ignored.  Every key below is addressable; unknown keys are rejected and all
values are range-checked when the config is validated.
"""

import dataclasses

from .augment import AugmentationConfig
from .data import SplitSpec, SyntheticSpec
from .errors import ConfigError, SkdError
from .model import EncoderConfig, MlpHeadConfig
from .train import FinetuneConfig, PretrainConfig

# section -> (dataclass, {config key: field name})
_SECTIONS = {
    "pretrain": (PretrainConfig, {"lambda": "lam", "K": "num_logits"}),
    "finetune": (FinetuneConfig, {}),
    "augment": (AugmentationConfig, {}),
    "split": (SplitSpec, {}),
    "synthetic": (SyntheticSpec, {}),
}
_NESTED = {"encoder", "head", "augment"}

_MODEL_DEFAULTS = {
    "conv_blocks": EncoderConfig().conv_blocks,
    "in_channels": EncoderConfig().in_channels,
    "hidden_dim": MlpHeadConfig().hidden_dim,
    "output_dim": MlpHeadConfig().output_dim,
}
_DATA_DEFAULTS = {"resize_to": 0}


def _schema():
    schema = {}
    for section, (cls, renames) in _SECTIONS.items():
        inverse = {v: k for k, v in renames.items()}
        for f in dataclasses.fields(cls):
            if f.name in _NESTED and section == "pretrain":
                continue
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            schema[f"{section}.{inverse.get(f.name, f.name)}"] = default
    for key, default in _MODEL_DEFAULTS.items():
        schema[f"model.{key}"] = default
    for key, default in _DATA_DEFAULTS.items():
        schema[f"data.{key}"] = default
    return schema


SCHEMA = _schema()


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if key == "model.conv_blocks":
                blocks = []
                for item in text.split(","):
                    ch, _, stride = item.partition(":")
                    blocks.append((int(ch), int(stride or 1)))
                return tuple(blocks)
            kind = type(default[0])
            return tuple(kind(v) for v in text.split(","))
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_text(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value, SCHEMA[key])
    return values


class RunConfig:
    """Defaults, then a config file, then flag overrides (flags win)."""

    def __init__(self, values=None):
        self.values = dict(SCHEMA)
        if values:
            self.update(values)

    @classmethod
    def load(cls, path=None, overrides=None):
        cfg = cls()
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    cfg.values.update(parse_text(fh.read(), source=path))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
        if overrides:
            cfg.update(overrides)
        cfg.validate()
        return cfg

    def update(self, overrides):
        for key, value in overrides.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            if isinstance(value, str):
                value = _parse_value(key, value, SCHEMA[key])
            self.values[key] = value

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def _build(self, name):
        cls, renames = _SECTIONS[name]
        kwargs = {renames.get(k, k): v for k, v in self.section(name).items()}
        return cls, kwargs

    def augment(self):
        cls, kwargs = self._build("augment")
        return cls(**kwargs)

    def encoder(self):
        aug = self.augment()
        return EncoderConfig(conv_blocks=tuple(self["model.conv_blocks"]),
                             in_channels=self["model.in_channels"], input_size=aug.view_size)

    def head(self):
        return MlpHeadConfig(self["model.hidden_dim"], self["model.output_dim"])

    def pretrain(self):
        cls, kwargs = self._build("pretrain")
        return cls(encoder=self.encoder(), head=self.head(), augment=self.augment(), **kwargs)

    def finetune(self):
        cls, kwargs = self._build("finetune")
        return cls(**kwargs)

    def split(self):
        cls, kwargs = self._build("split")
        return cls(**kwargs)

    def synthetic(self):
        cls, kwargs = self._build("synthetic")
        return cls(**kwargs)

    def validate(self):
        try:
            self.pretrain()
            self.finetune()
            self.split()
            self.synthetic()
        except SkdError as exc:
            raise ConfigError(str(exc)) from exc
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if self["data.resize_to"] < 0:
            raise ConfigError("data.resize_to must be >= 0 (0 keeps the native size)")
        return self

    def dump(self):
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if key == "model.conv_blocks":
                text = ",".join(f"{c}:{s}" for c, s in v)
            elif isinstance(v, tuple):
                text = ",".join(repr(x) for x in v)
            else:
                text = str(v)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"
