"""Flat ``key=value`` experiment configuration with dotted section keys."""

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .conformer.config import ConformerConfig
from .decoder import DecodeConfig
from .errors import ConfigError, FormatError
from .frontend import FeatureConfig, SpecAugmentPolicy


@dataclass
class DataConfig:
    native: str = ""
    nonnative: str = ""
    cs: str = ""
    cs_dev: str = ""
    lm_text: tuple = ()
    lexicon: str = ""


@dataclass
class PrepareConfig:
    speed_factors: tuple = (0.9, 1.0, 1.1)
    cmvn: str = "global"


@dataclass
class SpecAugConfig(SpecAugmentPolicy):
    enabled: bool = True


@dataclass
class TextConfig:
    bpe_vocab_size: int = 1000


@dataclass
class LmConfig:
    order: int = 2
    smoothing: str = "kneser_ney"
    unk_threshold: int = 1


@dataclass
class MixConfig:
    config: str = "ev"
    cs_fraction: float = 0.5
    nonnative_subsets: tuple = ()
    seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    dropout: float = 0.1
    factor: float = 5.0
    warmup: int = 20000
    alpha: float = 0.3
    frozen: tuple = ()
    patience: int = 0
    max_steps: int = 0
    eval_every: int = 1
    grad_clip: float = 5.0
    decode_mode: str = "attention"


@dataclass
class FinetuneConfig:
    """Unset (None) entries inherit from pre-training; factor and warmup get their own defaults."""

    epochs: int = 20
    batch_size: typing.Optional[int] = None
    dropout: typing.Optional[float] = None
    factor: typing.Optional[float] = None
    warmup: int = 0
    alpha: typing.Optional[float] = None
    frozen: tuple = ()
    patience: int = 3
    max_steps: int = 0
    eval_every: typing.Optional[int] = None


@dataclass
class DecodeSection(DecodeConfig):
    checkpoint: str = "finetune"
    use_lm: bool = True


SECTIONS = {
    "data": DataConfig,
    "features": FeatureConfig,
    "prepare": PrepareConfig,
    "specaug": SpecAugConfig,
    "text": TextConfig,
    "lm": LmConfig,
    "mix": MixConfig,
    "model": ConformerConfig,
    "pretrain": TrainConfig,
    "finetune": FinetuneConfig,
    "decode": DecodeSection,
}
TOP_LEVEL = {"name": str, "seed": int}


@dataclass
class ExperimentConfig:
    name: str = "default"
    seed: int = 0
    sections: dict = field(default_factory=lambda: {k: cls() for k, cls in SECTIONS.items()})
    base_dir: Path = None

    def __getattr__(self, key):
        sections = self.__dict__.get("sections", {})
        if key in sections:
            return sections[key]
        raise AttributeError(key)

    def items(self):
        """Every key with its value in canonical (section, field) order."""
        yield "name", self.name
        yield "seed", self.seed
        for sec, obj in self.sections.items():
            for f in fields(obj):
                yield f"{sec}.{f.name}", getattr(obj, f.name)

    def to_text(self):
        return "".join(f"{k}={_render(v)}\n" for k, v in self.items())

    def fingerprint(self, prefixes):
        """Hash of the keys under ``prefixes``; a stage's identity for drift detection."""
        sel = [f"{k}={_render(v)}" for k, v in self.items()
               if any(k == p or k.startswith(p + ".") for p in prefixes)]
        return hashlib.sha256("\n".join(sel).encode()).hexdigest()

    def path(self, value):
        """Resolve a configured path relative to the config file's directory."""
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() or self.base_dir is None else self.base_dir / p

    def validate(self):
        for key in ("native", "nonnative", "cs", "cs_dev"):
            v = getattr(self.data, key)
            if not v:
                raise ConfigError(f"data.{key} is required")
            if not self.path(v).exists():
                raise ConfigError(f"data.{key}: file {self.path(v)} does not exist")
        for v in self.data.lm_text:
            if not self.path(v).exists():
                raise ConfigError(f"data.lm_text: file {self.path(v)} does not exist")
        if self.data.lexicon and not self.path(self.data.lexicon).exists():
            raise ConfigError(f"data.lexicon: file {self.path(self.data.lexicon)} does not exist")
        if self.decode.checkpoint not in ("pretrain", "finetune"):
            raise ConfigError("decode.checkpoint must be pretrain or finetune")
        return self


def _render(v):
    if isinstance(v, (tuple, list)):
        return ",".join(_render(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return ""
    return str(v)


def _convert(raw, typ, default):
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        if raw == "":
            return None
        typ = next(a for a in typing.get_args(typ) if a is not type(None))
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is tuple:
        items = [x.strip() for x in raw.split(",") if x.strip()]
        sample = default[0] if default else None
        if isinstance(sample, float) or (sample is None and all(_is_number(x) for x in items) and items):
            return tuple(float(x) for x in items)
        return tuple(items)
    if typ in (int, float, str):
        return typ(raw)
    raise ValueError(f"unsupported field type {typ}")


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def parse_config(text, base_dir=None, source="<config>"):
    """Parse flat ``section.key=value`` lines; ``#`` starts a comment."""
    cfg = ExperimentConfig(base_dir=Path(base_dir) if base_dir is not None else None)
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}: expected key=value", lineno, unit="line")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = (value, lineno)
    updates = {sec: {} for sec in SECTIONS}
    for key, (value, lineno) in raw.items():
        try:
            if key in TOP_LEVEL:
                setattr(cfg, key, TOP_LEVEL[key](value))
                continue
            sec, _, name = key.partition(".")
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section {sec!r}")
            flds = {f.name: f for f in fields(SECTIONS[sec])}
            if name not in flds:
                raise ConfigError(f"unknown key {name!r} in section {sec!r}")
            f = flds[name]
            default = f.default if f.default is not dataclasses.MISSING else None
            hints = typing.get_type_hints(SECTIONS[sec])
            updates[sec][name] = _convert(value, hints.get(name, f.type), default)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"{source}: line {lineno}: {key}: {e}") from e
    for sec, vals in updates.items():
        if vals:
            try:
                cfg.sections[sec] = dataclasses.replace(cfg.sections[sec], **vals)
            except (ValueError, TypeError) as e:
                raise ConfigError(f"{source}: section {sec}: {e}") from e
    return cfg


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"), path.parent.resolve(), str(path))
