"""
Run configuration: one INI-style key-value file, overridable per key.

Sections map onto the module configs::

    [run]          RunSettings
    [encoder]      EncoderConfig
    [mixup]        MixupConfig
    [propagation]  PropagationConfig
    [generator]    GeneratorSpec

Overrides use ``section.key=value``. Unknown sections or keys, unparsable
values and cross-field inconsistencies raise :class:`ConfigError` naming the
key before any computation starts.
"""

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field, fields, replace

from .encoder import EncoderConfig
from .errors import ConfigError
from .hsidata import GeneratorSpec
from .mixup import MixupConfig
from .pseudolabel import PropagationConfig


@dataclass(frozen=True)
class RunSettings:
    seed: int = 0
    trials: int = 20
    n_way: int = 0  # 0 -> min(C_S, C_T)
    k_shot: int = 5
    q_query: int = 15
    k_s: int = 3
    k_q: int = 2
    source_episodes: int = 800
    warmup_episodes: int = 600
    source_lr: float = 0.05
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 5.0
    e_outer: int = 5
    e_inner: int = 100
    split_steps: int = 5
    target_queries: int = 512
    topk: int = 0  # 0 -> q_query
    pca_bands: int = 50
    workers: int = 1

    def __post_init__(self):
        positive = ("trials", "k_shot", "q_query", "k_s", "k_q", "e_outer", "pca_bands",
                    "workers", "target_queries")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"run.{name}")
        for name in ("n_way", "source_episodes", "warmup_episodes", "e_inner", "split_steps",
                     "topk", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", f"run.{name}")
        if self.n_way == 1:
            raise ConfigError("episodes need at least two classes", "run.n_way")
        for name in ("source_lr", "lr", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", f"run.{name}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must lie in [0, 1)", "run.momentum")
        if self.k_s + self.k_q != self.k_shot:
            raise ConfigError(f"k_s + k_q = {self.k_s + self.k_q} must equal k_shot = "
                              f"{self.k_shot}", "run.k_s")

    @property
    def topk_per_class(self):
        return self.topk or self.q_query


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mixup: MixupConfig = field(default_factory=MixupConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)

    def __post_init__(self):
        if self.encoder.bands != self.run.pca_bands:
            raise ConfigError(f"encoder.bands={self.encoder.bands} must equal run.pca_bands="
                              f"{self.run.pca_bands}", "encoder.bands")
        if self.run.pca_bands > self.generator.bands:
            raise ConfigError(f"cannot reduce {self.generator.bands} bands to "
                              f"{self.run.pca_bands}", "run.pca_bands")
        extent = 2 * self.generator.patch_radius + 1
        if self.encoder.patch_extent != extent:
            raise ConfigError(f"encoder.patch_extent={self.encoder.patch_extent} must equal "
                              f"2 * generator.patch_radius + 1 = {extent}",
                              "encoder.patch_extent")
        if self.mixup.total_steps != self.run.e_outer:
            raise ConfigError("mixup.total_steps must equal run.e_outer (one schedule step "
                              "per outer epoch)", "mixup.total_steps")
        if self.run.n_way > min(self.generator.source_classes, self.generator.target_classes):
            raise ConfigError("n_way exceeds the smaller class count", "run.n_way")

    @property
    def n_way(self):
        return self.run.n_way or min(self.generator.source_classes,
                                     self.generator.target_classes)


SECTIONS = {f.name: f for f in fields(RunConfig)}


def _parse(value, kind, key):
    try:
        if kind is bool or kind == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int or kind == "int":
            return int(value)
        return float(value)
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {getattr(kind, '__name__', kind)}",
                          key) from None


def _section_values(cfg_obj):
    return {f.name: getattr(cfg_obj, f.name) for f in fields(cfg_obj)}


def build_config(values):
    """``values``: {section: {key: str}} -> validated RunConfig."""
    parts = {}
    for name, fdef in SECTIONS.items():
        base = fdef.default_factory()
        raw = dict(values.get(name, {}))
        kw = {}
        types = {f.name: f.type for f in fields(base)}
        for key, value in raw.items():
            if key not in types:
                raise ConfigError("unknown key", f"{name}.{key}")
            kw[key] = _parse(value, types[key], f"{name}.{key}")
        try:
            parts[name] = replace(base, **kw)
        except TypeError as e:
            raise ConfigError(str(e), name) from None
    for name in values:
        if name not in SECTIONS:
            raise ConfigError("unknown section", name)
    if "total_steps" not in values.get("mixup", {}):
        parts["mixup"] = replace(parts["mixup"], total_steps=parts["run"].e_outer)
    return RunConfig(**parts)


def parse_overrides(overrides):
    out = {}
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value", item)
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        out.setdefault(section, {})[name] = value.strip()
    return out


def load_config(path=None, overrides=None):
    values = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as e:
            raise ConfigError(f"malformed config: {e}", str(path)) from None
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", str(path)) from None
        values = {s: dict(parser[s]) for s in parser.sections()}
    for section, kv in parse_overrides(overrides).items():
        values.setdefault(section, {}).update(kv)
    return build_config(values)


def dump_config(cfg):
    """Canonical INI text (every key, fixed order)."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        sub = getattr(cfg, name)
        parser[name] = {k: repr(v) if isinstance(v, float) else str(v)
                        for k, v in _section_values(sub).items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def config_digest(cfg):
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]


def with_overrides(cfg, **sections):
    """Programmatic override: ``with_overrides(cfg, run={"trials": 2})``."""
    parts = {name: getattr(cfg, name) for name in SECTIONS}
    for name, kw in sections.items():
        parts[name] = dataclasses.replace(parts[name], **kw)
    return RunConfig(**parts)
