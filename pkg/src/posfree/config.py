"""Experiment config files: ``key = value`` lines in [synth], [model],
[train], [sweep] and [cost] sections.

Every field of the underlying config dataclasses can be set; unknown
sections or keys are errors that carry the offending line number. Missing
keys take the library defaults, which reproduce the published setup.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .costmodel import TABLE2_SETTINGS, CostConfig
from .errors import ConfigError
from .layers import ModelConfig
from .sweep import SweepGrid
from .synthgen import SynthConfig
from .training import TrainConfig


@dataclass(frozen=True)
class SweepSection:
    e_p_values: tuple[float, ...] = SweepGrid().e_p_values
    sigma_values: tuple[float, ...] = SweepGrid().sigma_values
    trials: int = 5
    master_seed: int = 0

    def __post_init__(self):
        SweepGrid(self.e_p_values, self.sigma_values, self.trials)


@dataclass(frozen=True)
class CostSection:
    """Shared cost settings plus the (hidden_dim, seq_len) pairs to report."""
    num_layers: int = 6
    vocab_size: int = 60_000
    adjacency_mode: str = "dense"
    rank: int = 48
    heads: int = 8
    bytes_per_scalar: int = 4
    settings: tuple[tuple[int, int], ...] = TABLE2_SETTINGS
    budget_bytes: float | None = None

    def __post_init__(self):
        if not self.settings:
            raise ConfigError("cost settings list is empty")
        self.configs()

    def configs(self) -> list[CostConfig]:
        return [CostConfig(num_layers=self.num_layers, hidden_dim=d, seq_len=l, vocab_size=self.vocab_size,
                           adjacency_mode=self.adjacency_mode, rank=self.rank, heads=self.heads,
                           bytes_per_scalar=self.bytes_per_scalar) for d, l in self.settings]


SECTIONS = {"synth": SynthConfig, "model": ModelConfig, "train": TrainConfig,
            "sweep": SweepSection, "cost": CostSection}


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = SynthConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    sweep: SweepSection = SweepSection()
    cost: CostSection = CostSection()
    # (section, key) pairs written explicitly in the source file
    explicit: frozenset = field(default=frozenset(), compare=False)

    def sweep_grid(self) -> SweepGrid:
        s = self.sweep
        return SweepGrid(s.e_p_values, s.sigma_values, s.trials, self.synth, self.model, self.train, s.master_seed)

    def with_(self, **changes) -> "ExperimentConfig":
        current = {f.name: getattr(self, f.name) for f in fields(self)}
        return ExperimentConfig(**{**current, **changes})


# ---------------------------------------------------------------------------
# value codecs, keyed by field name where the type is not a plain scalar
# ---------------------------------------------------------------------------

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _matrix(text: str):
    if text.strip().lower() in ("", "none", "random"):
        return None
    return tuple(_floats(row) for row in text.split(";"))


def _pairs(text: str) -> tuple[tuple[int, int], ...]:
    out = []
    for item in text.split(","):
        d, sep, l = item.strip().partition("/")
        if not sep:
            raise ValueError(f"expected hidden_dim/seq_len, got {item.strip()!r}")
        out.append((int(d), int(l)))
    return tuple(out)


def _optional_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


PARSERS = {"means": _floats, "e_p_values": _floats, "sigma_values": _floats, "transfer": _matrix,
           "settings": _pairs, "budget_bytes": _optional_float}


def _parse_value(default, name: str, text: str):
    if name in PARSERS:
        return PARSERS[name](text)
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def _format_value(name: str, value) -> str:
    if value is None:
        return "none"
    if name == "transfer":
        return "; ".join(", ".join(repr(x) for x in row) for row in value)
    if name == "settings":
        return ", ".join(f"{d}/{l}" for d, l in value)
    if isinstance(value, tuple):
        return ", ".join(repr(x) for x in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _line_of(lines: list[str], section: str, key: str | None = None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the header)."""
    current = None
    for n, line in enumerate(lines, start=1):
        header = re.match(r"\s*\[([^\]]+)\]", line)
        if header:
            current = header.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if current == section and key is not None:
            m = re.match(r"\s*([^=:#;\s][^=:]*?)\s*[=:]", line)
            if m and m.group(1) == key:
                return n
    return None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="\0", strict=True,
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    lines = text.splitlines()

    def where(section, key=None):
        n = _line_of(lines, section, key)
        return f"{source}:{n}" if n else source

    built = {}
    explicit = set()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{where(section)}: unknown section [{section}]; expected one of {sorted(SECTIONS)}")
    for section, cls in SECTIONS.items():
        defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
        values = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in defaults:
                    raise ConfigError(f"{where(section, key)}: unknown key {key!r} in [{section}]; "
                                      f"valid keys: {', '.join(defaults)}")
                try:
                    values[key] = _parse_value(defaults[key], key, raw)
                except ValueError as exc:
                    raise ConfigError(f"{where(section, key)}: bad value for {section}.{key}: {exc}") from None
                explicit.add((section, key))
        try:
            built[section] = cls(**values)
        except (ConfigError, TypeError, ValueError) as exc:
            raise ConfigError(f"{where(section)}: invalid [{section}]: {exc}") from None
    return ExperimentConfig(**built, explicit=frozenset(explicit))


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def format_config(cfg: ExperimentConfig) -> str:
    """Every field of every section; parsing the result gives back ``cfg``."""
    out = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        out.append(f"[{section}]")
        out.extend(f"{f.name} = {_format_value(f.name, getattr(obj, f.name))}" for f in fields(obj))
        out.append("")
    return "\n".join(out)
