"""INI run configuration mapped onto the library's dataclasses.

Every section corresponds to one dataclass; keys are its field names.
Tuples are written comma separated, booleans as true/false, and ``none``
selects an optional field's null value. Unknown sections or keys are
rejected with the offending line number.
"""

from __future__ import annotations

import configparser
import io
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigError
from .inference import InferenceConfig, JitterSpec
from .metaopt import TrainerConfig
from .segmodel import ArchConfig
from .taskset import AugConfig, SynthConfig


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    workers: int = 1
    out_dir: str = "runs/default"


@dataclass(frozen=True)
class DataSection:
    train: str = "synthetic"          # DAVIS-layout root or "synthetic"
    test: str = "synthetic"
    train_tasks: int = 400
    test_tasks: int = 100
    train_seed: int = 0
    test_seed: int = 1


@dataclass(frozen=True)
class AblateSection:
    rows: Tuple[str, ...] = ("grid_search", "learn_init_global", "neuron_lr", "lovasz",
                             "box_propagation", "online_adaptation", "iters_10", "iters_50")
    baseline_iters: int = 50
    grid: Tuple[float, ...] = (1e-5, 3.1622776601683795e-05, 1e-4, 3.1622776601683794e-04, 1e-3,
                               3.1622776601683795e-03, 1e-2, 3.1622776601683794e-02, 1e-1)
    grid_tasks: int = 20              # held-out tasks used to pick the baseline rate
    grid_seed: int = 2                # seed of the synthetic validation split
    csv: str = "ablation.csv"


# nested members filled from their own sections; seed and workers come from [run]
_NESTED = {"aug", "arch", "jitter"}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    jitter: JitterSpec = field(default_factory=JitterSpec)
    ablate: AblateSection = field(default_factory=AblateSection)

    def resolved(self) -> "RunConfig":
        """Propagate shared sections (arch, aug, jitter, seed, workers) into the nested configs."""
        trainer = replace(self.trainer, arch=self.arch, aug=self.aug, seed=self.run.seed,
                          workers=self.run.workers)
        inference = replace(self.inference, arch=self.arch, jitter=self.jitter, workers=self.run.workers)
        return replace(self, trainer=trainer, inference=inference)


SECTIONS = [f.name for f in fields(RunConfig)]


def _parse_scalar(text: str, tp, where: str):
    t = text.strip()
    if tp is bool:
        low = t.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {text!r}")
    if tp is int:
        try:
            return int(t)
        except ValueError:
            raise ConfigError(f"{where}: expected an integer, got {text!r}") from None
    if tp is float:
        try:
            return float(t)
        except ValueError:
            raise ConfigError(f"{where}: expected a number, got {text!r}") from None
    if tp is str:
        return t
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _parse_value(text: str, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if text.strip().lower() == "none":
            return None
        return _parse_value(text, inner[0], where)
    if origin in (tuple, Tuple):
        items = [s for s in (p.strip() for p in text.split(",")) if s]
        elem = args[0] if args else str
        return tuple(_parse_scalar(s, elem, where) for s in items)
    return _parse_scalar(text, tp, where)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _line_of(text: str, section: str, key: Optional[str] = None) -> int:
    current = None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return n
        elif key is not None and current == section and "=" in line:
            if line.split("=", 1)[0].strip().lower() == key.lower():
                return n
    return 0


def _scalar_fields(cls):
    hints = typing.get_type_hints(cls)
    skip = _NESTED | ({"seed", "workers"} if cls in (TrainerConfig, InferenceConfig) else set())
    return {f.name: hints[f.name] for f in fields(cls) if f.name not in skip}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    base = RunConfig()
    values: Dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}:{_line_of(text, section)}: unknown section [{section}]")
        current = getattr(base, section)
        known = _scalar_fields(type(current))
        updates = {}
        for key, raw in parser.items(section):
            where = f"{source}:{_line_of(text, section, key)}: [{section}] {key}"
            if key not in known:
                raise ConfigError(f"{where}: unknown key")
            updates[key] = _parse_value(raw, known[key], where)
        try:
            values[section] = replace(current, **updates)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: [{section}] {exc}") from None
    cfg = replace(base, **values).resolved()
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    try:
        cfg.arch.validate()
        cfg.synth.validate()
        cfg.trainer.validate()
        cfg.inference.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.run.workers < 1:
        raise ConfigError("[run] workers must be at least 1")


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path)


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved INI text; parsing it yields an equal RunConfig."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {name: _format_value(getattr(obj, name)) for name in _scalar_fields(type(obj))}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply ``section.key=value`` strings on top of ``cfg`` and re-resolve."""
    values: Dict[str, Dict[str, Any]] = {}
    for item in assignments:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"override {item!r}: unknown section [{section}]")
        known = _scalar_fields(type(getattr(cfg, section)))
        if key not in known:
            raise ConfigError(f"override {item!r}: [{section}] {key}: unknown key")
        values.setdefault(section, {})[key] = _parse_value(raw, known[key], f"override [{section}] {key}")
    updated = {s: replace(getattr(cfg, s), **kv) for s, kv in values.items()}
    out = replace(cfg, **updated).resolved()
    validate(out)
    return out
