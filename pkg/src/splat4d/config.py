"""Run configuration: INI file plus command-line overrides, and per-stage seed splitting.

Sections and keys mirror the dataclasses below. ``[static]`` and ``[dynamic]``
accept any field of :class:`StaticConfig` / :class:`DynamicConfig`; learning
rates are addressed as ``lr.position`` and so on. Example::

    [scene]
    preset = two-body
    count = 40

    [static]
    steps = 800
    lr.color = 0.03
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .deformation import HEAD_NAMES, DynamicConfig
from .errors import InvalidArgumentError, StorageError
from .scene import PRESETS
from .static_fit import StaticConfig

# stage ids for seed splitting; never renumber
STAGE_IDS = {"synth": 0, "fit-static": 1, "fit-4d": 2, "render": 3, "eval": 4}


def stage_seed(root: int, stage: str) -> int:
    """Seed for one pipeline stage: first 32-bit word of ``SeedSequence([root, stage_id])``."""
    if stage not in STAGE_IDS:
        raise InvalidArgumentError(f"unknown stage {stage!r}")
    return int(np.random.SeedSequence([int(root), STAGE_IDS[stage]]).generate_state(1)[0])


@dataclass
class SceneConfig:
    preset: str = "rigid-translate"
    count: int = 50
    extent: float = 0.6
    background: tuple = (1.0, 1.0, 1.0)


@dataclass
class RigConfig:
    views: int = 8
    times: int = 8
    elevation: float = 0.3
    radius: float = 2.5
    width: int = 64
    height: int = 64
    focal: float = 70.0
    noise: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    scene: SceneConfig = field(default_factory=SceneConfig)
    rig: RigConfig = field(default_factory=RigConfig)
    static: StaticConfig = field(default_factory=lambda: StaticConfig(steps=1500))
    dynamic: DynamicConfig = field(default_factory=DynamicConfig)

    def static_config(self) -> StaticConfig:
        return dataclasses.replace(self.static, seed=stage_seed(self.seed, "fit-static"),
                                   threads=self.threads)

    def dynamic_config(self) -> DynamicConfig:
        return dataclasses.replace(self.dynamic, seed=stage_seed(self.seed, "fit-4d"),
                                   threads=self.threads)

    def as_dict(self) -> dict:
        out = {"seed": self.seed, "threads": self.threads}
        for name in ("scene", "rig", "static", "dynamic"):
            out[name] = dataclasses.asdict(getattr(self, name))
        return out


def _coerce(current, raw: str, key: str):
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float) or current is None:
            return float(raw)
        if isinstance(current, tuple):
            return tuple(float(x) for x in raw.split(","))
        return raw.strip()
    except ValueError:
        raise InvalidArgumentError(f"bad value {raw!r} for {key}") from None


def _apply(section_obj, items: dict, section: str):
    names = {f.name for f in dataclasses.fields(section_obj)}
    changes = {}
    for key, raw in items.items():
        if "." in key:
            group, sub = key.split(".", 1)
            table = getattr(section_obj, group, None)
            if not isinstance(table, dict) or sub not in table:
                raise InvalidArgumentError(f"unknown key [{section}] {key}")
            table = dict(changes.get(group, table))
            table[sub] = _coerce(table[sub], raw, f"[{section}] {key}")
            changes[group] = table
        elif key in names:
            changes[key] = _coerce(getattr(section_obj, key), raw, f"[{section}] {key}")
        else:
            raise InvalidArgumentError(f"unknown key [{section}] {key}")
    return dataclasses.replace(section_obj, **changes)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the INI file at ``path``, then ``overrides`` ({"section.key": "value"})."""
    sections: dict[str, dict] = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise StorageError(f"cannot read config {path}: {exc.strerror or exc}") from None
        except configparser.Error as exc:
            raise InvalidArgumentError(f"malformed config {path}: {exc}".replace("\n", " ")) from None
        for name in parser.sections():
            sections[name] = dict(parser[name])
    for dotted, raw in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        sections.setdefault(section, {})[key] = str(raw)

    cfg = RunConfig()
    for name, items in sections.items():
        if name == "run":
            cfg = _apply(cfg, items, name)
        elif name in ("scene", "rig", "static", "dynamic"):
            setattr(cfg, name, _apply(getattr(cfg, name), items, name))
        else:
            raise InvalidArgumentError(f"unknown config section [{name}]")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.scene.preset not in PRESETS:
        raise InvalidArgumentError(f"unknown preset {cfg.scene.preset!r}; choose from {', '.join(PRESETS)}")
    if cfg.threads < 1:
        raise InvalidArgumentError("threads must be >= 1")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise InvalidArgumentError("seed must be an unsigned 64-bit integer")
    if len(cfg.scene.background) != 3:
        raise InvalidArgumentError("background needs three comma-separated values")
    if cfg.rig.views < 1 or cfg.rig.times < 1:
        raise InvalidArgumentError("rig needs at least one view and one time")
    if set(cfg.dynamic.heads) != set(HEAD_NAMES):
        raise InvalidArgumentError(f"dynamic heads must be exactly {', '.join(HEAD_NAMES)}")


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    """Echo the effective configuration as sorted JSON to ``config.resolved``."""
    path = Path(out_dir) / "config.resolved"
    try:
        path.write_text(json.dumps(cfg.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc.strerror or exc}") from None
    return path
