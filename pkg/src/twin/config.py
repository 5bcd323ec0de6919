"""Experiment configuration files: loading, validation, hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .datagen import WorldConfig

COMMANDS = ("equivalence", "consistency", "train", "bench", "serve-sim", "length-sweep", "ablation")
GSU_NAMES = ("TwinCP", "SimHard", "SimSoft", "Oracle")
VARIANTS = ("twin", "nobias", "raw")
_NUM = (int, float)


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class ExperimentConfig:
    command: str
    seeds: list[int]
    world: dict = field(default_factory=dict)
    attention: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    serve: dict = field(default_factory=dict)
    consistency: dict = field(default_factory=dict)
    equivalence: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)
    length_sweep: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    source: str = ""

    def canonical(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "source"}
        d.pop("seeds")
        return d

    def world_config(self, seed: int) -> WorldConfig:
        return WorldConfig.from_dict({**self.world, "seed": int(seed)})


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 over the canonical JSON of everything except seeds and file location."""
    text = json.dumps(cfg.canonical(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _load_yaml(path: Path) -> Any:
    try:
        with open(path) as fh:
            return yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError([f"{path}: file not found"]) from None
    except yaml.YAMLError as e:
        raise ConfigError([f"{path}: not valid YAML ({e})"]) from None


def _check_positive(errors, section, d, key, kind=int, allow_zero=False):
    if key not in d:
        return
    v = d[key]
    ok = isinstance(v, kind if kind is not float else _NUM) and not isinstance(v, bool)
    if not ok or (v < 0 if allow_zero else v <= 0):
        errors.append(f"{section}.{key} must be a {'non-negative' if allow_zero else 'positive'} "
                      f"{'integer' if kind is int else 'number'}, got {v!r}")


def _check_list(errors, section, d, key, check):
    if key not in d:
        return
    v = d[key]
    if not isinstance(v, list) or not v:
        errors.append(f"{section}.{key} must be a non-empty list")
        return
    for item in v:
        msg = check(item)
        if msg:
            errors.append(f"{section}.{key}: {msg}")


def _num_ge(lo, strict=False):
    def check(v):
        if isinstance(v, bool) or not isinstance(v, _NUM) or (v <= lo if strict else v < lo):
            return f"{v!r} must be a number {'>' if strict else '>='} {lo}"
        return None
    return check


def _one_of(options):
    def check(v):
        return None if v in options else f"{v!r} is not one of {list(options)}"
    return check


_SECTIONS = {
    "world": {f.name for f in fields(WorldConfig)} - {"seed"},
    "attention": {"d_k", "d_v", "n_heads", "output_dim"},
    "model": {"hidden", "k", "gsu_input_len", "short_term"},
    "train": {"epochs", "batch_size", "lr_embedding", "lr_dense", "adagrad_init", "pretrain_epochs",
              "test_fraction", "gsus", "trace_steps"},
    "serve": {"param_sync_period", "cache_refresh_period", "cache_refresh_periods", "coverage_fraction",
              "drift_rate", "requests", "horizon", "policy", "k"},
    "consistency": {"cases", "n_values", "k", "drift_rate", "stale_minutes"},
    "equivalence": {"instances", "L", "H", "J", "n_heads", "d_k"},
    "bench": {"L", "H", "H_values", "J", "d_k", "d_out", "n_heads", "repeats"},
    "length_sweep": {"lengths"},
    "ablation": {"variants", "flop_L"},
}


def validate_dict(raw: Any, base: Path | None = None) -> list[str]:
    """Every problem found in a parsed config; empty when valid."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        return ["config must be a mapping"]
    known = {"command", "seeds", "world_config"} | set(_SECTIONS)
    for key in sorted(set(raw) - known):
        errors.append(f"unknown top-level key {key!r}")
    cmd = raw.get("command")
    if cmd is not None and cmd not in COMMANDS:
        errors.append(f"unknown command {cmd!r}; expected one of {list(COMMANDS)}")
    if "seeds" not in raw:
        errors.append("missing seeds list")
    else:
        seeds = raw["seeds"]
        if not isinstance(seeds, list) or not seeds:
            errors.append("seeds must be a non-empty list")
        elif any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds):
            errors.append("seeds must be non-negative integers")
        elif len(set(seeds)) != len(seeds):
            errors.append("seeds must be distinct")
    if "world_config" in raw:
        ref = raw["world_config"]
        path = Path(ref) if base is None else base / ref
        if not isinstance(ref, str):
            errors.append("world_config must be a path")
        elif not path.is_file():
            errors.append(f"world_config references a missing file: {path}")
        else:
            try:
                ref_world = _load_yaml(path)
                if not isinstance(ref_world, dict):
                    errors.append(f"{path}: world config must be a mapping")
            except ConfigError as e:
                errors.extend(e.errors)
    for section, allowed in _SECTIONS.items():
        d = raw.get(section, {})
        if d is None:
            continue
        if not isinstance(d, dict):
            errors.append(f"{section} must be a mapping")
            continue
        for key in sorted(set(d) - allowed):
            errors.append(f"unknown key {section}.{key}")

    world = raw.get("world") or {}
    if isinstance(world, dict):
        for key in ("n_users", "n_videos", "n_authors", "n_categories", "n_topics", "mean_behaviors",
                    "min_behaviors", "max_behaviors", "interests_per_user"):
            _check_positive(errors, "world", world, key)
    att = raw.get("attention") or {}
    if isinstance(att, dict):
        for key in ("d_k", "d_v", "n_heads", "output_dim"):
            _check_positive(errors, "attention", att, key)
    model = raw.get("model") or {}
    if isinstance(model, dict):
        for key in ("k", "gsu_input_len"):
            _check_positive(errors, "model", model, key)
        _check_positive(errors, "model", model, "short_term", allow_zero=True)
        if "hidden" in model:
            h = model["hidden"]
            if not (isinstance(h, list) and len(h) == 2 and all(isinstance(x, int) and x > 0 for x in h)):
                errors.append("model.hidden must be two positive integers")
    tr = raw.get("train") or {}
    if isinstance(tr, dict):
        for key in ("epochs", "batch_size"):
            _check_positive(errors, "train", tr, key)
        for key in ("pretrain_epochs", "trace_steps"):
            _check_positive(errors, "train", tr, key, allow_zero=True)
        for key in ("lr_embedding", "lr_dense", "adagrad_init"):
            _check_positive(errors, "train", tr, key, kind=float, allow_zero=True)
        if "test_fraction" in tr and not (isinstance(tr["test_fraction"], _NUM)
                                          and 0 < tr["test_fraction"] < 1):
            errors.append("train.test_fraction must be in (0, 1)")
        _check_list(errors, "train", tr, "gsus", _one_of(GSU_NAMES))
    sv = raw.get("serve") or {}
    if isinstance(sv, dict):
        _check_positive(errors, "serve", sv, "param_sync_period", kind=float)
        if "cache_refresh_period" in sv:
            v = sv["cache_refresh_period"]
            if isinstance(v, bool) or not isinstance(v, _NUM) or v < 0:
                errors.append(f"serve.cache_refresh_period must be >= 0, got {v!r}")
        _check_list(errors, "serve", sv, "cache_refresh_periods", _num_ge(0))
        _check_positive(errors, "serve", sv, "drift_rate", kind=float, allow_zero=True)
        for key in ("requests", "k"):
            _check_positive(errors, "serve", sv, key)
        _check_positive(errors, "serve", sv, "horizon", kind=float)
        if "coverage_fraction" in sv and not (isinstance(sv["coverage_fraction"], _NUM)
                                              and 0 < sv["coverage_fraction"] <= 1):
            errors.append("serve.coverage_fraction must be in (0, 1]")
        if "policy" in sv and sv["policy"] not in ("strict", "compute-on-miss"):
            errors.append("serve.policy must be 'strict' or 'compute-on-miss'")
    cs = raw.get("consistency") or {}
    if isinstance(cs, dict):
        for key in ("cases", "k"):
            _check_positive(errors, "consistency", cs, key)
        _check_positive(errors, "consistency", cs, "drift_rate", kind=float, allow_zero=True)
        _check_positive(errors, "consistency", cs, "stale_minutes", kind=float, allow_zero=True)
        _check_list(errors, "consistency", cs, "n_values", _num_ge(1))
        nv = cs.get("n_values")
        if isinstance(nv, list) and nv != sorted(nv):
            errors.append("consistency.n_values must be ascending")
    eq = raw.get("equivalence") or {}
    if isinstance(eq, dict):
        for key in ("instances", "L", "H", "n_heads", "d_k"):
            _check_positive(errors, "equivalence", eq, key)
        _check_positive(errors, "equivalence", eq, "J", allow_zero=True)
    bn = raw.get("bench") or {}
    if isinstance(bn, dict):
        for key in ("L", "H", "d_k", "d_out", "n_heads", "repeats"):
            _check_positive(errors, "bench", bn, key)
        _check_positive(errors, "bench", bn, "J", allow_zero=True)
        _check_list(errors, "bench", bn, "H_values", _num_ge(1))
    ls = raw.get("length_sweep") or {}
    if isinstance(ls, dict):
        _check_list(errors, "length_sweep", ls, "lengths", _num_ge(1))
    ab = raw.get("ablation") or {}
    if isinstance(ab, dict):
        _check_list(errors, "ablation", ab, "variants", _one_of(VARIANTS))
        _check_positive(errors, "ablation", ab, "flop_L")

    if not errors and isinstance(world, dict):
        merged = dict(world)
        try:
            WorldConfig.from_dict(merged)
        except (TypeError, ValueError) as e:
            errors.append(f"world: {e}")
    return errors


def validate_config(path) -> list[str]:
    """Schema check of a config file; returns the error list (empty means ok)."""
    path = Path(path)
    try:
        raw = _load_yaml(path)
    except ConfigError as e:
        return e.errors
    return validate_dict(raw, path.parent)


def load_config(path, seeds: list[int] | None = None, command: str | None = None) -> ExperimentConfig:
    """Parse and validate; ``seeds`` overrides the file's list.

    ``command`` is the command being run; a file naming a different one is
    rejected.
    """
    path = Path(path)
    raw = _load_yaml(path)
    if isinstance(raw, dict) and seeds is not None:
        raw = {**raw, "seeds": list(seeds)}
    errors = validate_dict(raw, path.parent)
    if isinstance(raw, dict) and command is not None:
        if command not in COMMANDS:
            errors.append(f"unknown command {command!r}")
        elif raw.get("command", command) != command:
            errors.append(f"config is for {raw['command']!r}, not {command!r}")
        raw = {**raw, "command": command}
    elif isinstance(raw, dict) and "command" not in raw:
        errors.append("missing command")
    if errors:
        raise ConfigError(errors)
    raw = dict(raw)
    world = {}
    if "world_config" in raw:
        world.update(_load_yaml(path.parent / raw.pop("world_config")) or {})
    world.update(raw.pop("world", None) or {})
    try:
        WorldConfig.from_dict(world)
    except (TypeError, ValueError) as e:
        raise ConfigError([f"world: {e}"]) from None
    sections = {k: (raw.get(k) or {}) for k in _SECTIONS if k != "world"}
    return ExperimentConfig(command=raw["command"], seeds=[int(s) for s in raw["seeds"]], world=world,
                            source=str(path), **sections)
