"""Typed ``key = value`` configuration files with per-command schemas."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Mapping, Optional, Tuple

from dla.errors import ConfigError

__all__ = [
    "REQUIRED",
    "Key",
    "RunConfig",
    "SCHEMAS",
    "derive_seed",
    "format_value",
    "parse_config",
]


class _Required:
    def __repr__(self):
        return "REQUIRED"


REQUIRED: Any = _Required()


def _tuple_of(kind, n=None):
    def parse(text):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if n is not None and len(parts) != n:
            raise ValueError(f"expected {n} comma-separated values")
        return tuple(kind(p) for p in parts)
    return parse


def _boundaries(text):
    text = text.strip()
    return None if text in ("", "auto") else _tuple_of(int)(text)


def _lr_points(text):
    points = []
    for item in text.split(","):
        epoch, rate = item.split(":")
        points.append((float(epoch), float(rate)))
    if not points:
        raise ValueError("no learning-rate points")
    return tuple(points)


def _optional_str(text):
    text = text.strip()
    return text or None


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    type_name: str


def _k(kind, default):
    table = {
        "int": int, "float": float, "str": str, "bool": _bool, "path?": _optional_str,
        "int3": _tuple_of(int, 3), "int2": _tuple_of(int, 2),
        "float3": _tuple_of(float, 3), "float2": _tuple_of(float, 2),
        "roi?": _optional_str, "boundaries": _boundaries, "lr_points": _lr_points,
    }
    return Key(table[kind], default, kind)


PHANTOM_KEYS = {
    "dims": _k("int3", (96, 96, 64)),
    "spacing_mm": _k("float", 0.46),
    "n_root_branches": _k("int", 2),
    "branch_depth": _k("int", 3),
    "radius_mm": _k("float2", (0.5, 2.5)),
    "vessel_fill_hu": _k("float2", (800.0, 1500.0)),
    "skull_semiaxes_mm": _k("float3", (20.0, 20.0, 13.0)),
    "skull_thickness_mm": _k("float", 4.0),
    "bone_hu": _k("float2", (700.0, 1600.0)),
    "soft_hu": _k("float2", (0.0, 80.0)),
    "aneurysm_count": _k("int2", (0, 2)),
    "aneurysm_radius_mm": _k("float2", (1.0, 2.0)),
    "foramen_gap_mm": _k("float", 1.0),
    "noise_sigma_hu": _k("float", 15.0),
}
MOTION_KEYS = {
    "motion_translation_mm": _k("float3", (0.0, 0.0, 0.0)),
    "motion_rotation_deg_z": _k("float", 0.0),
}
LABELGEN_KEYS = {
    "vessel_threshold_hu": _k("float", 600.0),
    "vessel_min_component_voxels": _k("int", 50),
    "bone_threshold_hu": _k("float", 400.0),
    "bone_min_component_voxels": _k("int", 500),
    "soft_range_hu": _k("float2", (-400.0, 500.0)),
    "erosion_radius_voxels": _k("int", 1),
}
ARCH_KEYS = {
    "conv_layers": _k("int", 8),
    "base_channels": _k("int", 16),
    "stage_boundaries": _k("boundaries", None),
    "patch_size": _k("int", 41),
    "n_slices": _k("int", 5),
    "input_filter": _k("int", 5),
    "pooling": _k("str", "avg"),
}
TRAIN_KEYS = {
    "batch_size": _k("int", 512),
    "momentum": _k("float", 0.9),
    "lr_points": _k("lr_points", ((0.0, 1e-3), (1.0, 1e-4), (1.5, 1e-5))),
    "max_iterations": _k("int", 2000),
    "n_workers": _k("int", 2),
    "eval_interval": _k("int", 100),
    "patience": _k("int", 5),
    "min_delta": _k("float", 0.0),
    "val_subsample": _k("int", 600),
}
SEED = {"seed": _k("int", 0)}

# Desk-scale experiment: skull-base region, position-aware head, small batches, short schedule.
END2END_KEYS = {
    **SEED,
    "n_train": _k("int", 5),
    "n_val": _k("int", 2),
    "n_test": _k("int", 3),
    "test_shift_voxels": _k("float3", (0.0, 0.0, 1.0)),
    "roi": _k("str", "28,68,28,68,2,18"),
    "infer_workers": _k("int", 1),
    "tile_size": _k("int", 512),
    **PHANTOM_KEYS,
    **LABELGEN_KEYS,
    **{**ARCH_KEYS, "pooling": _k("str", "flatten")},
    **{**TRAIN_KEYS, "batch_size": _k("int", 64), "max_iterations": _k("int", 800)},
}

SCHEMAS: Dict[str, Dict[str, Key]] = {
    "phantom": {**SEED, **PHANTOM_KEYS, **MOTION_KEYS},
    "labelgen": {**SEED, **LABELGEN_KEYS, "roi": _k("roi?", None)},
    "train": {**SEED, **ARCH_KEYS, **TRAIN_KEYS},
    "infer": {
        "model": _k("str", REQUIRED), "fill": _k("str", REQUIRED), "roi": _k("roi?", None),
        "out_labels": _k("str", REQUIRED), "out_dla": _k("path?", None),
        "workers": _k("int", 1), "tile_size": _k("int", 512),
    },
    "eval": {"pred": _k("str", REQUIRED), "truth": _k("str", REQUIRED), "out": _k("path?", None)},
    "cohort": {"cases": _k("str", REQUIRED), "out": _k("path?", None)},
    "report": {
        "case_dir": _k("str", REQUIRED), "model": _k("str", REQUIRED), "out": _k("str", REQUIRED),
        "roi": _k("roi?", None), "pred": _k("path?", None), "workers": _k("int", 1),
        **{k: LABELGEN_KEYS[k] for k in ("vessel_threshold_hu",)},
    },
    "end2end": END2END_KEYS,
}


def format_value(value) -> str:
    """Inverse of the schema parsers, so resolved files parse back to the same values."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{e!r}:{r!r}" for e, r in value)
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    command: str
    values: Mapping[str, Any]

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> Optional[int]:
        return self.values.get("seed")

    def to_text(self) -> str:
        lines = [f"# resolved configuration for '{self.command}'"]
        lines += [f"{k} = {format_value(v)}" for k, v in self.values.items()]
        return "\n".join(lines) + "\n"


def _read_pairs(path) -> Iterable[Tuple[str, str, str]]:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        yield key.strip(), value.strip(), f"{path}:{n}"


def _split_override(item: str) -> Tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


def parse_config(command: str, path=None, overrides: Iterable[str] = (),
                 flags: Optional[Mapping[str, Optional[str]]] = None) -> RunConfig:
    """Merge defaults, a config file, command-line flags and ``--set`` overrides.

    Later sources win.  Every key is checked against the command's schema.

    Raises
    ------
    ConfigError
        On an unknown key, a value that does not parse, or a missing required
        key.  The message names the key.
    """
    if command not in SCHEMAS:
        raise ConfigError(f"no configuration schema for command {command!r}")
    schema = SCHEMAS[command]
    raw: Dict[str, Tuple[str, str]] = {}
    if path is not None:
        for key, value, where in _read_pairs(path):
            raw[key] = (value, where)
    for key, value in (flags or {}).items():
        if value is not None:
            raw[key] = (str(value), "command line")
    for item in overrides:
        key, value = _split_override(item)
        raw[key] = (value, "--set")

    values = {}
    for key, (text, where) in raw.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} ({where})")
        try:
            values[key] = schema[key].parse(text)
        except (ValueError, TypeError) as exc:
            raise ConfigError(
                f"config key {key!r}: cannot parse {text!r} as {schema[key].type_name} ({where}): {exc}"
            ) from exc
    resolved = {}
    for key, spec in schema.items():
        if key in values:
            resolved[key] = values[key]
        elif spec.default is REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        else:
            resolved[key] = spec.default
    return RunConfig(command, resolved)


def derive_seed(global_seed: int, stage: str) -> int:
    """Stage seed from the global seed and a stage label, stable across runs and platforms."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
