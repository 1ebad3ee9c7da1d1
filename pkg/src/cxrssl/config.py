"""Flat ``key = value`` configuration files.

Top-level keys configure pre-training; dotted prefixes address the nested
sections: ``encoder.*``, ``crop.*``, ``mask.*``, ``probe.*`` and ``seg.*``.
Tuples are written comma-separated (``crop.global_scale = 0.5, 1.0``).
Lines starting with ``#`` are comments. Unknown or repeated keys are errors.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Tuple

from .augment import CropPolicy, MaskPolicy
from .encoder import EncoderConfig
from .evalsuite import ProbeConfig, SegConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


# crop geometry follows the encoder, so these are not user keys
_DERIVED = {"crop.image_size", "crop.patch_size"}
_SECTIONS = {"encoder": EncoderConfig, "crop": CropPolicy, "mask": MaskPolicy}


@dataclass
class Config:
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    seg: SegConfig = field(default_factory=SegConfig)


def _flatten(cfg: Config) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for f in fields(TrainConfig):
        v = getattr(cfg.train, f.name)
        if f.name in _SECTIONS:
            for sf in fields(v):
                key = f"{f.name}.{sf.name}"
                if key not in _DERIVED:
                    out[key] = getattr(v, sf.name)
        else:
            out[f.name] = v
    for sec in ("probe", "seg"):
        obj = getattr(cfg, sec)
        for f in fields(obj):
            out[f"{sec}.{f.name}"] = getattr(obj, f.name)
    return out


def _defaults() -> Dict[str, object]:
    return _flatten(Config())


def _convert(key: str, raw: str, like):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(float(p) for p in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(like).__name__}") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_pairs(text: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        k, v = (p.strip() for p in s.split("=", 1))
        if k in out:
            raise ConfigError(f"line {lineno}: duplicate key {k!r}")
        out[k] = v
    return out


def build(values: Dict[str, str], base: Config = None) -> Config:
    """Apply string overrides to ``base`` (defaults when omitted) and validate."""
    base = base or Config()
    flat = _flatten(base)
    typed = {}
    for k, raw in values.items():
        if k not in flat:
            raise ConfigError(f"unknown key {k!r}")
        typed[k] = _convert(k, raw, flat[k])
    flat.update(typed)
    try:
        enc = EncoderConfig(**{k[8:]: v for k, v in flat.items() if k.startswith("encoder.")})
        crop = CropPolicy(image_size=enc.image_size, patch_size=enc.patch_size,
                          **{k[5:]: v for k, v in flat.items() if k.startswith("crop.")})
        mask = MaskPolicy(**{k[5:]: v for k, v in flat.items() if k.startswith("mask.")})
        top = {k: v for k, v in flat.items() if "." not in k}
        train = TrainConfig(encoder=enc, crop=crop, mask=mask, **top)
        probe = ProbeConfig(**{k[6:]: v for k, v in flat.items() if k.startswith("probe.")})
        seg = SegConfig(**{k[4:]: v for k, v in flat.items() if k.startswith("seg.")})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return Config(train, probe, seg)


def parse_config(text: str) -> Config:
    return build(parse_pairs(text))


def render_config(cfg: Config) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in _flatten(cfg).items())


def print_defaults() -> str:
    return "# all keys with their default values\n" + render_config(Config())
