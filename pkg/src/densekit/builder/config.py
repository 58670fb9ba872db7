"""Human-readable config files: sectioned key=value, or the JSON equivalent.

    # network spec, one key per line
    [meta]
    spec_version = 1

    [network]
    preset = cifar
    depth = 100
    growth = 12

Recognized sections are ``meta``, ``network``, ``train`` and ``sweep``.
Unknown sections and keys are rejected with their line number.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import re
from pathlib import Path
from typing import Any, Dict, Optional

from densekit.builder.spec import SPEC_VERSION, NetworkSpec, cifar_spec, imagenet_spec, preset
from densekit.errors import ConfigError

SECTIONS = ("meta", "network", "train", "sweep")
# keys accepted in [network] besides NetworkSpec fields
NETWORK_EXTRA = ("preset", "depth")


class Entry(str):
    """A raw string value remembering the line it came from."""

    lineno: Optional[int] = None

    def __new__(cls, value, lineno=None):
        obj = super().__new__(cls, value)
        obj.lineno = lineno
        return obj


def _where(value) -> str:
    line = getattr(value, "lineno", None)
    return f" (line {line})" if line else ""


def _index_lines(text: str) -> Dict[tuple, int]:
    """(section, key) -> line number, for error messages."""
    where, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip().lower()
            where[(section, None)] = n
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), n)
    return where


def parse_text(text: str, fmt: str = "auto") -> Dict[str, Dict[str, Any]]:
    """Parse config text into {section: {key: value}}."""
    stripped = text.lstrip()
    if fmt == "json" or (fmt == "auto" and stripped.startswith("{")):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON at line {e.lineno}: {e.msg}")
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        out: Dict[str, Dict[str, Any]] = {"meta": {}}
        for key, value in data.items():
            if key == "spec_version":
                out["meta"]["spec_version"] = value
            elif key in SECTIONS and isinstance(value, dict):
                out.setdefault(key, {}).update({k.lower(): v for k, v in value.items()})
            else:
                raise ConfigError(f"unknown top-level key {key!r}")
        return out

    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), strict=True, interpolation=None)
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError(f"parse error at line {e.lineno}: key outside any [section]: {e.line.strip()!r}")
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"parse error at line {e.lineno}: duplicate key {e.option!r} in [{e.section}]")
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"parse error at line {e.lineno}: duplicate section [{e.section}]")
    except configparser.ParsingError as e:
        lineno, line = e.errors[0]
        raise ConfigError(f"parse error at line {lineno}: cannot parse {line.strip()!r}")
    lines = _index_lines(text)
    out = {}
    for section in parser.sections():
        name = section.strip().lower()
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] at line {lines.get((name, None))}")
        out[name] = {k: Entry(v, lines.get((name, k))) for k, v in parser.items(section)}
    return out


def load_file(path) -> Dict[str, Dict[str, Any]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}")
    fmt = "json" if path.suffix.lower() == ".json" else "auto"
    cfg = parse_text(text, fmt)
    version = cfg.get("meta", {}).get("spec_version", SPEC_VERSION)
    try:
        version = int(version)
    except (TypeError, ValueError):
        raise ConfigError(f"spec_version: expected an integer, got {version!r}{_where(version)}")
    if version != SPEC_VERSION:
        raise ConfigError(f"spec_version: {version} is not supported (this build reads version {SPEC_VERSION})")
    for key in cfg.get("meta", {}):
        if key != "spec_version":
            raise ConfigError(f"unknown key {key!r} in [meta]{_where(cfg['meta'][key])}")
    return cfg


# ------------------------------------------------------------------ coercion


def _coerce(key: str, value, like):
    """Coerce ``value`` to the type of the default ``like``."""
    if isinstance(value, Entry) or isinstance(value, str):
        raw = str(value).strip()
        try:
            if isinstance(like, bool):
                if raw.lower() in ("1", "true", "yes", "on"):
                    return True
                if raw.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(raw)
            if isinstance(like, int):
                return int(raw)
            if isinstance(like, float):
                return float(raw)
            if isinstance(like, tuple):
                parts = [p for p in re.split(r"[,\s]+", raw.strip("[]() ")) if p]
                if like and isinstance(like[0], float):
                    return tuple(float(p) for p in parts)
                if like and isinstance(like[0], tuple):
                    # list of block lists: "6,12,24,16; 6,12,32,32"
                    return tuple(tuple(int(x) for x in re.split(r"[,\s]+", g.strip("[]() ")) if x)
                                 for g in raw.split(";") if g.strip())
                return tuple(int(p) for p in parts)
            if like is None or isinstance(like, str):
                return None if raw.lower() in ("none", "") and like is None else raw
        except ValueError:
            raise ConfigError(f"{key}: cannot read {raw!r} as {type(like).__name__}{_where(value)}")
        return raw
    if isinstance(like, bool) and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(like, tuple) and isinstance(value, list):
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(like, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def apply_fields(cls, values: Dict[str, Any], section: str, base=None, skip=()):
    """Build (or update) a dataclass instance from raw section values."""
    defaults = base if base is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    changes = {}
    for key, value in values.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]{_where(value)}")
        changes[key] = _coerce(key, value, getattr(defaults, key))
    try:
        return dataclasses.replace(defaults, **changes)
    except ConfigError as e:
        key = str(e).split(":", 1)[0]
        raise ConfigError(f"{e}{_where(values.get(key))}") from None
    except TypeError as e:
        raise ConfigError(f"[{section}] {e}")


# ------------------------------------------------------------------ network specs


def spec_from_section(values: Dict[str, Any]) -> NetworkSpec:
    values = dict(values)
    name = str(values.get("preset", "")).strip().lower()
    defaults = NetworkSpec()

    def take(key, like):
        return _coerce(key, values[key], like) if key in values else None

    if not name:
        if "depth" in values:
            raise ConfigError(f"depth: only valid together with preset = cifar{_where(values['depth'])}")
        base = defaults
    elif name == "cifar":
        depth = take("depth", 0)
        kw = {k: take(k, getattr(defaults, k)) for k in ("growth", "bottleneck_mult", "compression", "classes")
              if k in values}
        blocks = take("blocks", ())
        if depth is None and blocks is None:
            raise ConfigError("depth: preset = cifar needs depth (L = 6M + 4) or blocks")
        base = cifar_spec(depth, layers=blocks[0] if blocks and depth is None else None, **kw)
    elif name == "imagenet":
        blocks = take("blocks", ()) or 121
        base = imagenet_spec(blocks, growth=take("growth", 0) or 32)
    else:
        base = preset(name)
        if "depth" in values:
            raise ConfigError(f"depth: not valid with preset {name!r}{_where(values['depth'])}")
    return apply_fields(NetworkSpec, values, "network", base=base, skip=NETWORK_EXTRA)


def load_spec(path_or_name, overrides: Optional[Dict[str, str]] = None) -> NetworkSpec:
    """Spec from a config file path or a named preset, with key=value overrides."""
    p = Path(str(path_or_name))
    if p.exists():
        cfg = load_file(p)
        values = dict(cfg.get("network", {}))
    else:
        values = {"preset": str(path_or_name)}
    if overrides:
        values.update(overrides)
    return spec_from_section(values)


def dump_spec(spec: NetworkSpec) -> str:
    lines = ["# densekit network spec", "[meta]", f"spec_version = {SPEC_VERSION}", "", "[network]"]
    for key, value in spec.to_dict().items():
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def spec_to_json(spec: NetworkSpec) -> str:
    return json.dumps({"spec_version": SPEC_VERSION, "network": spec.to_dict()}, indent=2, sort_keys=True)


def save_spec(spec: NetworkSpec, path) -> None:
    path = Path(path)
    text = spec_to_json(spec) if path.suffix.lower() == ".json" else dump_spec(spec)
    path.write_text(text)
