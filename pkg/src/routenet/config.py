"""Config files (YAML or JSON) with dotted ``key=value`` overrides.

A run config has up to four sections::

    arch:  {family, paths, blocks_per_stack, input: {h, w, c}, classes, seed, ...}
    train: {epochs, batch_size, lr0, momentum, lr_decay_epochs, ...}
    data:  {source: cifar10 | cifar100 | synthetic, dir, per_class, ...}
    introspect: {...}

A file without any section key is read as a bare ``arch`` section.
"""
from __future__ import annotations

from pathlib import Path

import yaml

from .model import ConfigError

SECTIONS = ("arch", "train", "data", "introspect")

DATA_FIELDS = {"source", "dir", "per_class", "val_per_class", "seed", "standardize", "synthetic", "val_synthetic"}


def load_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{p}: cannot parse config: {e}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    if not set(doc) & set(SECTIONS):
        doc = {"arch": doc}
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{p}: unknown sections {sorted(unknown)}; expected {list(SECTIONS)}")
    return doc


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``section.key[.sub]=value`` strings; values are parsed as YAML scalars/lists."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if parts[0] not in SECTIONS or len(parts) < 2:
            raise ConfigError(f"override key {key!r} must start with one of {list(SECTIONS)}")
        node = cfg.setdefault(parts[0], {})
        for p in parts[1:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = _scalar(raw)
    return cfg


def _scalar(raw: str):
    v = yaml.safe_load(raw)
    if isinstance(v, str):
        # YAML 1.1 reads forms like 1e12 as strings
        try:
            return float(v)
        except ValueError:
            pass
    return v


def check_data_section(d: dict) -> dict:
    unknown = set(d) - DATA_FIELDS
    if unknown:
        raise ConfigError(f"unknown data fields: {sorted(unknown)}")
    src = d.get("source", "synthetic")
    if src not in ("cifar10", "cifar100", "synthetic"):
        raise ConfigError(f"data.source must be cifar10, cifar100 or synthetic, got {src!r}")
    return d
