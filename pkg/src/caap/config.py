"""Structured text configs (YAML or JSON) mapped onto :class:`RunConfig`.

Keys mirror the RunConfig fields; ``search`` and ``region`` are nested
mappings. Example::

    seed: 3
    epochs: 30
    enable_scaling_transform: true
    search:
      policy_lr: 0.001
      n_ops: 1
    region:
      filter_len: 100
"""

from __future__ import annotations

import json
from pathlib import Path

import yaml

from .pipeline import RunConfig


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    cfg = RunConfig.from_dict(data)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
