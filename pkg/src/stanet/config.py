"""Run configuration: one JSON file merging grid, scene, network, training and loss settings.

Example (every key optional; omitted keys keep their defaults)::

    {
      "run_dir": "runs/desk",              // all outputs land here
      "grid": {                             // voxel grid, metres, half-open ranges
        "x_range": [-8, 8], "y_range": [-8, 8], "z_range": [-2, 3.2],
        "resolution": [0.25, 0.25, 0.4]
      },
      "scene": {                            // synthetic scene generator
        "counts": {"vehicle": 3, "pedestrian": 2, "bicycle": 1, "others": 2},
        "duration_frames": 40
      },
      "network": {"variant": "STAN", "scale": 4},   // scale divides size and widths
      "train": {
        "optimizer": "adam", "lr": 0.003, "batch_size": 2, "max_steps": 500,
        "seed": 0, "deterministic": true, "checkpoint_every": 100,
        "gate_threshold": 0.5, "data": "runs/desk/data.vfds"
      },
      "loss_weights": {"motion": 1, "cls": 1, "state": 1,
                       "spatial": 0.5, "f_temporal": 0.5, "b_temporal": 0.5},
      "ablation": {"subset_fraction": 0.2}
    }

The file itself is plain JSON, so the ``//`` notes above are documentation only.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List

from .backbone import NetworkConfig
from .losses import LossWeights
from .scenegen import SceneSpec
from .trainer import TrainConfig
from .voxelizer import DESK_GRID, GridConfig

SECTIONS = ("run_dir", "grid", "scene", "network", "train", "loss_weights", "ablation")


class ConfigFileError(ValueError):
    pass


def default_config() -> Dict[str, Any]:
    """Desk-scale defaults."""
    return {
        "run_dir": "runs/default",
        "grid": DESK_GRID.to_dict(),
        "scene": {},
        "network": {"variant": "STAN", "scale": 4},
        "train": {"lr": 3e-3, "max_steps": 500},
        "loss_weights": {},
        "ablation": {"subset_fraction": 0.2},
    }


@dataclass
class RunConfig:
    run_dir: str
    grid: GridConfig
    scene: SceneSpec
    train: TrainConfig
    subset_fraction: float = 0.2
    raw: Dict[str, Any] = field(default_factory=dict)

    @property
    def network(self) -> NetworkConfig:
        return self.train.network

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.raw)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("counts",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_override(item: str) -> Dict[str, Any]:
    """``a.b=value`` to ``{"a": {"b": value}}``; value is JSON if it parses, else a string."""
    if "=" not in item:
        raise ConfigFileError(f"override {item!r} is not of the form key.path=value")
    path, text = item.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    keys = path.strip().split(".")
    out: Dict[str, Any] = {}
    node = out
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return out


def build_run_config(raw: Dict[str, Any]) -> RunConfig:
    """Validate every section; unknown keys anywhere are an error."""
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigFileError(f"unknown config sections: {sorted(unknown)}")
    try:
        grid = GridConfig.from_dict(raw.get("grid", {}))
        scene = SceneSpec.from_dict(raw.get("scene", {}))
        train_raw = dict(raw.get("train", {}))
        if "network" in train_raw or "loss_weights" in train_raw:
            raise ConfigFileError("network and loss_weights are top-level sections")
        train_raw["network"] = NetworkConfig.from_dict(raw.get("network", {}))
        train_raw["loss_weights"] = LossWeights.from_dict(raw.get("loss_weights", {}))
        train = TrainConfig.from_dict(train_raw)
        ablation = dict(raw.get("ablation", {}))
        frac = float(ablation.pop("subset_fraction", 0.2))
        if ablation:
            raise ConfigFileError(f"unknown ablation keys: {sorted(ablation)}")
        if not 0 < frac <= 1:
            raise ConfigFileError(f"subset_fraction must be in (0, 1], got {frac}")
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigFileError):
            raise
        raise ConfigFileError(str(exc)) from exc
    if train.network.size != grid.H or grid.H != grid.W:
        raise ConfigFileError(
            f"network input side {train.network.size} does not match grid {grid.H}x{grid.W}")
    if train.network.channels[0] != grid.Z:
        raise ConfigFileError(f"network expects {train.network.channels[0]} height bins, grid has {grid.Z}")
    return RunConfig(str(raw.get("run_dir", "runs/default")), grid, scene, train, frac, raw)


def load_run_config(path: str = None, overrides: List[str] = ()) -> RunConfig:
    raw = default_config()
    if path:
        with open(path) as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigFileError(f"{path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigFileError(f"{path}: top level must be an object")
        unknown = set(user) - set(SECTIONS)
        if unknown:
            raise ConfigFileError(f"unknown config sections: {sorted(unknown)}")
        raw = _merge(raw, user)
    for item in overrides:
        raw = _merge(raw, parse_override(item))
    return build_run_config(raw)
