"""Run configuration: a YAML key-path tree validated against a defaults tree.

Every key has a default; the resolved config therefore documents itself and
re-parsing it yields the same tree.
"""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from datetime import datetime
from pathlib import Path

import yaml

from .evaluation import ABLATIONS
from .grid import BBox, GridSpec, PatternKind, SparsePatternSpec
from .pipeline import TrainConfig, config_hash

COMMANDS = ("synth", "ingest", "mask", "pretrain", "train", "reconstruct", "eval", "ablate", "export")

_PATH = object()  # marker: optional path string


def _train_defaults() -> dict:
    d = TrainConfig().to_dict()
    d.pop("seed")  # the top-level seed drives training
    return d


DEFAULTS = {
    "seed": 0,
    "grid": {
        "rows": 8,
        "cols": 8,
        "magnification": 2,
        "bbox": [39.82, 39.9966, 116.2498, 116.495],
        "interval": 3600.0,
        "start_time": "2013-07-01T00:00:00",
    },
    "synth": {
        "steps": 480,
        "periods": [24, 48],
        "amplitudes": [0.5, 0.2],
        "hotspots": 10,
        "noise": 1.0,
    },
    "ingest": {"steps": 24},
    "sparse": {"kind": "random", "missing_ratio": 0.4, "seed": 7},
    "split": {"fractions": [2, 1, 1], "eval_on": "test"},
    "train": _train_defaults(),
    "ablate": {"variant": "noPre"},
    "export": {"step": 0, "cmap": "viridis"},
    "paths": {
        "data": _PATH,
        "records": _PATH,
        "observed": _PATH,
        "mask": _PATH,
        "checkpoint": _PATH,
        "prediction": _PATH,
        "truth": _PATH,
        "holidays": _PATH,
    },
}

# inputs each command cannot run without
REQUIRED = {
    "synth": (),
    "ingest": ("paths.records",),
    "mask": ("paths.data",),
    "pretrain": ("paths.data",),
    "train": ("paths.data",),
    "reconstruct": ("paths.checkpoint", "paths.observed", "paths.mask"),
    "eval": ("paths.checkpoint", "paths.data"),
    "ablate": ("paths.data",),
    "export": ("paths.prediction",),
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _check_type(path: str, default, value):
    if default is _PATH:
        if value is None or isinstance(value, str):
            return value
        raise ConfigError(path, f"expected a path string, got {type(value).__name__}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(path, f"expected bool, got {type(value).__name__}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(path, f"expected int, got {type(value).__name__}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(path, f"expected number, got {type(value).__name__}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        # YAML turns bare timestamps into datetime objects
        if isinstance(value, datetime):
            return value.isoformat()
        raise ConfigError(path, f"expected string, got {type(value).__name__}")
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected list, got {type(value).__name__}")
        proto = default[0]
        return [_check_type(f"{path}[{i}]", proto, v) for i, v in enumerate(value)]
    raise TypeError(f"no type rule for {path}")


def _merge(path: str, defaults: dict, given) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(path or "<root>", f"expected a mapping, got {type(given).__name__}")
    out = {}
    for key in given:
        if key not in defaults:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")
    for key, default in defaults.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(default, dict):
            out[key] = _merge(sub, default, given.get(key, {}) or {})
        elif key in given:
            out[key] = _check_type(sub, default, given[key])
        else:
            out[key] = None if default is _PATH else copy.deepcopy(default)
    return out


def _require(cond: bool, path: str, message: str):
    if not cond:
        raise ConfigError(path, message)


def _validate(cfg: dict) -> None:
    g = cfg["grid"]
    for k in ("rows", "cols", "magnification"):
        _require(g[k] >= 1, f"grid.{k}", "must be >= 1")
    _require(len(g["bbox"]) == 4, "grid.bbox", "expected [lat_min, lat_max, lon_min, lon_max]")
    _require(g["bbox"][0] < g["bbox"][1] and g["bbox"][2] < g["bbox"][3], "grid.bbox", "bounds out of order")
    _require(g["interval"] > 0, "grid.interval", "must be positive")
    try:
        datetime.fromisoformat(g["start_time"])
    except ValueError:
        raise ConfigError("grid.start_time", f"not an ISO timestamp: {g['start_time']!r}") from None

    s = cfg["synth"]
    _require(s["steps"] >= 2, "synth.steps", "must be >= 2")
    _require(len(s["periods"]) == len(s["amplitudes"]) >= 1, "synth.amplitudes", "needs one amplitude per period")
    _require(all(p >= 2 for p in s["periods"]), "synth.periods", "periods must be >= 2")
    _require(s["hotspots"] >= 0, "synth.hotspots", "must be >= 0")
    _require(s["noise"] >= 0, "synth.noise", "must be >= 0")
    _require(cfg["ingest"]["steps"] >= 1, "ingest.steps", "must be >= 1")

    sp = cfg["sparse"]
    kinds = [k.value for k in PatternKind]
    _require(sp["kind"] in kinds, "sparse.kind", f"expected one of {kinds}")
    _require(0.0 <= sp["missing_ratio"] <= 1.0, "sparse.missing_ratio", "must lie in [0, 1]")

    sl = cfg["split"]
    _require(len(sl["fractions"]) == 3 and all(f > 0 for f in sl["fractions"]), "split.fractions",
             "expected three positive weights")
    _require(sl["eval_on"] in ("train", "val", "test", "all"), "split.eval_on", "expected train, val, test or all")

    tr = cfg["train"]
    for f in fields(TrainConfig):
        if f.name in tr and isinstance(tr[f.name], (int, float)) and not isinstance(tr[f.name], bool):
            _require(tr[f.name] >= 0, f"train.{f.name}", "must be >= 0")
    _require(tr["schedule_kind"] in ("linear", "cosine"), "train.schedule_kind", "expected linear or cosine")
    _require(0 < tr["beta_start"] <= tr["beta_end"] < 1, "train.beta_start", "need 0 < beta_start <= beta_end < 1")
    _require(tr["d_model"] % max(tr["heads"], 1) == 0, "train.heads", "must divide train.d_model")
    try:
        TrainConfig(**tr)
    except ValueError as e:
        name = str(e).split()[0]
        raise ConfigError(f"train.{name}", str(e)) from None

    _require(cfg["ablate"]["variant"] in ABLATIONS, "ablate.variant", f"expected one of {list(ABLATIONS)}")
    _require(cfg["export"]["step"] >= 0, "export.step", "must be >= 0")


def resolve(raw: dict | None) -> dict:
    """Validate a raw tree and fill in every default."""
    cfg = _merge("", DEFAULTS, raw or {})
    _validate(cfg)
    return cfg


def parse_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError("--config", f"invalid YAML: {e}") from None
    return resolve(raw)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)


def run_hash(cfg: dict) -> str:
    return config_hash(json.loads(json.dumps(cfg)))


def check_required(command: str, cfg: dict) -> None:
    for dotted in REQUIRED[command]:
        section, key = dotted.split(".")
        if not cfg[section][key]:
            raise ConfigError(dotted, f"required by `{command}`")


# typed views


def grid_spec(cfg: dict) -> GridSpec:
    g = cfg["grid"]
    return GridSpec(g["rows"], g["cols"], g["magnification"], BBox(*g["bbox"]), g["interval"])


def start_time(cfg: dict) -> datetime:
    return datetime.fromisoformat(cfg["grid"]["start_time"])


def pattern_spec(cfg: dict) -> SparsePatternSpec:
    s = cfg["sparse"]
    return SparsePatternSpec(s["kind"], s["missing_ratio"], s["seed"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])
