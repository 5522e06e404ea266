"""Run configuration: one human-readable key-value document drives a run.

Flags override file values; the effective merged config is archived beside
the run's outputs. The config hash (out_dir excluded, since it is purely an
output location) stamps every artifact manifest so stale upstream artifacts
are detected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import yaml


@dataclass(frozen=True)
class RunConfig:
    # paths
    input_csv: str = ""
    out_dir: str = "out"
    # data
    symbol: str = "AUD/USD"
    interval_minutes: int = 15
    # split
    split_mode: str = "by-ratio"
    train_fraction: float = 0.8
    train_end: str | None = None
    test_start: str | None = None
    gap_hours: float = 24.0
    # windows / features
    input_len_bars: int = 9
    horizon_bars: int = 4
    feature_names: tuple[str, ...] | None = None
    cluster_feature_names: tuple[str, ...] | None = None
    # list of [indicator_name, params] pairs; None means the stock 130+ grid
    indicator_spec: tuple | None = None
    event: str = "oversold"          # "oversold" | "none"
    event_rsi_period: int = 14
    event_low_thresh: float = 30.0
    event_high_thresh: float = 70.0
    # feature ranking
    rank_candidates: tuple[str, ...] | None = None
    rank_epochs: int = 35
    rank_tail: int = 10
    rank_hidden_size: int = 8
    rank_learning_rate: float = 0.2
    rank_batch_size: int = 32
    rank_max_samples: int | None = 2000
    select_top_k: int = 4
    # clustering
    cluster_method: str = "kmeans"   # "kmeans" | "birch"
    n_clusters: int = 8
    kmeans_n_init: int = 1
    birch_threshold: float = 0.1
    # model
    hidden_size: int = 32
    learning_rate: float = 0.1
    epochs: int = 35
    batch_size: int = 32
    val_fraction: float = 0.2
    # strategy
    spread: float | None = None      # None -> per-pair default
    max_leverage: float = 200.0
    initial_capital: float = 10_000.0
    # reproducibility
    seed: int = 0
    # sweep grid: {field_name: [values, ...]}
    sweep: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("feature_names", "cluster_feature_names", "rank_candidates"):
            if data[key] is not None:
                data[key] = list(data[key])
        if data["indicator_spec"] is not None:
            data["indicator_spec"] = [
                [name, dict(params)] for name, params in data["indicator_spec"]
            ]
        return data

    def hash(self) -> str:
        data = self.to_dict()
        data.pop("out_dir", None)  # output location does not change the result
        canonical = json.dumps(data, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return from_dict({**self.to_dict(), **overrides})


_FIELD_NAMES = {f.name for f in fields(RunConfig)}
_TUPLE_FIELDS = ("feature_names", "cluster_feature_names", "rank_candidates")


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - _FIELD_NAMES
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in _TUPLE_FIELDS:
        if data.get(key) is not None:
            data[key] = tuple(data[key])
    for key in ("train_end", "test_start"):
        value = data.get(key)
        if value is not None and not isinstance(value, str):
            data[key] = value.isoformat()  # YAML parses bare dates eagerly
    if data.get("indicator_spec") is not None:
        data["indicator_spec"] = tuple(
            (name, dict(params or {})) for name, params in data["indicator_spec"]
        )
    return RunConfig(**data)


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML/JSON config file (optional) and apply flag overrides."""
    data: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as handle:
            loaded = yaml.safe_load(handle)
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ValueError("config file must be a key-value document")
            data.update(loaded)
    if overrides:
        data.update(overrides)
    return from_dict(data)


def parse_override(text: str):
    """Parse one KEY=VALUE flag override; the value is YAML-typed."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not KEY=VALUE")
    key, _, raw = text.partition("=")
    return key.strip(), yaml.safe_load(raw)
