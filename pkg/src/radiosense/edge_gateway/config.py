"""Gateway daemon configuration (JSON file with defaults for every field)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class EdgeConfig:
    cache_capacity: int = 200_000  # CqiSamples per link
    reorder_horizon_ms: int = 500
    poll_interval_ms: int = 2000
    backoff_base_ms: int = 250
    backoff_cap_ms: int = 8000
    push_buffer: int = 1000
    request_timeout_s: float = 5.0
    denoise_len: int = 3
    calibration_ms: int | None = None  # defaults to one task window
    sampling_ms: int = 60  # trace cadence before any OTA change
    num_subcarriers: int | None = None
    link_ids: list[int] = field(default_factory=list)
    devices: list[str] = field(default_factory=list)
    models: dict[str, str] = field(default_factory=dict)  # task_id -> model file
    training_sets: dict[str, str] = field(default_factory=dict)  # task_id -> training-set file
    token: str | None = None  # bearer token for private tasks
    exit_on_eof: bool = True

    @classmethod
    def from_json(cls, obj: dict) -> "EdgeConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown edge config keys: {sorted(unknown)}")
        cfg = cls(**obj)
        for name in ("cache_capacity", "poll_interval_ms", "backoff_base_ms", "backoff_cap_ms", "push_buffer", "sampling_ms"):
            if getattr(cfg, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if cfg.reorder_horizon_ms < 0:
            raise ValueError("reorder_horizon_ms must be >= 0")
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "EdgeConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"edge config not found: {p}")
        obj = json.loads(p.read_text(encoding="utf-8"))
        base = p.parent
        cfg = cls.from_json(obj)
        # file references are relative to the config file
        cfg.models = {k: str((base / v).resolve()) for k, v in cfg.models.items()}
        cfg.training_sets = {k: str((base / v).resolve()) for k, v in cfg.training_sets.items()}
        return cfg

    def to_json(self) -> dict:
        return asdict(self)
