"""JSON wire objects exchanged between gateways, the cloud and subscribers.

Floats are written with Python's shortest round-trip ``repr`` (the
``json`` module default), so a parse/serialise cycle is value-exact.
Validation errors carry a field path such as ``devices[0].features``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .behavior_features import EXTRA_KEYS
from .cqi_core import CqiType
from .inference import LatentEstimate


class WireError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


def _req(obj: dict, key: str, path: str):
    if not isinstance(obj, dict):
        raise WireError(path, "expected object")
    if key not in obj:
        raise WireError(f"{path}.{key}" if path else key, "missing field")
    return obj[key]


def _int(v, path: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise WireError(path, "expected integer")
    return v


def _str(v, path: str) -> str:
    if not isinstance(v, str) or not v:
        raise WireError(path, "expected non-empty string")
    return v


def _float(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise WireError(path, "expected number")
    f = float(v)
    if not math.isfinite(f):
        raise WireError(path, "expected finite number")
    return f


def _floats(v, path: str) -> list[float]:
    if not isinstance(v, list):
        raise WireError(path, "expected array of numbers")
    return [_float(x, f"{path}[{i}]") for i, x in enumerate(v)]


@dataclass(frozen=True)
class DeviceFeatures:
    device_id: str
    link_ids: tuple[int, ...]
    cqi_type: CqiType
    features: tuple[float, ...]
    extra: dict[str, float] | None = None

    def to_json(self) -> dict:
        out = {
            "device_id": self.device_id,
            "link_ids": list(self.link_ids),
            "cqi_type": self.cqi_type.value,
            "features": list(self.features),
        }
        if self.extra is not None:
            out["extra"] = dict(self.extra)
        return out

    @property
    def vector(self) -> np.ndarray:
        """Features plus behavior extras (in canonical key order) as one array."""
        base = np.asarray(self.features, dtype=float)
        if self.extra is None:
            return base
        return np.concatenate([base, [self.extra[k] for k in EXTRA_KEYS]])


@dataclass(frozen=True)
class FeatureMessage:
    gw_id: str
    task_id: str
    timestamp_ms: int
    window_start_ms: int
    window_end_ms: int
    devices: tuple[DeviceFeatures, ...]
    sent_at: float | None = None  # sender wall clock, ms since the Unix epoch

    def to_json(self) -> dict:
        out = {
            "gw_id": self.gw_id,
            "task_id": self.task_id,
            "timestamp_ms": self.timestamp_ms,
            "window": {"start_ms": self.window_start_ms, "end_ms": self.window_end_ms},
            "devices": [d.to_json() for d in self.devices],
        }
        if self.sent_at is not None:
            out["sent_at"] = self.sent_at
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, obj: Any) -> "FeatureMessage":
        return parse_feature_message(obj)


def parse_feature_message(obj: Any, expected_P: int | dict[str, int] | None = None) -> FeatureMessage:
    """Validate and parse a feature message.

    ``expected_P`` (an int, or a per-device map) checks the feature lengths.
    """
    if not isinstance(obj, dict):
        raise WireError("", "expected JSON object")
    gw_id = _str(_req(obj, "gw_id", ""), "gw_id")
    task_id = _str(_req(obj, "task_id", ""), "task_id")
    ts = _int(_req(obj, "timestamp_ms", ""), "timestamp_ms")
    win = _req(obj, "window", "")
    start = _int(_req(win, "start_ms", "window"), "window.start_ms")
    end = _int(_req(win, "end_ms", "window"), "window.end_ms")
    if end < start:
        raise WireError("window", "end_ms before start_ms")
    if not start <= ts <= end:
        raise WireError("timestamp_ms", "outside window")
    devs = _req(obj, "devices", "")
    if not isinstance(devs, list) or not devs:
        raise WireError("devices", "expected non-empty array")
    parsed = []
    seen = set()
    for i, d in enumerate(devs):
        p = f"devices[{i}]"
        dev_id = _str(_req(d, "device_id", p), f"{p}.device_id")
        if dev_id in seen:
            raise WireError(f"{p}.device_id", "duplicate device")
        seen.add(dev_id)
        links = _req(d, "link_ids", p)
        if not isinstance(links, list):
            raise WireError(f"{p}.link_ids", "expected array of integers")
        links = tuple(_int(x, f"{p}.link_ids[{j}]") for j, x in enumerate(links))
        try:
            ctype = CqiType(_req(d, "cqi_type", p))
        except ValueError:
            raise WireError(f"{p}.cqi_type", "expected one of PHY, UP, IQ") from None
        feats = _floats(_req(d, "features", p), f"{p}.features")
        want = expected_P.get(dev_id) if isinstance(expected_P, dict) else expected_P
        if isinstance(expected_P, dict) and want is None:
            raise WireError(f"{p}.device_id", f"no model for device {dev_id!r}")
        if want is not None and len(feats) != want:
            raise WireError(f"{p}.features", f"expected {want}")
        extra = d.get("extra")
        if extra is not None:
            if not isinstance(extra, dict):
                raise WireError(f"{p}.extra", "expected object")
            missing = [k for k in EXTRA_KEYS if k not in extra]
            if missing:
                raise WireError(f"{p}.extra.{missing[0]}", "missing field")
            extra = {k: _float(extra[k], f"{p}.extra.{k}") for k in EXTRA_KEYS}
        parsed.append(DeviceFeatures(dev_id, links, ctype, tuple(feats), extra))
    sent_at = obj.get("sent_at")
    if sent_at is not None:
        sent_at = _float(sent_at, "sent_at")
    return FeatureMessage(gw_id, task_id, ts, start, end, tuple(parsed), sent_at)


@dataclass(frozen=True)
class EstimateMessage:
    """A latent estimate as seen on the wire."""

    task_id: str
    gw_ids: tuple[str, ...]
    timestamp_ms: int
    estimate: str
    posteriors: dict[str, float]
    seq: int | None = None
    sent_at: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "task_id": self.task_id,
            "gw_ids": list(self.gw_ids),
            "timestamp_ms": self.timestamp_ms,
            "estimate": self.estimate,
            "posteriors": dict(self.posteriors),
        }
        if self.seq is not None:
            out["seq"] = self.seq
        if self.sent_at is not None:
            out["sent_at"] = self.sent_at
        out.update(self.extra)
        return out

    @classmethod
    def from_estimate(cls, est: LatentEstimate, sent_at: float | None = None) -> "EstimateMessage":
        return cls(
            task_id=est.task_id,
            gw_ids=tuple(est.gw_ids),
            timestamp_ms=int(est.timestamp_ms),
            estimate=est.label,
            posteriors={lab: float(p) for lab, p in zip(est.labels, est.posteriors)},
            seq=est.seq,
            sent_at=sent_at,
        )


def check_posteriors(labels: Sequence[str], probs: Sequence[float], estimate: str, path: str = "posteriors") -> None:
    """Boundary check: a valid distribution whose argmax (lowest index on ties) is ``estimate``."""
    p = np.asarray(probs, dtype=float)
    if p.size < 2:
        raise WireError(path, "need at least two labels")
    if np.any(p < 0) or np.any(p > 1):
        raise WireError(path, "entries must lie in [0, 1]")
    if abs(p.sum() - 1.0) > 1e-9:
        raise WireError(path, "must sum to 1")
    if labels[int(np.argmax(p))] != estimate:
        raise WireError("estimate", "is not the argmax of posteriors")


def parse_estimate(obj: Any) -> EstimateMessage:
    if not isinstance(obj, dict):
        raise WireError("", "expected JSON object")
    task_id = _str(_req(obj, "task_id", ""), "task_id")
    gws = _req(obj, "gw_ids", "")
    if not isinstance(gws, list) or not gws:
        raise WireError("gw_ids", "expected non-empty array")
    gws = tuple(_str(g, f"gw_ids[{i}]") for i, g in enumerate(gws))
    ts = _int(_req(obj, "timestamp_ms", ""), "timestamp_ms")
    est = _str(_req(obj, "estimate", ""), "estimate")
    post = _req(obj, "posteriors", "")
    if not isinstance(post, dict):
        raise WireError("posteriors", "expected object")
    probs = {str(k): _float(v, f"posteriors.{k}") for k, v in post.items()}
    check_posteriors(list(probs), list(probs.values()), est)
    seq = obj.get("seq")
    if seq is not None:
        seq = _int(seq, "seq")
    sent_at = obj.get("sent_at")
    if sent_at is not None:
        sent_at = _float(sent_at, "sent_at")
    known = {"task_id", "gw_ids", "timestamp_ms", "estimate", "posteriors", "seq", "sent_at"}
    extra = {k: v for k, v in obj.items() if k not in known}
    return EstimateMessage(task_id, gws, ts, est, probs, seq, sent_at, extra)


def dumps(obj) -> str:
    return json.dumps(obj.to_json() if hasattr(obj, "to_json") else obj)
