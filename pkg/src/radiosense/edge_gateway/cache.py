"""Bounded per-link sample cache with a reordering horizon.

Samples arriving out of order are inserted in timestamp order if they lag
the link's newest sample by at most the horizon; older ones are dropped
and counted.  Each link keeps at most ``capacity`` samples, evicting the
oldest.  Reads return fresh :class:`CqiSeries` copies.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from ..cqi_core import BackgroundProfile, CqiSample, CqiSeries, CqiType, is_complex_type


@dataclass
class CacheCounters:
    accepted: int = 0
    late_dropped: int = 0
    evicted: int = 0
    malformed: int = 0


class LinkBuffer:
    """Time-sorted samples of one (device, link) stream, bounded in size."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._times: list[int] = []
        self._samples: list[CqiSample] = []
        self._head = 0  # index of the oldest live sample

    def __len__(self) -> int:
        return len(self._times) - self._head

    @property
    def newest_ms(self) -> int | None:
        return self._times[-1] if len(self) else None

    @property
    def oldest_ms(self) -> int | None:
        return self._times[self._head] if len(self) else None

    def insert(self, sample: CqiSample) -> int:
        """Insert in time order; returns the number of evicted samples."""
        t = sample.time_ms
        if not self._times or t >= self._times[-1]:
            self._times.append(t)
            self._samples.append(sample)
        else:
            i = bisect.bisect_right(self._times, t, lo=self._head)
            self._times.insert(i, t)
            self._samples.insert(i, sample)
        evicted = max(0, len(self) - self.capacity)
        self._head += evicted
        if self._head > max(1024, self.capacity):
            del self._times[: self._head]
            del self._samples[: self._head]
            self._head = 0
        return evicted

    def range(self, start_ms: int, end_ms: int) -> list[CqiSample]:
        lo = bisect.bisect_left(self._times, start_ms, lo=self._head)
        hi = bisect.bisect_left(self._times, end_ms, lo=lo)
        return self._samples[lo:hi]


@dataclass
class _DeviceStreams:
    cqi_type: CqiType
    links: dict[int, LinkBuffer] = field(default_factory=dict)


class EdgeCache:
    """Raw CQI buffers plus per-task calibration profiles, models and backlogs."""

    def __init__(self, capacity: int = 200_000, reorder_horizon_ms: int = 500):
        self.capacity = capacity
        self.reorder_horizon_ms = reorder_horizon_ms
        self.devices: dict[str, _DeviceStreams] = {}
        self.counters = CacheCounters()
        self.profiles: dict[str, dict[str, BackgroundProfile]] = {}
        self.profile_versions: dict[str, int] = {}
        self.models: dict = {}  # task_id -> TaskArtifacts
        self.model_versions: dict[str, int] = {}
        self.backlog: dict[str, dict[str, list[np.ndarray]]] = {}

    def add(self, device_id: str, sample: CqiSample) -> bool:
        dev = self.devices.get(device_id)
        if dev is None:
            dev = self.devices[device_id] = _DeviceStreams(CqiType(sample.cqi_type))
        elif CqiType(sample.cqi_type) is not dev.cqi_type:
            self.counters.malformed += 1
            return False
        buf = dev.links.get(sample.link_id)
        if buf is None:
            buf = dev.links[sample.link_id] = LinkBuffer(self.capacity)
        newest = buf.newest_ms
        if newest is not None and sample.time_ms < newest - self.reorder_horizon_ms:
            self.counters.late_dropped += 1
            return False
        self.counters.evicted += buf.insert(sample)
        self.counters.accepted += 1
        return True

    def sample_count(self) -> int:
        return sum(len(b) for d in self.devices.values() for b in d.links.values())

    def watermark(self, devices=None) -> int | None:
        """Oldest among the newest timestamps of the selected devices' links."""
        newest = [
            b.newest_ms
            for name, d in self.devices.items()
            if devices is None or name in devices
            for b in d.links.values()
            if len(b)
        ]
        return min(newest) if newest else None

    def earliest(self, devices=None) -> int | None:
        oldest = [
            b.oldest_ms
            for name, d in self.devices.items()
            if devices is None or name in devices
            for b in d.links.values()
            if len(b)
        ]
        return min(oldest) if oldest else None

    def snapshot(
        self,
        device_id: str,
        start_ms: int,
        end_ms: int,
        sampling_ms: int,
        link_ids=None,
        num_subcarriers: int | None = None,
    ) -> CqiSeries:
        """Dense copy of ``[start_ms, end_ms)`` for one device (missing cells are NaN)."""
        dev = self.devices.get(device_id)
        if dev is None:
            raise KeyError(f"no samples cached for device {device_id!r}")
        links = sorted(dev.links) if link_ids is None else [int(x) for x in link_ids]
        rows = {lid: dev.links[lid].range(start_ms, end_ms) if lid in dev.links else [] for lid in links}
        all_samples = [s for r in rows.values() for s in r]
        if not all_samples:
            raise ValueError(f"device {device_id!r} has no samples in [{start_ms}, {end_ms})")
        times = np.array(sorted({s.time_ms for s in all_samples}), dtype=np.int64)
        F = num_subcarriers or max(s.freq_index for s in all_samples) + 1
        cplx = is_complex_type(dev.cqi_type)
        values = np.full((F, len(links), times.size), np.nan, dtype=np.complex128 if cplx else np.float64)
        tpos = {int(t): i for i, t in enumerate(times)}
        for j, lid in enumerate(links):
            for s in rows[lid]:
                if s.freq_index < F:
                    values[s.freq_index, j, tpos[s.time_ms]] = s.value
        return CqiSeries(device_id, dev.cqi_type, tuple(links), times, values, sampling_ms)

    def set_profiles(self, task_id: str, profiles: dict[str, BackgroundProfile]) -> int:
        """Replace the task's per-device profiles; returns the new version."""
        version = self.profile_versions.get(task_id, 0) + 1
        self.profiles[task_id] = {
            d: BackgroundProfile(p.mean, p.std, p.calibration_window, p.link_ids, version) for d, p in profiles.items()
        }
        self.profile_versions[task_id] = version
        return version

    def set_model(self, task_id: str, model) -> int:
        self.models[task_id] = model
        self.model_versions[task_id] = self.model_versions.get(task_id, 0) + 1
        return self.model_versions[task_id]

    def add_training(self, task_id: str, label: str, vector: np.ndarray) -> None:
        self.backlog.setdefault(task_id, {}).setdefault(label, []).append(np.asarray(vector, dtype=float).copy())
