"""Raw CQI data types, trace I/O and pre-manipulation.

A :class:`CqiSeries` stores the CQI of one reporting device as a dense
``(F, L, N_t)`` array (subcarrier, link, time).  Missing packets are NaN.
Flattening is C-order over that shape, i.e. freq-major, then link, then
time, so ``v = (m * L + j) * N_t + t``.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd


class CqiType(str, Enum):
    PHY = "PHY"  # complex CSI per subcarrier
    UP = "UP"  # real, RSSI in dBm or LQI
    IQ = "IQ"  # complex raw features, stored only


class TaskType(str, Enum):
    DETECTION = "detection"
    LOCALIZATION = "localization"
    ACTIVITY = "activity"


class FeatureRecipe(str, Enum):
    PCA = "PCA"
    PCA_PEAK_PHASE = "PCA_PEAK_PHASE"


class InsufficientStreamError(ValueError):
    pass


class UncalibratedError(ValueError):
    pass


TRACE_HEADER = ("time_ms", "device_id", "link_id", "freq_index", "cqi_type", "re", "im")


def is_complex_type(cqi_type: CqiType) -> bool:
    return CqiType(cqi_type) in (CqiType.PHY, CqiType.IQ)


@dataclass(frozen=True)
class CqiSample:
    value: complex | float
    freq_index: int
    link_id: int
    time_ms: int
    cqi_type: CqiType

    def __post_init__(self):
        if self.freq_index < 0:
            raise ValueError("freq_index must be >= 0")
        if CqiType(self.cqi_type) is CqiType.UP and isinstance(self.value, complex):
            raise ValueError("UP samples carry a real value")


@dataclass(frozen=True)
class Layout:
    F: int
    L: int
    Nt: int

    @property
    def V(self) -> int:
        return self.F * self.L * self.Nt

    def to_json(self) -> dict:
        return {"F": self.F, "L": self.L, "Nt": self.Nt}

    @classmethod
    def from_json(cls, obj: dict) -> "Layout":
        return cls(int(obj["F"]), int(obj["L"]), int(obj["Nt"]))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CqiSeries:
    """CQI of one device: ``values[m, j, t]`` for subcarrier m, link j, time t."""

    device_id: str
    cqi_type: CqiType
    link_ids: tuple[int, ...]
    times_ms: np.ndarray
    values: np.ndarray
    sampling_ms: int

    def __post_init__(self):
        object.__setattr__(self, "cqi_type", CqiType(self.cqi_type))
        object.__setattr__(self, "link_ids", tuple(int(x) for x in self.link_ids))
        times = np.asarray(self.times_ms, dtype=np.int64)
        dtype = np.complex128 if is_complex_type(self.cqi_type) else np.float64
        values = np.asarray(self.values, dtype=dtype)
        if values.ndim != 3:
            raise ValueError("values must have shape (F, L, N_t)")
        if values.shape[1] != len(self.link_ids) or values.shape[2] != times.size:
            raise ValueError(
                f"values shape {values.shape} does not match "
                f"{len(self.link_ids)} links x {times.size} times"
            )
        if values.size == 0:
            raise ValueError("empty series (V = 0)")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if self.sampling_ms <= 0:
            raise ValueError("sampling_ms must be positive")
        object.__setattr__(self, "times_ms", _frozen(times))
        object.__setattr__(self, "values", _frozen(values))

    @property
    def layout(self) -> Layout:
        F, L, Nt = self.values.shape
        return Layout(F, L, Nt)

    @property
    def num_subcarriers(self) -> int:
        return self.values.shape[0]

    @property
    def start_ms(self) -> int:
        return int(self.times_ms[0])

    @property
    def end_ms(self) -> int:
        """Exclusive end: last timestamp plus one sampling interval."""
        return int(self.times_ms[-1]) + self.sampling_ms

    @property
    def span_ms(self) -> int:
        return self.end_ms - self.start_ms

    def replace(self, **changes) -> "CqiSeries":
        kwargs = dict(
            device_id=self.device_id,
            cqi_type=self.cqi_type,
            link_ids=self.link_ids,
            times_ms=self.times_ms,
            values=self.values,
            sampling_ms=self.sampling_ms,
        )
        kwargs.update(changes)
        return CqiSeries(**kwargs)

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1).copy()

    def unflatten(self, vector: np.ndarray) -> "CqiSeries":
        return self.replace(values=np.asarray(vector).reshape(self.values.shape))

    def select_time(self, start_ms: int, end_ms: int) -> "CqiSeries":
        """Samples with ``start_ms <= t < end_ms``."""
        mask = (self.times_ms >= start_ms) & (self.times_ms < end_ms)
        if not mask.any():
            raise ValueError(f"no samples in [{start_ms}, {end_ms})")
        return self.replace(times_ms=self.times_ms[mask], values=self.values[:, :, mask])

    def select_links(self, link_ids: Iterable[int]) -> "CqiSeries":
        wanted = [int(x) for x in link_ids]
        idx = [self.link_ids.index(x) for x in wanted]
        return self.replace(link_ids=tuple(wanted), values=self.values[:, idx, :])

    @property
    def samples(self) -> list[CqiSample]:
        out = []
        F, L, Nt = self.values.shape
        for t in range(Nt):
            for j in range(L):
                for m in range(F):
                    v = self.values[m, j, t]
                    if np.isnan(v):
                        continue
                    val = complex(v) if is_complex_type(self.cqi_type) else float(v)
                    out.append(CqiSample(val, m, self.link_ids[j], int(self.times_ms[t]), self.cqi_type))
        return out

    @classmethod
    def from_samples(
        cls,
        samples: Sequence[CqiSample],
        device_id: str,
        sampling_ms: int,
        num_subcarriers: int | None = None,
    ) -> "CqiSeries":
        if not samples:
            raise ValueError("no samples")
        ctype = CqiType(samples[0].cqi_type)
        if any(CqiType(s.cqi_type) is not ctype for s in samples):
            raise ValueError("mixed cqi_type in one series")
        links = sorted({s.link_id for s in samples})
        times = np.array(sorted({s.time_ms for s in samples}), dtype=np.int64)
        F = num_subcarriers or (max(s.freq_index for s in samples) + 1)
        dtype = np.complex128 if is_complex_type(ctype) else np.float64
        values = np.full((F, len(links), times.size), np.nan, dtype=dtype)
        lpos = {lid: i for i, lid in enumerate(links)}
        tpos = {int(t): i for i, t in enumerate(times)}
        for s in samples:
            if s.freq_index >= F:
                raise ValueError(f"freq_index {s.freq_index} outside [0, {F - 1}]")
            values[s.freq_index, lpos[s.link_id], tpos[s.time_ms]] = s.value
        return cls(device_id, ctype, tuple(links), times, values, sampling_ms)


@dataclass(frozen=True, eq=False)
class BackgroundProfile:
    """Per-(subcarrier, link) background level of the magnitude representation."""

    mean: np.ndarray  # (F, L)
    std: np.ndarray  # (F, L)
    calibration_window: tuple[int, int]
    link_ids: tuple[int, ...] = ()
    version: int = 1

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != std.shape:
            raise ValueError("mean/std shape mismatch")
        if np.any(std < 0):
            raise ValueError("standard deviation entries must be >= 0")
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "std", _frozen(std))

    @property
    def V(self) -> int:
        return self.mean.size

    @classmethod
    def from_series(cls, series: CqiSeries, version: int = 1) -> "BackgroundProfile":
        mag = magnitude(series)
        return cls(
            mean=np.nanmean(mag, axis=2),
            std=np.nanstd(mag, axis=2),
            calibration_window=(series.start_ms, series.end_ms),
            link_ids=series.link_ids,
            version=version,
        )

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "calibration_window": list(self.calibration_window),
            "link_ids": list(self.link_ids),
            "version": self.version,
        }


@dataclass(frozen=True)
class OtaProfile:
    neighborhood_links: tuple[int, ...] = ()
    carrier_frequency_hz: float = 2.4e9
    bandwidth_hz: float = 2e6
    duty_cycle_ms: int = 60
    cqi_type: CqiType = CqiType.UP
    cqi_sampling_ms: int = 60

    def __post_init__(self):
        object.__setattr__(self, "cqi_type", CqiType(self.cqi_type))
        object.__setattr__(self, "neighborhood_links", tuple(int(x) for x in self.neighborhood_links))
        if self.duty_cycle_ms <= 0:
            raise ValueError("duty_cycle_ms must be > 0")
        if self.cqi_sampling_ms < self.duty_cycle_ms:
            raise ValueError("cqi_sampling_ms must be >= duty_cycle_ms")

    def to_json(self) -> dict:
        return {
            "neighborhood_links": list(self.neighborhood_links),
            "carrier_frequency_hz": self.carrier_frequency_hz,
            "bandwidth_hz": self.bandwidth_hz,
            "duty_cycle_ms": self.duty_cycle_ms,
            "cqi_type": self.cqi_type.value,
            "cqi_sampling_ms": self.cqi_sampling_ms,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "OtaProfile":
        return cls(
            neighborhood_links=tuple(obj.get("neighborhood_links", ())),
            carrier_frequency_hz=float(obj.get("carrier_frequency_hz", 2.4e9)),
            bandwidth_hz=float(obj.get("bandwidth_hz", 2e6)),
            duty_cycle_ms=int(obj.get("duty_cycle_ms", 60)),
            cqi_type=CqiType(obj.get("cqi_type", "UP")),
            cqi_sampling_ms=int(obj.get("cqi_sampling_ms", 60)),
        )


@dataclass(frozen=True)
class SensingTask:
    """A configured inference objective.

    ``eigenvalue_threshold`` > 0 selects PCA components by threshold;
    otherwise exactly ``num_components`` are kept.  ``hop_ms`` defaults to
    ``window_ms`` (one message per window).  ``segment_window_ms`` is the
    moving-statistics window used to segment activity windows.
    """

    task_id: str
    task_type: TaskType
    latent_labels: tuple[str, ...]
    priors: tuple[float, ...]
    feature_recipe: FeatureRecipe = FeatureRecipe.PCA
    num_components: int = 12
    eigenvalue_threshold: float = 0.0
    window_ms: int = 600
    cqi_type: CqiType = CqiType.UP
    ota_profile: OtaProfile = field(default_factory=OtaProfile)
    hop_ms: int | None = None
    subbands: int | None = None
    segment_window_ms: int = 200
    gateway_combine: str = "sum"

    def __post_init__(self):
        object.__setattr__(self, "task_type", TaskType(self.task_type))
        object.__setattr__(self, "feature_recipe", FeatureRecipe(self.feature_recipe))
        object.__setattr__(self, "cqi_type", CqiType(self.cqi_type))
        object.__setattr__(self, "latent_labels", tuple(str(x) for x in self.latent_labels))
        object.__setattr__(self, "priors", tuple(float(x) for x in self.priors))
        if not self.task_id:
            raise ValueError("task_id must be non-empty")
        if len(self.latent_labels) < 2:
            raise ValueError("classification tasks need K >= 2 latent labels")
        if len(set(self.latent_labels)) != len(self.latent_labels):
            raise ValueError("latent labels must be distinct")
        if len(self.priors) != len(self.latent_labels):
            raise ValueError("priors length must equal number of latent labels")
        if any(not (0.0 <= a <= 1.0) or math.isnan(a) for a in self.priors):
            raise ValueError("priors must lie in [0, 1]")
        if abs(sum(self.priors) - 1.0) > 1e-9:
            raise ValueError(f"priors must sum to 1 (got {sum(self.priors)!r})")
        if self.num_components < 1:
            raise ValueError("num_components must be >= 1")
        if self.window_ms <= 0:
            raise ValueError("window_ms must be > 0")
        if self.hop_ms is not None and self.hop_ms < 1:
            raise ValueError("hop_ms must be >= 1")
        if self.gateway_combine not in ("sum", "product"):
            raise ValueError("gateway_combine must be 'sum' or 'product'")

    @property
    def K(self) -> int:
        return len(self.latent_labels)

    @property
    def effective_hop_ms(self) -> int:
        return self.hop_ms or self.window_ms

    @property
    def selection(self) -> dict:
        if self.eigenvalue_threshold > 0:
            return {"threshold": self.eigenvalue_threshold}
        return {"num_components": self.num_components}

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "task_type": self.task_type.value,
            "latent_labels": list(self.latent_labels),
            "priors": list(self.priors),
            "feature_recipe": self.feature_recipe.value,
            "num_components": self.num_components,
            "eigenvalue_threshold": self.eigenvalue_threshold,
            "window_ms": self.window_ms,
            "cqi_type": self.cqi_type.value,
            "ota_profile": self.ota_profile.to_json(),
            "hop_ms": self.hop_ms,
            "subbands": self.subbands,
            "segment_window_ms": self.segment_window_ms,
            "gateway_combine": self.gateway_combine,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SensingTask":
        return cls(
            task_id=str(obj["task_id"]),
            task_type=TaskType(obj["task_type"]),
            latent_labels=tuple(obj["latent_labels"]),
            priors=tuple(obj["priors"]),
            feature_recipe=FeatureRecipe(obj.get("feature_recipe", "PCA")),
            num_components=int(obj.get("num_components", 12)),
            eigenvalue_threshold=float(obj.get("eigenvalue_threshold", 0.0) or 0.0),
            window_ms=int(obj.get("window_ms", 600)),
            cqi_type=CqiType(obj.get("cqi_type", "UP")),
            ota_profile=OtaProfile.from_json(obj.get("ota_profile", {})),
            hop_ms=obj.get("hop_ms"),
            subbands=obj.get("subbands"),
            segment_window_ms=int(obj.get("segment_window_ms", 200)),
            gateway_combine=obj.get("gateway_combine", "sum"),
        )


@dataclass(frozen=True)
class Gateway:
    gw_id: str
    bind: str = "127.0.0.1:0"
    cache_size: int = 4096


@dataclass(frozen=True)
class Device:
    device_id: str
    x: float
    y: float


@dataclass(frozen=True)
class Link:
    """Directed radio link; ``antenna`` offsets the RX antenna along y."""

    link_id: int
    tx: str
    rx: str
    antenna: int = 0


@dataclass(frozen=True)
class DeploymentConfig:
    gateways: tuple[Gateway, ...]
    devices: tuple[Device, ...]
    area: tuple[float, float, float, float]  # x0, y0, x1, y1 in meters
    links: tuple[Link, ...]
    antenna_spacing_m: float = 0.028

    def __post_init__(self):
        if len(self.gateways) < 1:
            raise ValueError("deployment needs E >= 1 gateways")
        if len(self.devices) < 2:
            raise ValueError("deployment needs D >= 2 devices")
        names = {d.device_id for d in self.devices}
        for ln in self.links:
            if ln.tx not in names or ln.rx not in names:
                raise ValueError(f"link {ln.link_id} references an undeclared device")
        if len({ln.link_id for ln in self.links}) != len(self.links):
            raise ValueError("duplicate link ids")

    @property
    def device_map(self) -> dict[str, Device]:
        return {d.device_id: d for d in self.devices}

    def links_by_rx(self) -> dict[str, list[Link]]:
        out: dict[str, list[Link]] = {}
        for ln in self.links:
            out.setdefault(ln.rx, []).append(ln)
        return out

    def to_json(self) -> dict:
        return {
            "gateways": [{"gw_id": g.gw_id, "bind": g.bind, "cache_size": g.cache_size} for g in self.gateways],
            "devices": [{"device_id": d.device_id, "x": d.x, "y": d.y} for d in self.devices],
            "area": list(self.area),
            "links": [
                {"link_id": ln.link_id, "tx": ln.tx, "rx": ln.rx, "antenna": ln.antenna} for ln in self.links
            ],
            "antenna_spacing_m": self.antenna_spacing_m,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DeploymentConfig":
        return cls(
            gateways=tuple(Gateway(**g) for g in obj["gateways"]),
            devices=tuple(Device(str(d["device_id"]), float(d["x"]), float(d["y"])) for d in obj["devices"]),
            area=tuple(float(v) for v in obj["area"]),
            links=tuple(
                Link(int(ln["link_id"]), str(ln["tx"]), str(ln["rx"]), int(ln.get("antenna", 0)))
                for ln in obj["links"]
            ),
            antenna_spacing_m=float(obj.get("antenna_spacing_m", 0.028)),
        )


# ---------------------------------------------------------------------------
# representation

MAG_FLOOR = 1e-12


def magnitude(series: CqiSeries) -> np.ndarray:
    """Magnitude in dB for complex CQI, the raw value (dBm) for UP."""
    if is_complex_type(series.cqi_type):
        return 20.0 * np.log10(np.maximum(np.abs(series.values), MAG_FLOOR))
    return np.asarray(series.values, dtype=float)


# ---------------------------------------------------------------------------
# pre-manipulation


def _interp_stream(grid: np.ndarray, t: np.ndarray, y: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(y):
        return np.interp(grid, t, y.real) + 1j * np.interp(grid, t, y.imag)
    return np.interp(grid, t, y)


def interpolate_missing(series: CqiSeries) -> CqiSeries:
    """Fill missing packets on the uniform ``sampling_ms`` grid.

    The output time axis is the uniform grid anchored at the first sample
    merged with any original off-grid timestamps, so original samples are
    never altered.  Complex values are interpolated in I/Q coordinates.
    """
    F, L, _ = series.values.shape
    t0, t1 = series.start_ms, int(series.times_ms[-1])
    grid = np.arange(t0, t1 + 1, series.sampling_ms, dtype=np.int64)
    times = np.union1d(grid, series.times_ms)
    if times.size == series.times_ms.size and series.times_ms.size >= 2 and not np.isnan(series.values).any():
        return series
    out = np.empty((F, L, times.size), dtype=series.values.dtype)
    src = series.times_ms.astype(float)
    for m in range(F):
        for j in range(L):
            y = series.values[m, j]
            ok = ~np.isnan(y)
            if ok.sum() < 2:
                raise InsufficientStreamError(
                    f"insufficient stream: link {series.link_ids[j]} freq {m} has {int(ok.sum())} samples"
                )
            if ok.all() and times.size == series.times_ms.size:
                out[m, j] = y
            else:
                out[m, j] = _interp_stream(times.astype(float), src[ok], y[ok])
    # keep originals bit-exact
    keep = np.searchsorted(times, series.times_ms)
    orig = series.values
    out[:, :, keep] = np.where(np.isnan(orig), out[:, :, keep], orig)
    return series.replace(times_ms=times, values=out)


def estimate_phase_ramp(series: CqiSeries) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares slope and offset of the unwrapped phase across subcarriers.

    Returns ``(slope, offset)`` arrays of shape ``(L, N_t)`` in rad/subcarrier
    and rad.
    """
    if not is_complex_type(series.cqi_type):
        raise ValueError(f"phase undefined for cqi_type {series.cqi_type.value}")
    F = series.num_subcarriers
    phase = np.unwrap(np.angle(series.values), axis=0)
    m = np.arange(F, dtype=float)
    if F == 1:
        return np.zeros(phase.shape[1:]), phase[0]
    mc = m - m.mean()
    slope = np.tensordot(mc, phase, axes=(0, 0)) / np.dot(mc, mc)
    offset = phase.mean(axis=0) - slope * m.mean()
    return slope, offset


def correct_phase(series: CqiSeries) -> CqiSeries:
    """Unwrap phase across subcarriers and remove the LS linear ramp and offset."""
    slope, offset = estimate_phase_ramp(series)
    F = series.num_subcarriers
    m = np.arange(F, dtype=float)[:, None, None]
    phase = np.unwrap(np.angle(series.values), axis=0)
    residual = phase - (slope[None] * m + offset[None])
    corrected = np.abs(series.values) * np.exp(1j * residual)
    # symbols with missing subcarriers are left untouched
    bad = np.isnan(series.values).any(axis=0)
    if bad.any():
        corrected[:, bad] = series.values[:, bad]
    return series.replace(values=corrected)


def _moving_nanmedian(y: np.ndarray, window_len: int) -> np.ndarray:
    half = window_len // 2
    N = y.shape[-1]
    if N > 2 * half and not np.isnan(y).any():
        # fast path: full windows inside, shrunken windows only at the edges
        out = np.empty_like(y)
        view = np.lib.stride_tricks.sliding_window_view(y, window_len, axis=-1)
        out[..., half : N - half] = np.median(view, axis=-1)
        for i in range(half):
            out[..., i] = np.median(y[..., : i + half + 1], axis=-1)
            out[..., N - 1 - i] = np.median(y[..., N - 1 - i - half :], axis=-1)
        return out
    pad = [(0, 0)] * (y.ndim - 1) + [(half, half)]
    padded = np.pad(y, pad, constant_values=np.nan)
    view = np.lib.stride_tricks.sliding_window_view(padded, window_len, axis=-1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN windows
        return np.nanmedian(view, axis=-1)


def denoise(series: CqiSeries, window_len: int) -> CqiSeries:
    """Centered moving median per stream; edges use shrunken windows.

    Complex streams are filtered on the I and Q components separately.
    """
    if window_len < 1 or window_len % 2 == 0:
        raise ValueError(f"window_len must be odd and >= 1, got {window_len}")
    if window_len == 1:
        return series
    v = series.values
    if np.iscomplexobj(v):
        out = _moving_nanmedian(v.real, window_len) + 1j * _moving_nanmedian(v.imag, window_len)
    else:
        out = _moving_nanmedian(v, window_len)
    return series.replace(values=out)


def _moving_mean(y: np.ndarray, n: int) -> np.ndarray:
    """Centered moving mean along the last axis with shrunken edges."""
    half = n // 2
    c = np.cumsum(np.pad(y, [(0, 0)] * (y.ndim - 1) + [(1, 0)]), axis=-1)
    N = y.shape[-1]
    idx = np.arange(N)
    lo = np.clip(idx - half, 0, N)
    hi = np.clip(idx - half + n, 0, N)
    return (c[..., hi] - c[..., lo]) / (hi - lo)


def activity_score(series: CqiSeries, background: BackgroundProfile | None, window_ms: int) -> np.ndarray:
    """Per-time ratio of the moving deviation from background to calibration sigma.

    The deviation is the moving root-mean-square of the background-subtracted
    magnitude (spread about the calibrated level), averaged over streams
    after normalising each by its calibration standard deviation.
    """
    if background is None:
        raise UncalibratedError("uncalibrated: segment_activity needs a BackgroundProfile")
    mag = magnitude(series)
    if background.mean.shape != mag.shape[:2]:
        raise ValueError(f"background shape {background.mean.shape} does not match series {mag.shape[:2]}")
    dev = mag - background.mean[:, :, None]
    dev = np.where(np.isnan(dev), 0.0, dev)
    n = max(1, int(round(window_ms / series.sampling_ms)))
    rms = np.sqrt(_moving_mean(dev**2, n))
    floor = max(1e-9, 1e-6 * float(np.mean(background.std)))
    ratio = rms / np.maximum(background.std, floor)[:, :, None]
    return ratio.reshape(-1, ratio.shape[-1]).mean(axis=0)


def segment_activity(
    series: CqiSeries,
    threshold_mult: float = 3.0,
    *,
    background: BackgroundProfile | None = None,
    window_ms: int = 600,
) -> list[tuple[int, int]]:
    """Disjoint ``(start_ms, end_ms)`` spans where the series departs from background.

    Spans closer than one window are merged.  ``end_ms`` is the timestamp of
    the last active sample.
    """
    score = activity_score(series, background, window_ms)
    active = score > threshold_mult
    if not active.any():
        return []
    edges = np.diff(np.concatenate([[0], active.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    segs: list[tuple[int, int]] = []
    for s, e in zip(starts, ends):
        ts, te = int(series.times_ms[s]), int(series.times_ms[e])
        if segs and ts - segs[-1][1] < window_ms:
            segs[-1] = (segs[-1][0], te)
        else:
            segs.append((ts, te))
    return segs


def window(series: CqiSeries, window_ms: int, hop_ms: int) -> list[CqiSeries]:
    """Windows ``[start + i*hop, start + i*hop + window)``; partial tail dropped."""
    if window_ms < series.sampling_ms:
        raise ValueError("window_ms must be >= sampling interval")
    if hop_ms < 1:
        raise ValueError("hop_ms must be >= 1")
    span = series.span_ms
    if span < window_ms:
        return []
    count = (span - window_ms) // hop_ms + 1
    out = []
    for i in range(count):
        s = series.start_ms + i * hop_ms
        try:
            out.append(series.select_time(s, s + window_ms))
        except ValueError:
            continue  # window fell entirely into a gap
    return out


# ---------------------------------------------------------------------------
# trace files


def format_float(x: float) -> str:
    return repr(float(x))


def trace_rows(series: CqiSeries) -> Iterable[tuple]:
    F, L, Nt = series.values.shape
    ctype = series.cqi_type.value
    cplx = is_complex_type(series.cqi_type)
    for t in range(Nt):
        tm = int(series.times_ms[t])
        for j in range(L):
            for m in range(F):
                v = series.values[m, j, t]
                if np.isnan(v):
                    continue
                re, im = (v.real, v.imag) if cplx else (v, 0.0)
                yield (tm, series.device_id, series.link_ids[j], m, ctype, float(re), float(im))


def write_trace(path: str | Path, series_list: Sequence[CqiSeries]) -> Path:
    """Write series to the CSV trace format, rows ordered by time then device."""
    rows = []
    for s in series_list:
        rows.extend(trace_rows(s))
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]},{r[3]},{r[4]},{format_float(r[5])},{format_float(r[6])}\n")
    return path


def parse_trace_row(row: Sequence[str]) -> tuple[str, CqiSample]:
    """Parse one CSV row into ``(device_id, sample)``; raises ValueError if malformed."""
    if len(row) != 7:
        raise ValueError(f"expected 7 fields, got {len(row)}")
    time_ms = int(row[0])
    device_id = row[1].strip()
    if not device_id:
        raise ValueError("empty device_id")
    link_id, freq = int(row[2]), int(row[3])
    ctype = CqiType(row[4].strip())
    re, im = float(row[5]), float(row[6])
    if not (math.isfinite(re) and math.isfinite(im)):
        raise ValueError("non-finite value")
    value = complex(re, im) if is_complex_type(ctype) else re
    return device_id, CqiSample(value, freq, link_id, time_ms, ctype)


_TRACE_DTYPES = {
    "time_ms": np.int64,
    "device_id": str,
    "link_id": np.int64,
    "freq_index": np.int64,
    "cqi_type": str,
    "re": np.float64,
    "im": np.float64,
}


def read_trace(path: str | Path, sampling_ms: int, chunk_rows: int = 1_000_000) -> dict[str, CqiSeries]:
    """Read a CSV trace into one dense series per device (malformed rows raise).

    The file is parsed in chunks so multi-gigabyte traces stay within memory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        header = next(csv.reader([fh.readline()]), None)
    if header is None or tuple(h.strip() for h in header) != TRACE_HEADER:
        raise ValueError(f"unexpected trace header {header}")
    cols: dict[str, list[tuple[np.ndarray, ...]]] = {}
    kinds: dict[str, set[str]] = {}
    try:
        reader = pd.read_csv(
            path,
            dtype=_TRACE_DTYPES,
            chunksize=chunk_rows,
            float_precision="round_trip",
            keep_default_na=False,
            skipinitialspace=True,
        )
        for chunk in reader:
            if chunk.shape[1] != len(TRACE_HEADER):
                raise ValueError(f"expected {len(TRACE_HEADER)} fields")
            for dev, g in chunk.groupby("device_id", sort=False):
                kinds.setdefault(dev, set()).update(g["cqi_type"].unique().tolist())
                cols.setdefault(dev, []).append(
                    tuple(g[c].to_numpy() for c in ("time_ms", "link_id", "freq_index", "re", "im"))
                )
    except (pd.errors.ParserError, ValueError, TypeError) as exc:
        raise ValueError(f"malformed trace {path}: {exc}") from None
    if not cols:
        raise ValueError(f"trace {path} has no samples")
    out = {}
    for dev in sorted(cols):
        time_ms, link, freq, re, im = (np.concatenate(c) for c in zip(*cols[dev]))
        if not (np.all(np.isfinite(re)) and np.all(np.isfinite(im))):
            raise ValueError("non-finite value in trace")
        if np.any(freq < 0):
            raise ValueError("freq_index must be >= 0")
        if len(kinds[dev]) != 1:
            raise ValueError(f"mixed cqi_type for device {dev}")
        ctype = CqiType(next(iter(kinds[dev])))
        links, li = np.unique(link, return_inverse=True)
        times, ti = np.unique(time_ms, return_inverse=True)
        F = int(freq.max()) + 1
        cplx = is_complex_type(ctype)
        values = np.full((F, links.size, times.size), np.nan, dtype=np.complex128 if cplx else np.float64)
        values[freq, li, ti] = re + 1j * im if cplx else re
        out[dev] = CqiSeries(dev, ctype, tuple(int(x) for x in links), times, values, sampling_ms)
    return out


def trace_text(series_list: Sequence[CqiSeries]) -> str:
    buf = io.StringIO()
    buf.write(",".join(TRACE_HEADER) + "\n")
    rows = sorted((r for s in series_list for r in trace_rows(s)), key=lambda r: (r[0], r[1], r[2], r[3]))
    for r in rows:
        buf.write(f"{r[0]},{r[1]},{r[2]},{r[3]},{r[4]},{format_float(r[5])},{format_float(r[6])}\n")
    return buf.getvalue()
