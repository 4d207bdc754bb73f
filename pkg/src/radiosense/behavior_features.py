"""Peak and subcarrier phase-difference features for activity segments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks

from .cqi_core import CqiSeries, CqiType, is_complex_type
from .feature_pca import PcaModel, project
from .pipeline import sample_vectors

EXTRA_KEYS = ("peak_count", "peak_width_mean_ms", "inv_peak_width_mean_ms", "phase_dev_mean", "phase_dev_min")


@dataclass(frozen=True)
class PeakStats:
    peak_count: int
    mean_peak_width_ms: float
    mean_inverted_peak_width_ms: float
    regular_count: int = 0
    inverted_count: int = 0


@dataclass(frozen=True, eq=False)
class PhaseDeviationStats:
    sigma: np.ndarray  # (L, N_t) std of adjacent-subcarrier phase differences
    link_ids: tuple[int, ...]

    @property
    def mean_per_link(self) -> np.ndarray:
        return self.sigma.mean(axis=1)

    @property
    def min_per_link(self) -> np.ndarray:
        return self.sigma.min(axis=1)

    @property
    def mean_dev(self) -> float:
        return float(self.mean_per_link.mean())

    @property
    def min_dev(self) -> float:
        return float(self.min_per_link.mean())


@dataclass(frozen=True)
class PeakConfig:
    prominence: float
    min_width_ms: float

    @classmethod
    def from_calibration(
        cls, calibration_signal: np.ndarray, sampling_ms: float, prominence_mult: float = 2.0, width_mult: float = 2.0
    ) -> "PeakConfig":
        """Prominence ``prominence_mult`` times the calibration spread, width ``width_mult`` samples."""
        sigma = float(np.std(calibration_signal))
        return cls(prominence=max(prominence_mult * sigma, 1e-12), min_width_ms=width_mult * sampling_ms)


@dataclass(frozen=True, eq=False)
class BehaviorFeatureVector:
    pca_features: np.ndarray
    peak: PeakStats
    phase_mean_dev: float
    phase_min_dev: float

    def extra(self) -> dict[str, float]:
        return {
            "peak_count": float(self.peak.peak_count),
            "peak_width_mean_ms": float(self.peak.mean_peak_width_ms),
            "inv_peak_width_mean_ms": float(self.peak.mean_inverted_peak_width_ms),
            "phase_dev_mean": float(self.phase_mean_dev),
            "phase_dev_min": float(self.phase_min_dev),
        }

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.pca_features, dtype=float), [self.extra()[k] for k in EXTRA_KEYS]])

    @classmethod
    def from_parts(cls, features, extra: dict) -> "BehaviorFeatureVector":
        peak = PeakStats(
            int(extra["peak_count"]), float(extra["peak_width_mean_ms"]), float(extra["inv_peak_width_mean_ms"])
        )
        return cls(np.asarray(features, dtype=float), peak, float(extra["phase_dev_mean"]), float(extra["phase_dev_min"]))


def _one_sided(signal: np.ndarray, prominence: float, min_width_samples: float) -> np.ndarray:
    _, props = find_peaks(signal, prominence=prominence, width=min_width_samples, rel_height=0.5)
    return props["widths"]


def detect_peaks(
    signal: np.ndarray, prominence: float, min_width_ms: float, sampling_ms: float = 1.0
) -> PeakStats:
    """Count prominent peaks and inverted peaks and their half-prominence widths."""
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or x.size < 3:
        raise ValueError("signal must be 1-D with at least 3 samples")
    if prominence <= 0:
        raise ValueError("prominence must be > 0")
    w = min_width_ms / sampling_ms
    up = _one_sided(x, prominence, w) * sampling_ms
    down = _one_sided(-x, prominence, w) * sampling_ms
    return PeakStats(
        peak_count=int(up.size + down.size),
        mean_peak_width_ms=float(up.mean()) if up.size else 0.0,
        mean_inverted_peak_width_ms=float(down.mean()) if down.size else 0.0,
        regular_count=int(up.size),
        inverted_count=int(down.size),
    )


def wrap_phase(x: np.ndarray) -> np.ndarray:
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - x, 2.0 * np.pi)


def phase_deviation(series: CqiSeries) -> PhaseDeviationStats:
    if not is_complex_type(series.cqi_type) or series.cqi_type is not CqiType.PHY:
        raise ValueError(f"phase difference undefined for cqi_type {series.cqi_type.value}")
    if series.num_subcarriers < 2:
        raise ValueError("phase difference undefined: need F >= 2 subcarriers")
    diffs = wrap_phase(np.diff(np.angle(series.values), axis=0))
    return PhaseDeviationStats(sigma=diffs.std(axis=0), link_ids=series.link_ids)


def first_component_signal(segment: CqiSeries, model: PcaModel, subbands: int | None = None) -> np.ndarray:
    """Time series of the projection of each sample onto the leading component."""
    S = sample_vectors(segment, subbands)
    return (S - model.mean_vector) @ model.subspace[:, 0]


def build_behavior_features(
    segment: CqiSeries, model: PcaModel, peak_cfg: PeakConfig, subbands: int | None = None
) -> BehaviorFeatureVector:
    S = sample_vectors(segment, subbands)
    pca = project(model, S.mean(axis=0))
    signal = (S - model.mean_vector) @ model.subspace[:, 0]
    if signal.size < 3:
        raise ValueError("segment too short for peak analysis")
    peak = detect_peaks(signal, peak_cfg.prominence, peak_cfg.min_width_ms, segment.sampling_ms)
    phase = phase_deviation(segment)
    return BehaviorFeatureVector(pca, peak, phase.mean_dev, phase.min_dev)
