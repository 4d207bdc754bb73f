"""Edge-side processing chain shared by the gateway daemon and offline runs.

Order: interpolate -> phase-correct (PHY only) -> denoise.  Feature vectors
use the magnitude representation (dB for complex CQI, dBm for UP),
optionally pooled into ``subbands`` groups of adjacent subcarriers.
"""

from __future__ import annotations

import numpy as np

from .cqi_core import CqiSeries, CqiType, correct_phase, denoise, interpolate_missing, is_complex_type, magnitude

DEFAULT_DENOISE_LEN = 3


def preprocess(series: CqiSeries, denoise_len: int = DEFAULT_DENOISE_LEN) -> CqiSeries:
    out = interpolate_missing(series)
    if out.cqi_type is CqiType.PHY:
        out = correct_phase(out)
    return denoise(out, denoise_len)


def sample_vectors(series: CqiSeries, subbands: int | None = None) -> np.ndarray:
    """Per-sample feature-space vectors, shape ``(N_t, V)`` with ``V = F' * L``.

    Each row is flattened freq-major then link, matching the layout
    ``(F', L, 1)``.  With ``subbands`` set, subcarrier power is averaged
    inside each of that many contiguous groups before conversion to dB.
    """
    F = series.num_subcarriers
    if subbands and subbands < F and is_complex_type(series.cqi_type):
        power = np.abs(series.values) ** 2
        groups = np.array_split(np.arange(F), subbands)
        pooled = np.stack([power[g].mean(axis=0) for g in groups])
        mag = 10.0 * np.log10(np.maximum(pooled, 1e-24))
    else:
        mag = magnitude(series)
    Fp, L, Nt = mag.shape
    return mag.reshape(Fp * L, Nt).T.copy()


def window_vector(series: CqiSeries, subbands: int | None = None) -> np.ndarray:
    """Time-averaged sample vector of a window, layout ``(F', L, 1)``."""
    return np.nanmean(sample_vectors(series, subbands), axis=0)


def feature_layout(series: CqiSeries, subbands: int | None = None) -> tuple[int, int, int]:
    F = series.num_subcarriers
    Fp = subbands if (subbands and subbands < F and is_complex_type(series.cqi_type)) else F
    return Fp, len(series.link_ids), 1
