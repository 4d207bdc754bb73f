import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radiosense import experiments as ex
from radiosense.behavior_features import (
    EXTRA_KEYS,
    BehaviorFeatureVector,
    PeakConfig,
    build_behavior_features,
    detect_peaks,
    phase_deviation,
    wrap_phase,
)
from radiosense.cqi_core import CqiType
from radiosense.wire import DeviceFeatures, FeatureMessage, parse_feature_message

from conftest import make_series


def triangle(n_before, half_base, height, n_after):
    up = np.linspace(0, height, half_base + 1)
    return np.concatenate([np.zeros(n_before), up, up[-2::-1], np.zeros(n_after)])


# ---------------------------------------------------------------------------
# peaks


def test_constant_signal_has_no_peaks():
    p = detect_peaks(np.full(50, 3.0), 0.5, 20, 10)
    assert (p.peak_count, p.mean_peak_width_ms, p.mean_inverted_peak_width_ms) == (0, 0.0, 0.0)


def test_triangle_width_at_half_prominence():
    prom, dt = 1.0, 10.0
    # base 200 ms = 20 samples, height 2 * prominence
    sig = triangle(10, 10, 2 * prom, 10)
    p = detect_peaks(sig, prom, 20, dt)
    assert p.peak_count == 1 and p.regular_count == 1
    assert abs(p.mean_peak_width_ms - 100.0) <= dt


def test_peak_input_validation():
    with pytest.raises(ValueError):
        detect_peaks([1.0, 2.0], 1.0, 1)
    with pytest.raises(ValueError):
        detect_peaks(np.zeros(10), 0.0, 1)


signals = st.lists(st.floats(-10, 10, allow_nan=False), min_size=5, max_size=80).map(np.array)


@given(signals, st.floats(0.1, 5))
@settings(max_examples=60, deadline=None)
def test_negation_swaps_peak_kinds(sig, prom):
    a = detect_peaks(sig, prom, 0, 1)
    b = detect_peaks(-sig, prom, 0, 1)
    assert (a.regular_count, a.inverted_count) == (b.inverted_count, b.regular_count)
    assert a.mean_peak_width_ms == b.mean_inverted_peak_width_ms
    assert a.mean_inverted_peak_width_ms == b.mean_peak_width_ms


# dyadic samples with a prominence halfway between grid points keep every comparison tie free
grid_signals = st.lists(st.integers(-80, 80), min_size=5, max_size=80).map(lambda v: np.array(v) / 8.0)
off_grid_prom = st.integers(1, 40).map(lambda n: n / 8.0 + 1 / 16)


@given(grid_signals, off_grid_prom, st.integers(-20, 20), st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_shift_and_scale_invariance(sig, prom, c, k):
    scale = 2.0 ** (k - 4)
    base = detect_peaks(sig, prom, 0, 1)
    for other in (detect_peaks(sig + c, prom, 0, 1), detect_peaks(sig * scale, prom * scale, 0, 1)):
        assert (other.regular_count, other.inverted_count) == (base.regular_count, base.inverted_count)
        # widths come from interpolated crossings, so only the last ulp may move
        assert other.mean_peak_width_ms == pytest.approx(base.mean_peak_width_ms, rel=1e-9, abs=1e-12)
        assert other.mean_inverted_peak_width_ms == pytest.approx(base.mean_inverted_peak_width_ms, rel=1e-9, abs=1e-12)


@given(signals, st.floats(0.1, 5))
@settings(max_examples=40, deadline=None)
def test_widths_zero_iff_no_peaks(sig, prom):
    p = detect_peaks(sig, prom, 0, 1)
    assert (p.regular_count == 0) == (p.mean_peak_width_ms == 0.0)
    assert (p.inverted_count == 0) == (p.mean_inverted_peak_width_ms == 0.0)


def test_peak_config_from_calibration():
    cfg = PeakConfig.from_calibration(np.array([1.0, -1.0, 1.0, -1.0]), 20, 2.0, 2.0)
    assert cfg == PeakConfig(2.0, 40.0)


# ---------------------------------------------------------------------------
# phase deviation


def test_equal_phases_zero_deviation():
    v = np.exp(1j * np.full((8, 2, 5), 0.7))
    ph = phase_deviation(make_series(v, cqi_type=CqiType.PHY))
    assert ph.mean_dev == 0.0 and ph.min_dev == 0.0


def test_phase_deviation_errors():
    with pytest.raises(ValueError, match="phase difference undefined"):
        phase_deviation(make_series(np.ones((1, 1, 3), complex), cqi_type=CqiType.PHY))
    with pytest.raises(ValueError, match="phase difference undefined"):
        phase_deviation(make_series(np.ones(3)))


@given(st.integers(0, 10_000), st.floats(-10, 10))
@settings(max_examples=40, deadline=None)
def test_common_rotation_invariance(seed, theta):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(6, 2, 4)) + 1j * rng.normal(size=(6, 2, 4))
    thetas = theta * np.arange(4)  # a different rotation per symbol
    a = phase_deviation(make_series(v, cqi_type=CqiType.PHY))
    b = phase_deviation(make_series(v * np.exp(1j * thetas), cqi_type=CqiType.PHY))
    # wrapping can move a difference by exactly 2*pi at the (-pi, pi] edge
    np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-9)
    assert 0 <= a.min_dev <= a.mean_dev


def test_uniform_phases_match_monte_carlo():
    rng = np.random.default_rng(0)
    draws = rng.uniform(-np.pi, np.pi, size=(2, 1_000_000))
    oracle = np.std(wrap_phase(draws[1] - draws[0]))
    F = 64
    v = np.exp(1j * rng.uniform(-np.pi, np.pi, size=(F, 4, 400)))
    ph = phase_deviation(make_series(v, cqi_type=CqiType.PHY))
    assert abs(ph.mean_dev - oracle) / oracle < 0.05


def test_wrap_phase_range():
    x = np.array([np.pi, -np.pi, 3 * np.pi, 0.0, -3.5])
    w = wrap_phase(x)
    assert np.all(w > -np.pi) and np.all(w <= np.pi)
    np.testing.assert_allclose(np.exp(1j * w), np.exp(1j * x))


# ---------------------------------------------------------------------------
# feature vector on simulated activity


@pytest.fixture(scope="module")
def activity_run():
    cfg = ex.load_preset("activity")
    cfg.update(train_segments=30, test_segments=45)
    return ex.run_activity(cfg)


def test_feature_vector_shape(activity_run):
    P = activity_run.metrics["P"]
    X = activity_run.extra["features"]
    assert X.shape[1] == P + 5
    assert np.all(np.isfinite(X))


def test_arm_head_contrasts(activity_run):
    per = activity_run.metrics["per_class"]
    assert per["arm"]["peak_count"] > per["head"]["peak_count"]
    assert per["head"]["peak_width_ms"] > per["arm"]["peak_width_ms"]
    assert per["head"]["phase_dev_mean"] > per["arm"]["phase_dev_mean"]


def test_quiet_segment_has_no_peaks(activity_run):
    feats = activity_run.extra["behavior"]
    labels = activity_run.truth
    quiet = [f for f, lab in zip(feats, labels) if lab == "none"]
    assert quiet and all(f.peak.peak_count == 0 for f in quiet)


def test_wire_round_trip_is_bit_exact(activity_run):
    for f in activity_run.extra["behavior"][:20]:
        dev = DeviceFeatures("rx", (0, 1, 2), CqiType.PHY, tuple(float(x) for x in f.pca_features), f.extra())
        msg = FeatureMessage("gw1", "A1", 0, 0, 2000, (dev,))
        back = parse_feature_message(json.loads(msg.dumps()), expected_P=len(f.pca_features)).devices[0]
        rebuilt = BehaviorFeatureVector.from_parts(back.features, back.extra)
        assert rebuilt.as_array().tobytes() == f.as_array().tobytes()
        assert list(back.extra) == list(EXTRA_KEYS)
