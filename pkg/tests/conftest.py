import numpy as np
import pytest

from radiosense.cqi_core import CqiSeries, CqiType, OtaProfile, SensingTask


def make_series(values, times=None, cqi_type=CqiType.UP, sampling_ms=60, device_id="d0", link_ids=None):
    """Series from an (F, L, N) array, or a 1-D stream treated as F = L = 1."""
    v = np.asarray(values)
    if v.ndim == 1:
        v = v[None, None, :]
    if times is None:
        times = np.arange(v.shape[2]) * sampling_ms
    if link_ids is None:
        link_ids = tuple(range(v.shape[1]))
    return CqiSeries(device_id, cqi_type, link_ids, np.asarray(times), v, sampling_ms)


def make_task(labels=("empty", "occupied"), task_type="detection", **kw):
    K = len(labels)
    base = dict(
        task_id=kw.pop("task_id", "T1"),
        task_type=task_type,
        latent_labels=tuple(labels),
        priors=tuple([1.0 / K] * K),
        num_components=2,
        window_ms=600,
        cqi_type=CqiType.UP,
        ota_profile=OtaProfile(),
    )
    base.update(kw)
    return SensingTask(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_feature_message(rng):
    from radiosense.behavior_features import EXTRA_KEYS
    from radiosense.wire import DeviceFeatures, FeatureMessage

    start = int(rng.integers(0, 10**9))
    end = start + int(rng.integers(0, 5000))
    devices = []
    for d in range(int(rng.integers(1, 4))):
        scale = 10.0 ** rng.integers(-12, 12)
        feats = tuple(float(v) for v in rng.normal(size=int(rng.integers(1, 9))) * scale)
        extra = None
        if rng.random() < 0.5:
            extra = {k: float(rng.normal() * scale) for k in EXTRA_KEYS}
        links = tuple(int(v) for v in rng.integers(0, 200, size=int(rng.integers(1, 4))))
        devices.append(DeviceFeatures(f"dev{d}", links, CqiType(rng.choice(["PHY", "UP", "IQ"])), feats, extra))
    sent = float(rng.uniform(1e12, 2e12)) if rng.random() < 0.5 else None
    return FeatureMessage(f"gw{rng.integers(100)}", f"T{rng.integers(100)}", int(rng.integers(start, end + 1)), start, end, tuple(devices), sent)


def random_estimate(rng):
    from radiosense.inference import FeatureBatch, infer

    K = int(rng.integers(2, 6))
    E = int(rng.integers(1, 4))
    task = make_task(tuple(f"L{i}" for i in range(K)))
    batch = FeatureBatch(task.task_id, int(rng.integers(0, 10**9)), {f"g{e}": np.zeros(1) for e in range(E)})
    return infer(task, batch, rng.uniform(-30, 30, size=(K, E)), seq=int(rng.integers(0, 10**6)))


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
