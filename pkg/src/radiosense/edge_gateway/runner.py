"""Per-task feature pipeline on the gateway.

A :class:`TaskRunner` turns cached raw CQI into one FeatureMessage per
window.  It refuses to emit until the task has both a calibration profile
and a trained model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..artifacts import TaskArtifacts, train_task_models
from ..behavior_features import PeakConfig, build_behavior_features, first_component_signal
from ..cqi_core import BackgroundProfile, FeatureRecipe, InsufficientStreamError, Layout, SensingTask, UncalibratedError
from ..feature_pca import TrainingSet, project
from ..pipeline import feature_layout, preprocess, window_vector
from ..wire import DeviceFeatures, FeatureMessage
from .cache import EdgeCache

log = logging.getLogger(__name__)


class CalibrationShortfall(InsufficientStreamError):
    def __init__(self, needed_ms: int, shortfall: dict[str, int]):
        worst = max(shortfall.values())
        detail = ", ".join(f"{d}: {v} ms short" for d, v in sorted(shortfall.items()))
        super().__init__(f"calibration needs {needed_ms} ms of samples; {detail}")
        self.needed_ms = needed_ms
        self.shortfall = shortfall
        self.shortfall_ms = worst


class UntrainedError(ValueError):
    pass


@dataclass
class RunnerCounters:
    emitted: int = 0
    skipped: int = 0


@dataclass
class ActiveTaskState:
    task: SensingTask
    next_start_ms: int | None = None
    last_push_timestamp: int | None = None
    ota_version: int = 0
    counters: RunnerCounters = field(default_factory=RunnerCounters)


class TaskRunner:
    def __init__(
        self,
        task: SensingTask,
        cache: EdgeCache,
        gw_id: str,
        denoise_len: int = 3,
        artifacts: TaskArtifacts | None = None,
    ):
        self.state = ActiveTaskState(task)
        self.cache = cache
        self.gw_id = gw_id
        self.denoise_len = denoise_len
        self.calibration_series = {}
        self._layouts: dict[str, tuple[int, int, int]] = {}
        if artifacts is not None:
            self.set_artifacts(artifacts)

    @property
    def task(self) -> SensingTask:
        return self.state.task

    @property
    def sampling_ms(self) -> int:
        return self.task.ota_profile.cqi_sampling_ms

    @property
    def artifacts(self) -> TaskArtifacts | None:
        return self.cache.models.get(self.task.task_id)

    @property
    def devices(self) -> list[str]:
        arts = self.artifacts
        if arts is not None:
            return sorted(arts.models)
        return sorted(self.cache.devices)

    @property
    def calibrated(self) -> bool:
        return self.task.task_id in self.cache.profiles

    @property
    def trained(self) -> bool:
        arts = self.artifacts
        if arts is None or not arts.models:
            return False
        if self.task.feature_recipe is FeatureRecipe.PCA_PEAK_PHASE:
            return arts.peak_config is not None or bool(self.calibration_series)
        return True

    @property
    def ready(self) -> bool:
        return self.calibrated and self.trained

    def set_artifacts(self, artifacts: TaskArtifacts) -> int:
        return self.cache.set_model(self.task.task_id, artifacts)

    # -- calibration ---------------------------------------------------------

    def calibrate(self, duration_ms: int | None = None) -> int:
        """Background profile from the newest ``duration_ms`` of cached samples.

        Returns the new profile version; raises :class:`CalibrationShortfall`
        if some device does not have enough data yet.
        """
        duration_ms = duration_ms or self.task.window_ms
        devices = self.devices
        if not devices:
            raise CalibrationShortfall(duration_ms, {"(no devices)": duration_ms})
        end = self.cache.watermark(devices)
        shortfall = {}
        for d in devices:
            first = self.cache.earliest([d])
            have = 0 if first is None or end is None else end + self.sampling_ms - first
            if have < duration_ms:
                shortfall[d] = duration_ms - have
        if shortfall:
            raise CalibrationShortfall(duration_ms, shortfall)
        start = end + self.sampling_ms - duration_ms
        profiles, series = {}, {}
        for d in devices:
            s = preprocess(self.cache.snapshot(d, start, end + 1, self.sampling_ms), self.denoise_len)
            profiles[d] = BackgroundProfile.from_series(s)
            series[d] = s
        self.calibration_series = series
        return self.cache.set_profiles(self.task.task_id, profiles)

    # -- local training --------------------------------------------------------

    def record_training_window(self, label: str, start_ms: int) -> None:
        """Add the window starting at ``start_ms`` to the training backlog under ``label``."""
        if label not in self.task.latent_labels:
            raise ValueError(f"unknown label {label!r}")
        for d in self.devices:
            s = preprocess(self.cache.snapshot(d, start_ms, start_ms + self.task.window_ms, self.sampling_ms), self.denoise_len)
            self.cache.add_training(self.task.task_id, f"{d}\x00{label}", window_vector(s, self.task.subbands))
            self._layouts[d] = feature_layout(s, self.task.subbands)

    def train_from_backlog(self) -> TaskArtifacts:
        backlog = self.cache.backlog.get(self.task.task_id, {})
        per_dev: dict[str, dict[str, np.ndarray]] = {}
        for key, rows in backlog.items():
            d, label = key.split("\x00")
            per_dev.setdefault(d, {})[label] = np.array(rows)
        sets = {}
        for d, classes in per_dev.items():
            missing = [k for k in self.task.latent_labels if k not in classes]
            if missing:
                raise ValueError(f"training backlog for {d} has no windows for class {missing[0]!r}")
            sets[d] = TrainingSet(self.task.task_id, classes, Layout(*self._layouts[d]), d)
        arts = TaskArtifacts(self.task.task_id, train_task_models(sets, self.task))
        self.set_artifacts(arts)
        return arts

    # -- windows -------------------------------------------------------------

    def _peak_config(self, arts: TaskArtifacts) -> PeakConfig:
        if arts.peak_config is not None:
            return arts.peak_config
        d = sorted(arts.models)[0]
        signal = first_component_signal(self.calibration_series[d], arts.models[d], self.task.subbands)
        arts.peak_config = PeakConfig.from_calibration(signal, self.sampling_ms)
        return arts.peak_config

    def window_message(self, start_ms: int) -> FeatureMessage:
        if not self.calibrated:
            raise UncalibratedError(f"task {self.task.task_id} has no calibration profile")
        if not self.trained:
            raise UntrainedError(f"task {self.task.task_id} has no trained model")
        arts = self.artifacts
        end_ms = start_ms + self.task.window_ms
        devs = []
        for d in sorted(arts.models):
            model = arts.models[d]
            series = preprocess(self.cache.snapshot(d, start_ms, end_ms, self.sampling_ms), self.denoise_len)
            extra = None
            if self.task.feature_recipe is FeatureRecipe.PCA_PEAK_PHASE:
                bf = build_behavior_features(series, model, self._peak_config(arts), self.task.subbands)
                x, extra = bf.pca_features, bf.extra()
            else:
                v = window_vector(series, self.task.subbands)
                if v.size != model.V:
                    raise ValueError(f"device {d}: window vector has {v.size} entries, model expects {model.V}")
                x = project(model, v)
            devs.append(DeviceFeatures(d, series.link_ids, series.cqi_type, tuple(float(a) for a in x), extra))
        return FeatureMessage(self.gw_id, self.task.task_id, start_ms, start_ms, end_ms, tuple(devs))

    def poll(self, final: bool = False) -> list[FeatureMessage]:
        """Messages for every window completed since the last call, in time order."""
        if not self.ready:
            return []
        devices = self.devices
        mark = self.cache.watermark(devices)
        if mark is None:
            return []
        st = self.state
        if st.next_start_ms is None:
            st.next_start_ms = self.cache.earliest(devices)
        out = []
        hop = self.task.effective_hop_ms
        while mark + self.sampling_ms >= st.next_start_ms + self.task.window_ms:
            start = st.next_start_ms
            st.next_start_ms += hop
            try:
                msg = self.window_message(start)
            except (ValueError, KeyError, FloatingPointError) as exc:
                st.counters.skipped += 1
                log.warning("task %s: window at %d skipped: %s", self.task.task_id, start, exc)
                continue
            if st.last_push_timestamp is not None and msg.timestamp_ms <= st.last_push_timestamp:
                st.counters.skipped += 1
                continue
            st.last_push_timestamp = msg.timestamp_ms
            st.counters.emitted += 1
            out.append(msg)
        return out
