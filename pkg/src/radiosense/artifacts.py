"""Trained per-task artifacts: PCA models per device, optional KNN and peak settings.

The JSON form extends the plain model bundle ``{"task_id", "models"}`` with
optional ``knn`` and ``peak_config`` keys, so either can be loaded here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

from .behavior_features import PeakConfig
from .cqi_core import SensingTask
from .feature_pca import PcaModel, TrainingSet, models_from_json, train_pca
from .inference import KnnClassifier


def train_task_models(sets: Mapping[str, TrainingSet], task: SensingTask) -> dict[str, PcaModel]:
    """One PCA model per device; a fixed P is clamped to the device's V."""
    models = {}
    for dev, ts in sorted(sets.items()):
        sel = task.selection
        if "num_components" in sel:
            sel = {"num_components": min(sel["num_components"], ts.V)}
        models[dev] = train_pca(ts, task.priors, **sel)
    return models


@dataclass
class TaskArtifacts:
    task_id: str
    models: dict[str, PcaModel]
    knn: KnnClassifier | None = None
    peak_config: PeakConfig | None = None

    def to_json(self) -> dict:
        out = {"task_id": self.task_id, "models": [self.models[d].to_json() for d in sorted(self.models)]}
        if self.knn is not None:
            out["knn"] = self.knn.to_json()
        if self.peak_config is not None:
            out["peak_config"] = {"prominence": self.peak_config.prominence, "min_width_ms": self.peak_config.min_width_ms}
        return out

    @classmethod
    def from_json(cls, doc: dict) -> "TaskArtifacts":
        models = models_from_json(doc)
        task_id = doc.get("task_id") or next(iter(models.values())).task_id
        knn = KnnClassifier.from_json(doc["knn"]) if doc.get("knn") else None
        pc = doc.get("peak_config")
        peak = PeakConfig(float(pc["prominence"]), float(pc["min_width_ms"])) if pc else None
        return cls(task_id, models, knn, peak)

    def upload_body(self) -> dict:
        """Request body for the cloud's model upload."""
        body = {"model": {"task_id": self.task_id, "models": [self.models[d].to_json() for d in sorted(self.models)]}}
        if self.knn is not None:
            body["knn"] = self.knn.to_json()
        return body

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TaskArtifacts":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"model file not found: {path}")
        return cls.from_json(json.loads(path.read_text(encoding="utf-8")))
