"""Task registry: tasks, gateway assignment, uploaded models and estimate history.

Mutations go through :class:`TaskRegistry` methods, which the web layer
calls under one lock.  With a journal path, every mutation is appended as
a JSON line and a snapshot is written every ``snapshot_every`` entries, so
tasks and models survive a restart.  Estimates live only in memory.
"""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..cqi_core import FeatureRecipe, OtaProfile, SensingTask
from ..feature_pca import PcaModel, models_from_json
from ..inference import FeatureBatch, KnnClassifier, gaussian_components, infer, knn_components
from ..wire import EstimateMessage, FeatureMessage, check_posteriors

PUBLIC = "public"
PRIVATE = "private"


class RegistryError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


@dataclass
class GatewayInfo:
    gw_id: str
    link_ids: list[int] = field(default_factory=list)
    ota_profile: dict = field(default_factory=lambda: OtaProfile().to_json())
    devices: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"gw_id": self.gw_id, "link_ids": self.link_ids, "ota_profile": self.ota_profile, "devices": self.devices}


@dataclass
class TaskEntry:
    task: SensingTask
    profile: str = PUBLIC
    gw_ids: set[str] = field(default_factory=set)
    models: dict[str, PcaModel] = field(default_factory=dict)
    model_doc: dict | None = None
    knn: KnnClassifier | None = None
    knn_doc: dict | None = None
    model_version: int = 0
    history: deque = field(default_factory=lambda: deque(maxlen=1024))
    latest_msg: dict[str, FeatureMessage] = field(default_factory=dict)
    last_ts: dict[str, int] = field(default_factory=dict)
    last_estimate_ts: int | None = None
    seq: int = 0

    @property
    def has_model(self) -> bool:
        if self.task.feature_recipe is FeatureRecipe.PCA_PEAK_PHASE:
            return self.knn is not None
        return bool(self.models)

    def expected_P(self) -> dict[str, int] | None:
        if self.task.feature_recipe is FeatureRecipe.PCA_PEAK_PHASE or not self.models:
            return None
        return {d: m.P for d, m in self.models.items()}

    def public_json(self) -> dict:
        out = self.task.to_json()
        out["profile"] = self.profile
        out["gw_ids"] = sorted(self.gw_ids)
        out["model_version"] = self.model_version
        out["has_model"] = self.has_model
        return out


class TaskRegistry:
    def __init__(self, journal: str | Path | None = None, history_size: int = 1024, snapshot_every: int = 100):
        self.tasks: dict[str, TaskEntry] = {}
        self.gateways: dict[str, GatewayInfo] = {}
        self.history_size = history_size
        self.journal = Path(journal) if journal else None
        self.snapshot_every = snapshot_every
        self._journal_entries = 0
        if self.journal:
            self._restore()

    # -- persistence -----------------------------------------------------

    @property
    def snapshot_path(self) -> Path | None:
        return self.journal.with_name(self.journal.name + ".snapshot") if self.journal else None

    def _record(self, entry: dict) -> None:
        if not self.journal:
            return
        with open(self.journal, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self._journal_entries += 1
        if self._journal_entries >= self.snapshot_every:
            self.write_snapshot()

    def snapshot(self) -> dict:
        return {
            "gateways": [g.to_json() for g in self.gateways.values()],
            "tasks": [
                {
                    "task": e.task.to_json(),
                    "profile": e.profile,
                    "gw_ids": sorted(e.gw_ids),
                    "model": e.model_doc,
                    "knn": e.knn_doc,
                    "model_version": e.model_version,
                }
                for e in self.tasks.values()
            ],
        }

    def write_snapshot(self) -> None:
        if not self.journal:
            return
        tmp = self.snapshot_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.snapshot(), sort_keys=True), encoding="utf-8")
        os.replace(tmp, self.snapshot_path)
        self.journal.write_text("", encoding="utf-8")
        self._journal_entries = 0

    def _restore(self) -> None:
        journal = self.journal
        self.journal = None  # replay without re-recording
        try:
            snap = journal.with_name(journal.name + ".snapshot")
            if snap.exists():
                doc = json.loads(snap.read_text(encoding="utf-8"))
                for g in doc.get("gateways", []):
                    self.register_gateway(g)
                for t in doc.get("tasks", []):
                    for gw in t["gw_ids"] or [None]:
                        self.start_task(t["task"], gw, t["profile"], t.get("model"), t.get("knn"))
                    if t["task"]["task_id"] in self.tasks:
                        self.tasks[t["task"]["task_id"]].model_version = t.get("model_version", 0)
            if journal.exists():
                for line in journal.read_text(encoding="utf-8").splitlines():
                    if not line.strip():
                        continue
                    try:
                        self._apply(json.loads(line))
                    except (RegistryError, ValueError, KeyError):
                        continue  # a torn last line or an entry that no longer applies
        finally:
            self.journal = journal
            self._journal_entries = sum(1 for _ in open(journal, encoding="utf-8")) if journal.exists() else 0

    def _apply(self, entry: dict) -> None:
        op = entry["op"]
        if op == "register_gateway":
            self.register_gateway(entry["gateway"])
        elif op == "start_task":
            self.start_task(entry["task"], entry.get("gw_id"), entry.get("profile", PUBLIC), entry.get("model"), entry.get("knn"))
        elif op == "stop_task":
            self.stop_task(entry["task_id"], entry.get("gw_id"))
        elif op == "upload_model":
            self.upload_model(entry["task_id"], entry.get("model"), entry.get("knn"))

    # -- control plane -----------------------------------------------------

    def register_gateway(self, obj: dict) -> GatewayInfo:
        gw_id = obj.get("gw_id")
        if not isinstance(gw_id, str) or not gw_id:
            raise RegistryError(400, "gw_id: expected non-empty string")
        try:
            ota = OtaProfile.from_json(obj.get("ota_profile", {})).to_json()
        except (ValueError, TypeError) as exc:
            raise RegistryError(400, f"ota_profile: {exc}") from None
        info = GatewayInfo(gw_id, [int(x) for x in obj.get("link_ids", [])], ota, [str(d) for d in obj.get("devices", [])])
        self.gateways[gw_id] = info
        self._record({"op": "register_gateway", "gateway": info.to_json()})
        return info

    def _load_models(self, task: SensingTask, model: dict | None, knn: dict | None):
        models, clf = {}, None
        try:
            if model is not None:
                models = models_from_json(model)
                for dev, m in models.items():
                    missing = set(task.latent_labels) - set(m.labels)
                    if missing:
                        raise ValueError(f"model for device {dev!r} lacks class_stats for {sorted(missing)}")
            if knn is not None:
                clf = KnnClassifier.from_json(knn)
                if set(clf.classes) != set(task.latent_labels):
                    raise ValueError("knn classes do not match the task labels")
        except (KeyError, ValueError, TypeError) as exc:
            raise RegistryError(400, f"model: {exc}") from None
        return models, clf

    def start_task(
        self, task_obj: dict, gw_id: str | None, profile: str = PUBLIC, model: dict | None = None, knn: dict | None = None
    ) -> tuple[TaskEntry, bool]:
        """Register or re-assert a task; returns ``(entry, created)``."""
        if profile not in (PUBLIC, PRIVATE):
            raise RegistryError(400, "profile: expected 'public' or 'private'")
        try:
            task = SensingTask.from_json(task_obj)
        except (KeyError, ValueError, TypeError) as exc:
            raise RegistryError(400, f"task: {exc}") from None
        models, clf = self._load_models(task, model, knn)
        entry = self.tasks.get(task.task_id)
        created = entry is None
        if entry is not None:
            if entry.task.to_json() != task.to_json() or entry.profile != profile:
                raise RegistryError(409, f"task {task.task_id!r} already exists with a different definition")
        else:
            entry = TaskEntry(task, profile, history=deque(maxlen=self.history_size))
            self.tasks[task.task_id] = entry
        if gw_id:
            entry.gw_ids.add(gw_id)
            if gw_id not in self.gateways:
                ota = task.ota_profile
                self.gateways[gw_id] = GatewayInfo(gw_id, list(ota.neighborhood_links), ota.to_json())
        if model is not None or knn is not None:
            self._set_models(entry, models, model, clf, knn)
        self._record({"op": "start_task", "task": task.to_json(), "gw_id": gw_id, "profile": profile, "model": model, "knn": knn})
        return entry, created

    def _set_models(self, entry, models, model_doc, clf, knn_doc):
        if model_doc is not None and models != {}:
            entry.models, entry.model_doc = models, model_doc
        if knn_doc is not None:
            entry.knn, entry.knn_doc = clf, knn_doc
        entry.model_version += 1

    def upload_model(self, task_id: str, model: dict | None, knn: dict | None) -> TaskEntry:
        entry = self.get(task_id)
        if model is None and knn is None:
            raise RegistryError(400, "model: provide 'model' and/or 'knn'")
        models, clf = self._load_models(entry.task, model, knn)
        self._set_models(entry, models, model, clf, knn)
        self._record({"op": "upload_model", "task_id": task_id, "model": model, "knn": knn})
        return entry

    def stop_task(self, task_id: str, gw_id: str | None) -> None:
        entry = self.get(task_id)
        if gw_id:
            entry.gw_ids.discard(gw_id)
        else:
            entry.gw_ids.clear()
        if not entry.gw_ids:
            del self.tasks[task_id]
        self._record({"op": "stop_task", "task_id": task_id, "gw_id": gw_id})

    def get(self, task_id: str) -> TaskEntry:
        if task_id not in self.tasks:
            raise RegistryError(404, f"unknown task {task_id!r}")
        return self.tasks[task_id]

    def visible(self, authorized: bool) -> list[TaskEntry]:
        return [e for _, e in sorted(self.tasks.items()) if authorized or e.profile == PUBLIC]

    def active_for(self, gw_id: str, task_type: str | None, authorized: bool) -> list[TaskEntry]:
        return [
            e
            for e in self.visible(authorized)
            if gw_id in e.gw_ids and (task_type is None or e.task.task_type.value == task_type)
        ]

    # -- data plane ----------------------------------------------------------

    def _components(self, entry: TaskEntry, msg: FeatureMessage) -> np.ndarray:
        labels = entry.task.latent_labels
        if entry.task.feature_recipe is FeatureRecipe.PCA_PEAK_PHASE:
            x = np.concatenate([d.vector for d in msg.devices])
            if x.size != entry.knn.dim:
                raise RegistryError(400, f"devices: expected {entry.knn.dim} feature values in total, got {x.size}")
            G = knn_components(entry.knn, x)
            order = [entry.knn.classes.index(lab) for lab in labels]
            return G[order]
        feats = {d.device_id: np.asarray(d.features, dtype=float) for d in msg.devices}
        return gaussian_components(entry.models, feats, labels)

    def ingest(self, msg: FeatureMessage) -> tuple[EstimateMessage, int]:
        """Validate ordering, run inference and store the estimate."""
        entry = self.get(msg.task_id)
        if msg.gw_id not in entry.gw_ids:
            raise RegistryError(403, f"gateway {msg.gw_id!r} is not assigned to task {msg.task_id!r}")
        if not entry.has_model:
            raise RegistryError(409, f"task {msg.task_id!r} has no uploaded model")
        last = entry.last_ts.get(msg.gw_id)
        if last is not None and msg.timestamp_ms <= last:
            raise RegistryError(409, f"timestamp_ms {msg.timestamp_ms} not after last processed {last}")
        if entry.last_estimate_ts is not None and msg.timestamp_ms < entry.last_estimate_ts:
            raise RegistryError(409, f"timestamp_ms {msg.timestamp_ms} older than last processed window")
        G_new = self._components(entry, msg)

        entry.latest_msg[msg.gw_id] = msg
        entry.last_ts[msg.gw_id] = msg.timestamp_ms
        horizon = 2 * entry.task.window_ms
        gws, cols = [], []
        for gw in sorted(entry.latest_msg):
            m = entry.latest_msg[gw]
            if gw not in entry.gw_ids or msg.timestamp_ms - m.timestamp_ms > horizon:
                continue
            gws.append(gw)
            cols.append(G_new if gw == msg.gw_id else self._components(entry, m))
        G = np.column_stack(cols)
        batch = FeatureBatch(
            entry.task.task_id,
            msg.timestamp_ms,
            {gw: {d.device_id: np.asarray(d.vector) for d in entry.latest_msg[gw].devices} for gw in gws},
        )
        entry.seq += 1
        est = infer(entry.task, batch, G, seq=entry.seq)
        out = EstimateMessage.from_estimate(est, sent_at=msg.sent_at)
        check_posteriors(list(out.posteriors), list(out.posteriors.values()), out.estimate)
        entry.history.append(out)
        entry.last_estimate_ts = msg.timestamp_ms
        return out, entry.seq
