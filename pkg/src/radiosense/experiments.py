"""Offline runs of the three sensing tasks on simulator presets.

Each run simulates training scenes (one per latent label), trains the
per-device models, simulates a test scene with ground truth and scores
the decisions.  Everything is seeded from the preset, so two runs of the
same preset give identical reports.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np

from .behavior_features import PeakConfig, build_behavior_features, first_component_signal
from .cqi_core import CqiSeries, CqiType, Layout, SensingTask, TaskType, window
from .artifacts import TaskArtifacts, train_task_models
from .feature_pca import PcaModel, TrainingSet, project
from .inference import (
    LatentEstimate,
    FeatureBatch,
    KnnClassifier,
    cross_validate,
    detection_metrics,
    gaussian_components,
    infer,
    localization_rmse,
)
from .pipeline import preprocess, window_vector
from .simulator import (
    ACTIVITIES,
    GroundTruthTrace,
    Scene,
    SimResult,
    Target,
    default_cells,
    deployment_preset,
    emit_training_set,
    random_position,
    simulate,
)

PRESETS = ("detection", "localization", "activity")


def load_preset(name_or_path: str | Path) -> dict:
    """Load a bundled preset by name, or any preset JSON file by path."""
    p = Path(name_or_path)
    if p.suffix == ".json" or p.exists():
        if not p.exists():
            raise FileNotFoundError(f"preset file not found: {p}")
        return json.loads(p.read_text(encoding="utf-8"))
    if name_or_path not in PRESETS:
        raise ValueError(f"unknown preset {name_or_path!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("radiosense.presets").joinpath(f"{name_or_path}.json").read_text(encoding="utf-8")
    return json.loads(text)


def preset_task(cfg: dict, cqi_type: CqiType | str | None = None) -> SensingTask:
    obj = copy.deepcopy(cfg["task"])
    if cqi_type is not None:
        obj["cqi_type"] = CqiType(cqi_type).value
    task = SensingTask.from_json(obj)
    sel = cfg.get("selection", {}).get(task.cqi_type.value)
    if sel:
        # per-mode selection override
        obj["eigenvalue_threshold"] = float(sel.get("threshold", 0.0))
        if "num_components" in sel:
            obj["num_components"] = int(sel["num_components"])
        task = SensingTask.from_json(obj)
    return task


def _base_scene(cfg: dict, cqi_type: CqiType, duration_ms: int, targets, seed: int, task: SensingTask) -> Scene:
    dep = deployment_preset(cfg["deployment"])
    F = int(cfg.get("num_subcarriers", 30)) if cqi_type is CqiType.PHY else 1
    return Scene(
        deployment=dep,
        targets=tuple(targets),
        noise_preset=cfg.get("noise_preset", "high_snr"),
        seed=int(seed),
        cqi_type=cqi_type,
        duration_ms=int(duration_ms),
        sampling_ms=int(cfg.get("sampling_ms", 60)),
        num_subcarriers=F,
        carrier_hz=float(cfg.get("carrier_hz", 2.44e9)),
        bandwidth_hz=float(cfg.get("bandwidth_hz", 20e6)),
        rho=float(cfg.get("rho", 0.5)),
        task_type=task.task_type,
        window_ms=task.window_ms,
        cells=default_cells(dep) if task.task_type is TaskType.LOCALIZATION else None,
    )


# ---------------------------------------------------------------------------
# scenes per task


def detection_train_scenes(cfg: dict, task: SensingTask) -> dict[str, Scene]:
    n, W = int(cfg["train_windows"]), task.window_ms
    dep = deployment_preset(cfg["deployment"])
    rng = np.random.default_rng(int(cfg["train_seed"]))
    wps = tuple((i * W, *random_position(rng, dep.area)) for i in range(n))
    seed = int(cfg["train_seed"])
    empty = _base_scene(cfg, task.cqi_type, n * W, (), seed, task)
    occupied = _base_scene(cfg, task.cqi_type, n * W, (Target(wps),), seed + 1, task)
    return {"empty": empty, "occupied": occupied}


def detection_test_scene(cfg: dict, task: SensingTask) -> Scene:
    """Each window: occupied with ``occupancy_prob`` at a uniform random position."""
    n, W = int(cfg["test_windows"]), task.window_ms
    dep = deployment_preset(cfg["deployment"])
    rng = np.random.default_rng(int(cfg["seed"]))
    wps, present = [], []
    for i in range(n):
        wps.append((i * W, *random_position(rng, dep.area)))
        if rng.random() < float(cfg.get("occupancy_prob", 0.5)):
            present.append((i * W, (i + 1) * W))
    if not present:
        present = [(n * W, n * W + 1)]
    return _base_scene(cfg, task.cqi_type, n * W, (Target(tuple(wps), tuple(present)),), int(cfg["seed"]), task)


def _cell_waypoints(cfg: dict, labels, rng, W: int) -> tuple:
    cells = default_cells(deployment_preset(cfg["deployment"]))
    spread = float(cfg.get("cell_spread", 0.8))
    out = []
    for i, lab in enumerate(labels):
        cx, cy = cells.center(lab)
        out.append(
            (
                i * W,
                cx + rng.uniform(-1, 1) * spread * cells.dx / 2,
                cy + rng.uniform(-1, 1) * spread * cells.dy / 2,
            )
        )
    return tuple(out)


def localization_train_scenes(cfg: dict, task: SensingTask) -> dict[str, Scene]:
    n, W = int(cfg["train_windows"]), task.window_ms
    out = {}
    for k, lab in enumerate(task.latent_labels):
        rng = np.random.default_rng([int(cfg["train_seed"]), k])
        wps = _cell_waypoints(cfg, [lab] * n, rng, W)
        out[lab] = _base_scene(cfg, task.cqi_type, n * W, (Target(wps),), int(cfg["train_seed"]) * 1000 + k, task)
    return out


def localization_test_scenes(cfg: dict, task: SensingTask) -> list[Scene]:
    """Test windows in chunks; each window a uniformly drawn cell."""
    n, W = int(cfg["test_windows"]), task.window_ms
    chunk = int(cfg.get("chunk_windows", 60))
    rng = np.random.default_rng(int(cfg["seed"]))
    labels = [task.latent_labels[i] for i in rng.integers(0, task.K, n)]
    scenes = []
    for c, start in enumerate(range(0, n, chunk)):
        part = labels[start : start + chunk]
        wps = _cell_waypoints(cfg, part, rng, W)
        scenes.append(_base_scene(cfg, task.cqi_type, len(part) * W, (Target(wps),), int(cfg["seed"]) * 1000 + c, task))
    return scenes


def activity_scene(cfg: dict, task: SensingTask, n: int, seed: int) -> Scene:
    """Back-to-back segments with a balanced, shuffled activity script."""
    W = task.window_ms
    rng = np.random.default_rng(seed)
    labels = [ACTIVITIES[i % len(ACTIVITIES)] for i in range(n)]
    rng.shuffle(labels)
    lo, hi = cfg.get("amplitude_range", (0.7, 1.3))
    acts = tuple((i * W, (i + 1) * W, lab) for i, lab in enumerate(labels))
    amps = tuple(float(rng.uniform(lo, hi)) for _ in labels)
    x, y = cfg.get("driver_position", (1.0, 0.9))
    target = Target(((0, float(x), float(y)),), activity=acts, amplitude=amps)
    return _base_scene(cfg, task.cqi_type, n * W, (target,), seed, task)


# ---------------------------------------------------------------------------
# shared steps


def window_features(
    series: Mapping[str, CqiSeries], task: SensingTask, models: Mapping[str, PcaModel], denoise_len: int = 3
) -> list[tuple[int, dict[str, np.ndarray]]]:
    """``(window_start_ms, {device: x})`` for every full window, in time order."""
    per_dev = {}
    for dev, s in sorted(series.items()):
        if dev not in models:
            continue
        wins = window(preprocess(s, denoise_len), task.window_ms, task.window_ms)
        per_dev[dev] = {w.start_ms: project(models[dev], window_vector(w, task.subbands)) for w in wins}
    starts = sorted(set.intersection(*(set(v) for v in per_dev.values())))
    return [(t, {d: per_dev[d][t] for d in per_dev}) for t in starts]


def classify(
    task: SensingTask, models: Mapping[str, PcaModel], windows, gw_id: str = "gw1"
) -> list[LatentEstimate]:
    out = []
    for seq, (t, feats) in enumerate(windows):
        G = gaussian_components(models, feats, task.latent_labels)[:, None]
        batch = FeatureBatch(task.task_id, int(t), {gw_id: feats})
        out.append(infer(task, batch, G, seq=seq))
    return out


@dataclass
class RunResult:
    task: SensingTask
    metrics: dict
    estimates: list = field(default_factory=list)
    truth: list = field(default_factory=list)
    models: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _score(task: SensingTask, estimates, truth: GroundTruthTrace | list[str], cell_positions=None) -> tuple[dict, list]:
    truth_labels = [truth.label_at(e.timestamp_ms) for e in estimates] if isinstance(truth, GroundTruthTrace) else truth
    est = [e.label for e in estimates]
    if task.task_type is TaskType.DETECTION:
        m = detection_metrics([int(x == "occupied") for x in est], [int(x == "occupied") for x in truth_labels])
    else:
        m = {}
    acc = float(np.mean([a == b for a, b in zip(est, truth_labels)])) if est else 0.0
    m.setdefault("accuracy", acc)
    if task.task_type is TaskType.LOCALIZATION:
        m["rmse_m"] = localization_rmse(est, truth_labels, cell_positions)
    m["windows"] = len(est)
    return m, truth_labels


# ---------------------------------------------------------------------------
# runs


def slice_series(s: CqiSeries, start_ms: int, end_ms: int) -> CqiSeries:
    keep = (s.times_ms >= start_ms) & (s.times_ms < end_ms)
    return s.replace(times_ms=s.times_ms[keep], values=s.values[..., keep])


def concat_results(results: list[SimResult]) -> tuple[dict[str, CqiSeries], GroundTruthTrace, list[tuple[int, int]]]:
    """Join independently simulated chunks back to back on one time axis.

    Returns the joined series, the joined ground truth and the ``[start, end)``
    span of every chunk so evaluation can keep chunks apart.
    """
    series, starts, labels, spans = {}, [], [], []
    offset = 0
    for res in results:
        for d, s in res.series.items():
            shifted = s.replace(times_ms=s.times_ms + offset)
            prev = series.get(d)
            series[d] = shifted if prev is None else prev.replace(
                times_ms=np.concatenate([prev.times_ms, shifted.times_ms]),
                values=np.concatenate([prev.values, shifted.values], axis=2),
            )
        starts.append(res.truth.window_starts_ms + offset)
        labels.extend(res.truth.labels)
        spans.append((offset, offset + res.scene.duration_ms))
        offset += res.scene.duration_ms
    return series, GroundTruthTrace(np.concatenate(starts), tuple(labels)), spans


def evaluate_pca(
    task: SensingTask,
    models: Mapping[str, PcaModel],
    series: Mapping[str, CqiSeries],
    truth: GroundTruthTrace,
    denoise_len: int = 3,
    chunks: list[tuple[int, int]] | None = None,
    cell_positions: Mapping | None = None,
) -> RunResult:
    """Window, project and classify a test trace; chunks are preprocessed separately."""
    if not chunks:
        chunks = [(min(s.start_ms for s in series.values()), max(s.end_ms for s in series.values()))]
    wins = []
    for a, b in chunks:
        part = {d: slice_series(s, a, b) for d, s in series.items()}
        wins.extend(window_features(part, task, models, denoise_len))
    estimates = classify(task, models, wins)
    metrics, labels = _score(task, estimates, truth, cell_positions)
    metrics["P"] = {d: m.P for d, m in models.items()}
    extra = {"cell_positions": dict(cell_positions)} if cell_positions is not None else {}
    return RunResult(task, metrics, estimates, labels, dict(models), extra)


def pca_training(cfg: dict, task: SensingTask) -> dict[str, TrainingSet]:
    dn = int(cfg.get("denoise_len", 3))
    scenes = detection_train_scenes(cfg, task) if task.task_type is TaskType.DETECTION else localization_train_scenes(cfg, task)
    return emit_training_set(scenes, task, task.subbands, dn)


def pca_test(cfg: dict, task: SensingTask) -> tuple[dict[str, CqiSeries], GroundTruthTrace, list[tuple[int, int]]]:
    scenes = [detection_test_scene(cfg, task)] if task.task_type is TaskType.DETECTION else localization_test_scenes(cfg, task)
    return concat_results([simulate(sc) for sc in scenes])


def cell_positions(cfg: dict):
    return default_cells(deployment_preset(cfg["deployment"])).positions


def run_detection(cfg: dict, cqi_type: CqiType | str = CqiType.PHY) -> RunResult:
    task = preset_task(cfg, cqi_type)
    models = train_task_models(pca_training(cfg, task), task)
    series, truth, chunks = pca_test(cfg, task)
    return evaluate_pca(task, models, series, truth, int(cfg.get("denoise_len", 3)), chunks)


def run_localization(cfg: dict, cqi_type: CqiType | str = CqiType.PHY) -> RunResult:
    task = preset_task(cfg, cqi_type)
    models = train_task_models(pca_training(cfg, task), task)
    series, truth, chunks = pca_test(cfg, task)
    return evaluate_pca(task, models, series, truth, int(cfg.get("denoise_len", 3)), chunks, cell_positions(cfg))


def _segments(series: Mapping[str, CqiSeries], truth: GroundTruthTrace, task: SensingTask, dn: int):
    """Scripted segments of the first device with their ground-truth labels."""
    first = preprocess(series[sorted(series)[0]], dn)
    segs = window(first, task.window_ms, task.window_ms)
    return [truth.label_at(s.start_ms) for s in segs], segs


def activity_artifacts(cfg: dict, task: SensingTask, series: Mapping[str, CqiSeries], truth: GroundTruthTrace) -> TaskArtifacts:
    """PCA on segment means, peak thresholds from 'none' segments, KNN on training features."""
    dn = int(cfg.get("denoise_len", 3))
    labels, segs = _segments(series, truth, task, dn)
    classes = {k: np.array([window_vector(s) for s, lab in zip(segs, labels) if lab == k]) for k in task.latent_labels}
    dev = segs[0].device_id
    F, L, _ = segs[0].values.shape
    ts = TrainingSet(task.task_id, classes, Layout(F, L, 1), dev)
    model = train_task_models({dev: ts}, task)[dev]
    calib = np.concatenate([first_component_signal(s, model) for s, lab in zip(segs, labels) if lab == "none"])
    peak_cfg = PeakConfig.from_calibration(
        calib, segs[0].sampling_ms, float(cfg.get("peak_prominence_mult", 2.0)), float(cfg.get("peak_width_mult", 2.0))
    )
    X = np.array([build_behavior_features(s, model, peak_cfg).as_array() for s in segs])
    knn = KnnClassifier.fit(X, labels, int(cfg.get("knn_k", 6)), task.latent_labels)
    return TaskArtifacts(task.task_id, {dev: model}, knn, peak_cfg)


def evaluate_activity(
    cfg: dict, task: SensingTask, arts: TaskArtifacts, series: Mapping[str, CqiSeries], truth: GroundTruthTrace
) -> RunResult:
    """10-fold cross-validated KNN over the behavior features of the test segments."""
    dn = int(cfg.get("denoise_len", 3))
    dev = sorted(arts.models)[0]
    model, peak_cfg = arts.models[dev], arts.peak_config
    labels, segs = _segments(series, truth, task, dn)
    feats = [build_behavior_features(s, model, peak_cfg) for s in segs]
    X = np.array([f.as_array() for f in feats])
    cv = cross_validate(X, labels, int(cfg.get("folds", 10)), int(cfg.get("knn_k", 6)), int(cfg["seed"]), task.latent_labels)

    def class_mean(attr, lab):
        return float(np.mean([attr(f) for f, l in zip(feats, labels) if l == lab]))

    summary = {
        lab: {
            "segments": int(sum(l == lab for l in labels)),
            "peak_count": class_mean(lambda f: f.peak.peak_count, lab),
            "peak_width_ms": class_mean(lambda f: f.peak.mean_peak_width_ms, lab),
            "phase_dev_mean": class_mean(lambda f: f.phase_mean_dev, lab),
            "phase_dev_min": class_mean(lambda f: f.phase_min_dev, lab),
        }
        for lab in task.latent_labels
    }
    metrics = {
        "accuracy": cv.accuracy,
        "confusion": cv.confusion.tolist(),
        "labels": list(cv.labels),
        "P": model.P,
        "peak_config": {"prominence": peak_cfg.prominence, "min_width_ms": peak_cfg.min_width_ms},
        "per_class": summary,
        "windows": len(labels),
    }
    return RunResult(
        task,
        metrics,
        list(cv.predictions),
        labels,
        {dev: model},
        {"features": X, "peak_config": peak_cfg, "behavior": feats, "starts": [s.start_ms for s in segs], "artifacts": arts},
    )


def run_activity(cfg: dict) -> RunResult:
    task = preset_task(cfg, CqiType.PHY)
    train = simulate(activity_scene(cfg, task, int(cfg["train_segments"]), int(cfg["train_seed"])))
    arts = activity_artifacts(cfg, task, train.series, train.truth)
    test = simulate(activity_scene(cfg, task, int(cfg["test_segments"]), int(cfg["seed"])))
    return evaluate_activity(cfg, task, arts, test.series, test.truth)


def run_preset(name_or_cfg, modes=("PHY", "UP")) -> dict:
    """Full report for a preset; detection/localization compare CSI and RSSI."""
    cfg = load_preset(name_or_cfg) if not isinstance(name_or_cfg, dict) else name_or_cfg
    kind = cfg["task"]["task_type"]
    if kind == "activity":
        r = run_activity(cfg)
        return {"preset": cfg.get("name", kind), "task_type": kind, "modes": {"PHY": r.metrics}}, {"PHY": r}
    runner = run_detection if kind == "detection" else run_localization
    runs = {m: runner(cfg, m) for m in modes}
    report = {"preset": cfg.get("name", kind), "task_type": kind, "modes": {m: r.metrics for m, r in runs.items()}}
    return report, runs
