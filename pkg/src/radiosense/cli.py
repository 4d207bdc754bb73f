"""``radiosense`` command line: simulate, train, evaluate, run services, e2e.

Exit codes: 0 success, 1 usage, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import asyncio
import contextlib
import copy
import csv
import json
import logging
import math
import os
import signal
import socket
import sys
import time
from pathlib import Path

import numpy as np

from . import experiments as ex
from .artifacts import TaskArtifacts, train_task_models
from .cqi_core import CqiType, FeatureRecipe, SensingTask, TaskType, read_trace, write_trace
from .feature_pca import TrainingSet
from .inference import knn_components, posterior
from .simulator import (
    GroundTruthTrace,
    load_scene,
    read_training_sets,
    simulate,
    training_set_from_results,
    write_training_sets,
)
from .wire import WireError

log = logging.getLogger("radiosense")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _dump(obj) -> str:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not JSON serialisable: {type(o).__name__}")

    return json.dumps(obj, sort_keys=True, indent=2, default=default)


def _write_json(path: Path, obj) -> Path:
    path.write_text(_dump(obj) + "\n", encoding="utf-8")
    return path


def _read_json(path: str | Path, what: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return json.loads(p.read_text(encoding="utf-8"))


def _out_dir(path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"output directory not writable: {out}")
    return out


def _emit(args, text: str, obj) -> None:
    print(_dump(obj) if args.json else text)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _flatten(obj, prefix="") -> list[tuple[str, object]]:
    rows = []
    for k in sorted(obj):
        v = obj[k]
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            rows.extend(_flatten(v, key + "."))
        elif not isinstance(v, list):
            rows.append((key, v))
    return rows


def _cfg_overrides(cfg: dict, args) -> dict:
    cfg = copy.deepcopy(cfg)
    kind = cfg["task"]["task_type"]
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "train_seed", None) is not None:
        cfg["train_seed"] = args.train_seed
    if getattr(args, "windows", None) is not None:
        cfg["test_segments" if kind == "activity" else "test_windows"] = args.windows
        if kind == "localization":
            cfg["chunk_windows"] = min(int(cfg.get("chunk_windows", args.windows)), args.windows)
    if getattr(args, "train_windows", None) is not None:
        cfg["train_segments" if kind == "activity" else "train_windows"] = args.train_windows
    return cfg


def _mode(cfg: dict, mode: str | None) -> str:
    return CqiType(mode or cfg["task"]["cqi_type"]).value


# ---------------------------------------------------------------------------
# simulate


def simulate_preset(cfg: dict, mode: str, out: Path) -> list[Path]:
    """Simulate training and test data for a preset into ``out``."""
    task = ex.preset_task(cfg, mode)
    kind = task.task_type
    dn = int(cfg.get("denoise_len", 3))
    paths: list[Path] = []
    chunks = None
    if kind is TaskType.ACTIVITY:
        train = simulate(ex.activity_scene(cfg, task, int(cfg["train_segments"]), int(cfg["train_seed"])))
        paths.extend(train.write(out, "train"))
        test = simulate(ex.activity_scene(cfg, task, int(cfg["test_segments"]), int(cfg["seed"])))
        paths.extend(test.write(out, "trace"))
    else:
        scenes = ex.detection_train_scenes(cfg, task) if kind is TaskType.DETECTION else ex.localization_train_scenes(cfg, task)
        results = {}
        for label in task.latent_labels:
            res = simulate(scenes[label].replace(cqi_type=task.cqi_type))
            results[label] = res
            paths.extend(res.write(out, f"train_{label}"))
        sets = training_set_from_results(results, task, task.subbands, dn)
        paths.append(write_training_sets(out / "training_set.json", sets))
        tests = [ex.detection_test_scene(cfg, task)] if kind is TaskType.DETECTION else ex.localization_test_scenes(cfg, task)
        series, truth, chunks = ex.concat_results([simulate(sc) for sc in tests])
        paths.append(write_trace(out / "trace.csv", [series[d] for d in sorted(series)]))
        paths.append(truth.write(out / "truth.csv"))
    paths.append(_write_json(out / "task.json", task.to_json()))
    paths.append(_write_json(out / "experiment.json", {"preset": cfg, "mode": mode, "chunks": chunks}))
    return paths


def cmd_simulate(args) -> int:
    out = _out_dir(args.out)
    if args.scene:
        res = simulate(load_scene(args.scene))
        paths = list(res.write(out, "trace"))
    else:
        cfg = _cfg_overrides(ex.load_preset(args.preset), args)
        paths = simulate_preset(cfg, _mode(cfg, args.mode), out)
    _emit(args, "\n".join(str(p) for p in paths), {"files": [str(p) for p in paths]})
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _task_with_selection(task: SensingTask, threshold: float | None, components: int | None) -> SensingTask:
    if threshold is None and components is None:
        return task
    obj = task.to_json()
    if threshold is not None:
        obj["eigenvalue_threshold"] = float(threshold)
    if components is not None:
        obj["num_components"] = int(components)
        obj["eigenvalue_threshold"] = 0.0
    return SensingTask.from_json(obj)


def _check_classes(sets: dict[str, TrainingSet], task: SensingTask) -> None:
    for dev, ts in sorted(sets.items()):
        for label in task.latent_labels:
            if label not in ts.classes:
                raise ValueError(f"training set for device {dev!r} has no class {label!r}")


def train_from_dir(data: Path, task: SensingTask) -> TaskArtifacts:
    exp = _read_json(data / "experiment.json", "experiment file")
    cfg = exp["preset"]
    if task.feature_recipe is FeatureRecipe.PCA_PEAK_PHASE:
        series = read_trace(data / "train.csv", int(cfg["sampling_ms"]))
        truth = GroundTruthTrace.read(data / "train_truth.csv")
        return ex.activity_artifacts(cfg, task, series, truth)
    sets = read_training_sets(_existing(data / "training_set.json", "training set"))
    _check_classes(sets, task)
    return TaskArtifacts(task.task_id, train_task_models(sets, task))


def _existing(p: Path, what: str) -> Path:
    if not Path(p).exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return Path(p)


def _train_summary(arts: TaskArtifacts, task: SensingTask) -> dict:
    devices = {}
    for dev, m in sorted(arts.models.items()):
        devices[dev] = {
            "P": m.P,
            "V": m.V,
            "threshold": m.threshold_used,
            "threshold_fallback": m.threshold_fallback,
            "eigenvalues": [float(v) for v in m.spectrum],
        }
    out = {"task_id": task.task_id, "selection": task.selection, "devices": devices}
    if arts.knn is not None:
        out["class_counts"] = {lab: int(sum(v == lab for v in arts.knn.labels)) for lab in task.latent_labels}
    if arts.peak_config is not None:
        out["peak_config"] = {"prominence": arts.peak_config.prominence, "min_width_ms": arts.peak_config.min_width_ms}
    return out


def cmd_train(args) -> int:
    if args.data:
        data = Path(args.data)
        if not data.is_dir():
            raise FileNotFoundError(f"data directory not found: {data}")
        task = SensingTask.from_json(_read_json(data / "task.json", "task file"))
        task = _task_with_selection(task, args.threshold, args.components)
        arts = train_from_dir(data, task)
        counts_src = None
        if task.feature_recipe is not FeatureRecipe.PCA_PEAK_PHASE:
            counts_src = read_training_sets(data / "training_set.json")
        out = Path(args.out) if args.out else data / "model.json"
    else:
        if not (args.training_set and args.task):
            raise UsageError("train needs --data DIR, or both --training-set and --task")
        task = SensingTask.from_json(_read_json(args.task, "task file"))
        task = _task_with_selection(task, args.threshold, args.components)
        if task.feature_recipe is FeatureRecipe.PCA_PEAK_PHASE:
            raise UsageError("activity tasks train from a simulated data directory (--data)")
        counts_src = read_training_sets(_existing(Path(args.training_set), "training set"))
        _check_classes(counts_src, task)
        arts = TaskArtifacts(task.task_id, train_task_models(counts_src, task))
        if not args.out:
            raise UsageError("--out is required with --training-set")
        out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    arts.save(out)
    summary = _train_summary(arts, task)
    if counts_src is not None:
        summary["class_counts"] = {
            dev: {lab: int(ts.classes[lab].shape[0]) for lab in task.latent_labels} for dev, ts in sorted(counts_src.items())
        }
    summary["model"] = str(out)
    lines = [f"task {task.task_id}: selection {task.selection}"]
    for dev, d in summary["devices"].items():
        lines.append(f"{dev}: P={d['P']} of V={d['V']}")
        lines.append("  eigenvalues: " + " ".join(f"{v:.6g}" for v in d["eigenvalues"]))
    counts = summary.get("class_counts", {})
    for key, val in counts.items():
        lines.append(f"{key}: " + ", ".join(f"{k}={v}" for k, v in val.items()) if isinstance(val, dict) else f"class {key}: {val}")
    lines.append(f"model written to {out}")
    _emit(args, "\n".join(lines), summary)
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def _write_decisions(path: Path, result: ex.RunResult) -> None:
    task = result.task
    positions = result.extra.get("cell_positions")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["index", "timestamp_ms", "truth", "estimate"]
        if positions:
            head += ["truth_x", "truth_y", "est_x", "est_y"]
        w.writerow(head)
        if task.feature_recipe is FeatureRecipe.PCA_PEAK_PHASE:
            times = result.extra["starts"]
            est = [str(e) for e in result.estimates]
        else:
            times = [e.timestamp_ms for e in result.estimates]
            est = [e.label for e in result.estimates]
        for i, (t, tr, e) in enumerate(zip(times, result.truth, est)):
            row = [i, int(t), tr, e]
            if positions:
                row += [repr(float(v)) for v in (*positions[tr], *positions[e])]
            w.writerow(row)


def _write_posterior_grid(path: Path, result: ex.RunResult) -> None:
    task = result.task
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp_ms", *task.latent_labels])
        if task.feature_recipe is FeatureRecipe.PCA_PEAK_PHASE:
            knn = result.extra["artifacts"].knn
            for t, x in zip(result.extra["starts"], result.extra["features"]):
                post = posterior(task.priors, knn_components(knn, x)[:, None])
                w.writerow([int(t), *(repr(float(p)) for p in post)])
        else:
            for e in result.estimates:
                w.writerow([int(e.timestamp_ms), *(repr(float(p)) for p in e.posteriors)])


def _evaluate_dir(data: Path, model: Path) -> tuple[dict, dict[str, ex.RunResult]]:
    exp = _read_json(data / "experiment.json", "experiment file")
    cfg, mode = exp["preset"], exp["mode"]
    task = SensingTask.from_json(_read_json(data / "task.json", "task file"))
    arts = TaskArtifacts.load(model)
    series = read_trace(data / "trace.csv", int(cfg["sampling_ms"]))
    truth = GroundTruthTrace.read(_existing(data / "truth.csv", "truth file"))
    dn = int(cfg.get("denoise_len", 3))
    if task.feature_recipe is FeatureRecipe.PCA_PEAK_PHASE:
        if arts.knn is None or arts.peak_config is None:
            raise ValueError(f"model {model} has no KNN classifier or peak settings for an activity task")
        result = ex.evaluate_activity(cfg, task, arts, series, truth)
    else:
        chunks = [tuple(c) for c in exp["chunks"]] if exp.get("chunks") else None
        cells = ex.cell_positions(cfg) if task.task_type is TaskType.LOCALIZATION else None
        result = ex.evaluate_pca(task, arts.models, series, truth, dn, chunks, cells)
    report = {"preset": cfg.get("name", task.task_type.value), "task_type": task.task_type.value, "modes": {mode: result.metrics}}
    return report, {mode: result}


def cmd_evaluate(args) -> int:
    if args.data:
        data = Path(args.data)
        if not data.is_dir():
            raise FileNotFoundError(f"data directory not found: {data}")
        model = Path(args.model) if args.model else data / "model.json"
        report, runs = _evaluate_dir(data, model)
        out = _out_dir(args.out or data)
    else:
        if not args.out:
            raise UsageError("--out is required with --preset")
        cfg = _cfg_overrides(ex.load_preset(args.preset), args)
        modes = [args.mode] if args.mode else ["PHY", "UP"]
        report, runs = ex.run_preset(cfg, modes)
        out = _out_dir(args.out)
    primary = next(iter(runs))
    for mode, result in runs.items():
        suffix = "" if mode == primary else f"_{mode}"
        _write_decisions(out / f"decisions{suffix}.csv", result)
        _write_posterior_grid(out / f"posterior_grid{suffix}.csv", result)
    _write_json(out / "report.json", report)
    lines = [f"{report['preset']} ({report['task_type']})"]
    for mode, metrics in report["modes"].items():
        lines.append(f"[{mode}]")
        lines.extend(f"  {k:<32} {_fmt(v)}" for k, v in _flatten(metrics))
    lines.append(f"report written to {out / 'report.json'}")
    _emit(args, "\n".join(lines), report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# services


def cmd_cloud(args) -> int:
    from .cloud_service import CloudConfig, serve
    from .edge_gateway.ingest import parse_address

    config = CloudConfig.load(args.config)
    host, port = parse_address(args.bind)
    serve(config, host, port, args.journal)
    return EXIT_OK


def cmd_edge(args) -> int:
    from .edge_gateway import EdgeConfig, run_edge

    if not args.replay and not args.listen:
        raise UsageError("edge needs --replay FILE or --listen HOST:PORT")
    if args.replay:
        _existing(Path(args.replay), "replay trace")
    config = EdgeConfig.load(args.config)
    counters = run_edge(config, args.cloud_url, args.gw_id, args.replay, args.speed, args.listen)
    print(_dump(counters) if args.json else " ".join(f"{k}={v}" for k, v in counters.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# e2e


def _free_port(host: str) -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


async def _stop_process(proc: asyncio.subprocess.Process | None, timeout: float = 5.0) -> None:
    if proc is None or proc.returncode is not None:
        return
    with contextlib.suppress(ProcessLookupError):
        proc.send_signal(signal.SIGINT)
    try:
        await asyncio.wait_for(proc.wait(), timeout)
    except asyncio.TimeoutError:
        with contextlib.suppress(ProcessLookupError):
            proc.kill()
        await proc.wait()


def _percentile(values: list[float], q: float) -> float:
    return float(np.percentile(values, q)) if values else math.nan


LATENCY_HEADER = ["seq", "timestamp_ms", "estimate", "truth", "sent_at_ms", "received_at_ms", "latency_ms"]


async def _e2e(args, data: Path, model: Path, out: Path) -> dict:
    import httpx
    import websockets

    exp = _read_json(data / "experiment.json", "experiment file")
    cfg = exp["preset"]
    task = SensingTask.from_json(_read_json(data / "task.json", "task file"))
    if args.hop_ms is not None:
        task = SensingTask.from_json({**task.to_json(), "hop_ms": args.hop_ms})
    arts = TaskArtifacts.load(model)
    truth = GroundTruthTrace.read(_existing(data / "truth.csv", "truth file"))
    trace = _existing(data / "trace.csv", "trace file")
    host = "127.0.0.1"
    port = args.port or _free_port(host)
    base = f"http://{host}:{port}"
    tt = task.task_type.value
    edge_cfg = _write_json(
        out / "edge.json",
        {"models": {task.task_id: str(model.resolve())}, "sampling_ms": int(cfg["sampling_ms"]), "poll_interval_ms": 1000},
    )
    journal = out / "journal.jsonl"
    for p in (journal, Path(f"{journal}.snapshot")):
        p.unlink(missing_ok=True)

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    with contextlib.suppress(NotImplementedError):
        loop.add_signal_handler(signal.SIGINT, stop.set)
        loop.add_signal_handler(signal.SIGTERM, stop.set)

    cloud = edge = None
    rows: list[dict] = []
    interrupted = False
    logs = [open(out / "cloud.log", "wb"), open(out / "edge.log", "wb")]
    csv_fh = open(out / "latency.csv", "w", encoding="utf-8", newline="")
    writer = csv.writer(csv_fh, lineterminator="\n")
    writer.writerow(LATENCY_HEADER)
    csv_fh.flush()
    child = [sys.executable, "-m", "radiosense"]
    try:
        cloud = await asyncio.create_subprocess_exec(
            *child, "cloud", "--bind", f"{host}:{port}", "--journal", str(journal),
            stdout=logs[0], stderr=logs[0], start_new_session=True,
        )
        async with httpx.AsyncClient(timeout=5.0) as client:
            deadline = time.monotonic() + args.startup_timeout
            while True:
                if cloud.returncode is not None:
                    raise RuntimeFailure(f"cloud exited with status {cloud.returncode} during start-up (see {out / 'cloud.log'})")
                with contextlib.suppress(httpx.HTTPError):
                    if (await client.get(f"{base}/api/health")).status_code == 200:
                        break
                if time.monotonic() > deadline or stop.is_set():
                    raise RuntimeFailure(f"cloud did not become healthy on {base} within {args.startup_timeout} s")
                await asyncio.sleep(0.1)
            body = {"task": task.to_json(), "model": arts.upload_body()["model"]}
            if arts.knn is not None:
                body["knn"] = arts.knn.to_json()
            r = await client.post(f"{base}/api/{tt}/start_task", params={"GW": args.gw_id}, json=body)
            if r.status_code not in (200, 201):
                raise RuntimeFailure(f"start_task failed with {r.status_code}: {r.text}")

        ws_url = f"ws://{host}:{port}/api/{tt}/subscribe?GW={args.gw_id}&task_id={task.task_id}"
        async with websockets.connect(ws_url) as ws:
            last_rx = [time.monotonic()]

            async def receive():
                async for raw in ws:
                    now = time.time() * 1000.0
                    m = json.loads(raw)
                    sent = m.get("sent_at")
                    row = {
                        "seq": m.get("seq"),
                        "timestamp_ms": int(m["timestamp_ms"]),
                        "estimate": m["estimate"],
                        "truth": truth.label_at(int(m["timestamp_ms"])),
                        "sent_at_ms": sent,
                        "received_at_ms": now,
                        "latency_ms": None if sent is None else now - float(sent),
                    }
                    rows.append(row)
                    writer.writerow([row[k] if row[k] is not None else "" for k in LATENCY_HEADER])
                    csv_fh.flush()
                    last_rx[0] = time.monotonic()

            rx = asyncio.create_task(receive())
            edge = await asyncio.create_subprocess_exec(
                *child, "edge", "--config", str(edge_cfg), "--cloud-url", base, "--gw-id", args.gw_id,
                "--replay", str(trace), "--speed", str(args.speed),
                stdout=logs[1], stderr=logs[1], start_new_session=True,
            )
            edge_done = asyncio.create_task(edge.wait())
            stop_wait = asyncio.create_task(stop.wait())
            await asyncio.wait({edge_done, stop_wait, rx}, return_when=asyncio.FIRST_COMPLETED)
            interrupted = stop.is_set()
            if not interrupted and edge.returncode not in (None, 0):
                raise RuntimeFailure(f"edge exited with status {edge.returncode} (see {out / 'edge.log'})")
            if rx.done() and not interrupted and not edge_done.done():
                raise RuntimeFailure("WebSocket subscription closed before the replay finished")
            # let in-flight estimates arrive
            while not interrupted and not rx.done() and time.monotonic() - last_rx[0] < args.settle_s:
                await asyncio.sleep(0.05)
                interrupted = stop.is_set()
            for t in (rx, stop_wait, edge_done):
                t.cancel()
            await asyncio.gather(rx, stop_wait, edge_done, return_exceptions=True)
    finally:
        await _stop_process(edge)
        await _stop_process(cloud)
        csv_fh.close()
        for fh in logs:
            fh.close()
        with contextlib.suppress(NotImplementedError):
            loop.remove_signal_handler(signal.SIGINT)
            loop.remove_signal_handler(signal.SIGTERM)

    lat = [r["latency_ms"] for r in rows if r["latency_ms"] is not None]
    out_of_order = sum(1 for a, b in zip(rows, rows[1:]) if b["timestamp_ms"] <= a["timestamp_ms"])
    span = max(truth.window_starts_ms) + task.window_ms - min(truth.window_starts_ms) if len(truth.labels) else 0
    hop = task.effective_hop_ms
    expected = int((span - task.window_ms) // hop) + 1 if span >= task.window_ms else 0
    correct = sum(r["estimate"] == r["truth"] for r in rows)
    return {
        "interrupted": interrupted,
        "estimates": len(rows),
        "expected_windows": expected,
        "out_of_order": out_of_order,
        "latency_p50_ms": _percentile(lat, 50),
        "latency_p95_ms": _percentile(lat, 95),
        "latency_max_ms": max(lat) if lat else math.nan,
        "accuracy": correct / len(rows) if rows else math.nan,
        "latency_csv": str(out / "latency.csv"),
    }


def cmd_e2e(args) -> int:
    out = _out_dir(args.out)
    if args.data:
        data = Path(args.data)
        if not data.is_dir():
            raise FileNotFoundError(f"data directory not found: {data}")
        model = Path(args.model) if args.model else data / "model.json"
    else:
        cfg = _cfg_overrides(ex.load_preset(args.preset), args)
        data = out / "data"
        data.mkdir(parents=True, exist_ok=True)
        simulate_preset(cfg, _mode(cfg, args.mode), data)
        task = SensingTask.from_json(_read_json(data / "task.json", "task file"))
        model = data / "model.json"
        train_from_dir(data, task).save(model)
    summary = asyncio.run(_e2e(args, data, model, out))
    failures = []
    if summary["interrupted"]:
        failures.append("interrupted")
    else:
        if summary["estimates"] < summary["expected_windows"]:
            failures.append(f"received {summary['estimates']} estimates for {summary['expected_windows']} windows")
        if not summary["latency_p95_ms"] < args.budget_ms:
            failures.append(f"p95 latency {summary['latency_p95_ms']:.3f} ms is not below {args.budget_ms} ms")
    if summary["out_of_order"]:
        failures.append(f"{summary['out_of_order']} out-of-order estimates")
    summary["passed"] = not failures
    summary["failures"] = failures
    _write_json(out / "e2e.json", summary)
    text = "\n".join(
        [f"{k:<18} {_fmt(v)}" for k, v in summary.items() if k not in ("failures", "passed")]
        + [("PASS" if not failures else "FAIL: " + "; ".join(failures))]
    )
    _emit(args, text, summary)
    return EXIT_OK if not failures else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")

    preset = _Parser(add_help=False)
    preset.add_argument("--mode", choices=[c.value for c in CqiType], help="CQI type (default: the preset's)")
    preset.add_argument("--seed", type=int, help="test scene seed")
    preset.add_argument("--train-seed", type=int, help="training scene seed")
    preset.add_argument("--windows", type=int, help="number of test windows or segments")
    preset.add_argument("--train-windows", type=int, help="training windows or segments per run")

    p = _Parser(prog="radiosense", description="Passive radio sensing: simulate, train, evaluate and serve.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common, preset], help="simulate training and test traces")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help="bundled preset name or preset JSON path")
    src.add_argument("--scene", help="scene JSON file")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", parents=[common], help="train PCA models (and KNN for activity)")
    t.add_argument("--data", help="directory written by simulate")
    t.add_argument("--training-set", help="training set JSON")
    t.add_argument("--task", help="task JSON")
    sel = t.add_mutually_exclusive_group()
    sel.add_argument("--threshold", type=float, help="keep eigenvalues >= this value")
    sel.add_argument("--components", type=int, help="keep exactly this many components")
    t.add_argument("--out", help="model JSON path (default DATA/model.json)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common, preset], help="offline metrics, decisions and posterior grid")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help="bundled preset name or preset JSON path (runs in memory)")
    src.add_argument("--data", help="directory written by simulate")
    e.add_argument("--model", help="model JSON (default DATA/model.json)")
    e.add_argument("--out", help="output directory (default DATA)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("e2e", parents=[common, preset], help="cloud + edge + WebSocket run on loopback")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--preset", default="detection", help="preset to simulate and train (default detection)")
    src.add_argument("--data", help="directory written by simulate")
    r.add_argument("--model", help="model JSON (default DATA/model.json)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--port", type=int, default=0, help="cloud port (default: a free port)")
    r.add_argument("--gw-id", default="gw1")
    r.add_argument("--speed", type=float, default=1.0, help="replay speed; 1.0 is real time")
    r.add_argument("--budget-ms", type=float, default=100.0, help="p95 latency budget")
    r.add_argument("--hop-ms", type=int, help="window hop for the streamed task (default: one window)")
    r.add_argument("--startup-timeout", type=float, default=20.0)
    r.add_argument("--settle-s", type=float, default=1.0, help="idle time after the replay before shutdown")
    r.set_defaults(func=cmd_e2e)

    g = sub.add_parser("edge", parents=[common], help="run the edge gateway")
    g.add_argument("--config", help="edge config JSON")
    g.add_argument("--cloud-url", required=True)
    g.add_argument("--gw-id", required=True)
    g.add_argument("--replay", help="CSV trace to replay")
    g.add_argument("--speed", type=float, default=1.0)
    g.add_argument("--listen", help="HOST:PORT for newline CSV over TCP")
    g.set_defaults(func=cmd_edge)

    c = sub.add_parser("cloud", parents=[common], help="run the cloud service")
    c.add_argument("--config", help="cloud config JSON")
    c.add_argument("--bind", default="127.0.0.1:8080", help="HOST:PORT")
    c.add_argument("--journal", help="registry journal path")
    c.set_defaults(func=cmd_cloud)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0; argument errors exit with EXIT_USAGE
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"radiosense {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, ValueError, KeyError, WireError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"radiosense {args.command}: {msg}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeFailure as exc:
        print(f"radiosense {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print(f"radiosense {args.command}: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"radiosense {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
