import asyncio
import json

import httpx
import numpy as np
import pytest

from radiosense import experiments as ex
from radiosense.artifacts import TaskArtifacts, train_task_models
from radiosense.behavior_features import EXTRA_KEYS
from radiosense.cloud_service import CloudConfig, create_app
from radiosense.cqi_core import CqiType, OtaProfile, UncalibratedError, trace_text
from radiosense.edge_gateway.cache import EdgeCache, LinkBuffer
from radiosense.edge_gateway.config import EdgeConfig
from radiosense.edge_gateway.daemon import EdgeGateway
from radiosense.edge_gateway.ingest import FileReplay, TcpIngest, ingest_file, iter_lines, parse_address
from radiosense.edge_gateway.runner import CalibrationShortfall, TaskRunner, UntrainedError
from radiosense.edge_gateway.uploader import Uploader, backoff_delay_ms
from radiosense.simulator import Scene, simulate, wifi_link_deployment
from radiosense.wire import FeatureMessage

from conftest import make_series, make_task


def rows(n, device="d0", links=1, step=60):
    out = []
    for i in range(n):
        out.append(f"{(i // links) * step},{device},{i % links},0,UP,{-50.0 + 0.01 * i!r},0.0")
    return out


def fill(cache, series_list):
    return iter_lines(trace_text(series_list).splitlines(), cache)


# ---------------------------------------------------------------------------
# ingestion and cache


def test_well_formed_file(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("time_ms,device_id,link_id,freq_index,cqi_type,re,im\n" + "\n".join(rows(1000, links=4)) + "\n")
    cache = EdgeCache()
    sink = ingest_file(p, cache)
    assert sink.rows == 1000
    assert cache.sample_count() == 1000 and cache.counters.malformed == 0


def test_malformed_rows_skipped(tmp_path):
    lines = rows(1000, links=4)
    bad = ["x,d0,0,0,UP,1,0", "60,d0,0,0,UP", "60,d0,0,0,XX,1,0", "60,,0,0,UP,1,0", "60,d0,a,0,UP,1,0",
           "60,d0,0,-1,UP,1,0", "60,d0,0,0,UP,nan,0", "60,d0,0,0,UP,1,inf", "60,d0,0,0,UP,,0", "60,d0,0,0,UP,1,0,9"]
    for i, b in enumerate(bad):
        lines[100 * i + 50] = b
    p = tmp_path / "t.csv"
    p.write_text("time_ms,device_id,link_id,freq_index,cqi_type,re,im\n" + "\n".join(lines) + "\n")
    cache = EdgeCache()
    ingest_file(p, cache)
    assert cache.sample_count() == 990 and cache.counters.malformed == 10


def test_reorder_within_horizon_and_late_drop():
    cache = EdgeCache(reorder_horizon_ms=500)
    lines = [f"{t},d0,0,0,UP,{float(t)!r},0.0" for t in (0, 120, 60, 600, 1200, 240, 900)]
    iter_lines(lines, cache)
    s = cache.snapshot("d0", 0, 2000, 60)
    assert s.times_ms.tolist() == [0, 60, 120, 600, 900, 1200]
    assert cache.counters.late_dropped == 1  # 240 lags 1200 by more than 500 ms


def test_eviction_bounds_memory():
    cache = EdgeCache(capacity=50)
    iter_lines(rows(20_000, links=2, step=1), cache)
    for b in cache.devices["d0"].links.values():
        assert len(b) == 50 and len(b._times) <= max(1024, 50) + 50
    assert cache.counters.evicted == 20_000 - 100
    assert cache.earliest() == 9_950


def test_link_buffer_validation():
    with pytest.raises(ValueError):
        LinkBuffer(0)


def test_mixed_cqi_type_counted_malformed():
    cache = EdgeCache()
    iter_lines(["0,d0,0,0,UP,1.0,0.0", "60,d0,0,0,PHY,1.0,0.5"], cache)
    assert cache.counters.malformed == 1


def test_tcp_ingest():
    async def scenario():
        cache = EdgeCache()
        src = TcpIngest(cache, "127.0.0.1", 0)
        seen = []
        src.on_packet = seen.append
        host, port = await src.start()
        _, w = await asyncio.open_connection(host, port)
        w.write(("\n".join(rows(30) + ["garbage"]) + "\n").encode())
        await w.drain()
        w.close()
        for _ in range(100):
            if cache.sample_count() == 30 and cache.counters.malformed == 1:
                break
            await asyncio.sleep(0.01)
        await src.close()
        return cache, seen

    cache, seen = asyncio.run(scenario())
    assert cache.sample_count() == 30 and cache.counters.malformed == 1
    assert seen == [60 * i for i in range(30)]
    assert parse_address("127.0.0.1:80") == ("127.0.0.1", 80)
    with pytest.raises(ValueError):
        parse_address("nohost")


def test_replay_duty_cycle_decimates(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("\n".join(rows(40)) + "\n")

    async def replay(duty):
        r = FileReplay(p, EdgeCache(), speed=0, duty_cycle_ms=duty)
        await r.run()
        return r.forwarded_times

    full, half = asyncio.run(replay(60)), asyncio.run(replay(120))
    assert np.diff(full).tolist() == [60] * 39
    assert np.diff(half).tolist() == [120] * 19


def test_replay_cadence_follows_timestamps(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("\n".join(rows(12)) + "\n")

    async def scenario():
        loop = asyncio.get_running_loop()
        r = FileReplay(p, EdgeCache(), speed=1.0)
        stamps = []
        r.on_packet = lambda t: stamps.append(loop.time())
        await r.run()
        return np.diff(stamps) * 1000

    gaps = asyncio.run(scenario())
    assert np.all(np.abs(gaps - 60) < 30)
    assert abs(gaps.mean() - 60) < 5


# ---------------------------------------------------------------------------
# calibration and the feature pipeline


def test_constant_calibration():
    cache = EdgeCache()
    fill(cache, [make_series(np.full((1, 2, 20), -47.5))])
    runner = TaskRunner(make_task(num_components=1), cache, "gw1")
    v1 = runner.calibrate(600)
    prof = cache.profiles["T1"]["d0"]
    np.testing.assert_array_equal(prof.mean, -47.5)
    np.testing.assert_array_equal(prof.std, 0.0)
    assert runner.calibrate(600) == v1 + 1
    assert cache.profiles["T1"]["d0"].version == v1 + 1


def test_calibration_shortfall():
    cache = EdgeCache()
    fill(cache, [make_series(np.zeros(5))])
    runner = TaskRunner(make_task(), cache, "gw1")
    with pytest.raises(CalibrationShortfall) as e:
        runner.calibrate(600)
    assert e.value.shortfall == {"d0": 300} and "300 ms short" in str(e.value)
    with pytest.raises(CalibrationShortfall):
        TaskRunner(make_task(), EdgeCache(), "gw1").calibrate(600)


def test_calibration_matches_simulator_background():
    scene = Scene(wifi_link_deployment(antennas=3), duration_ms=60 * 500, seed=11)
    cache = EdgeCache()
    fill(cache, list(simulate(scene).series.values()))
    runner = TaskRunner(make_task(), cache, "gw1", denoise_len=1)
    runner.calibrate(60 * 500)
    prof = cache.profiles["T1"]["rx"]
    d = np.hypot(5.0, np.array([0.0, 0.1, 0.2]))  # antenna offsets along y
    base = -40.0 - 20.0 * np.log10(d)
    assert np.all(np.abs(prof.mean[0] - base) <= 3 * 1.0 / np.sqrt(500))


@pytest.fixture(scope="module")
def detection_setup():
    cfg = ex.load_preset("detection")
    cfg.update(train_windows=20, test_windows=8)
    task = ex.preset_task(cfg, "PHY")
    task = type(task).from_json({**task.to_json(), "num_components": 12, "eigenvalue_threshold": 0.0})
    arts = TaskArtifacts(task.task_id, train_task_models(ex.pca_training(cfg, task), task))
    series, truth, _ = ex.pca_test(cfg, task)
    return task, arts, series


def test_guard_needs_calibration_and_model(detection_setup):
    task, arts, series = detection_setup
    cache = EdgeCache()
    fill(cache, list(series.values()))
    bare = TaskRunner(task, cache, "gw1")
    assert bare.poll() == []
    with pytest.raises(UncalibratedError):
        bare.window_message(0)
    bare.calibrate()
    with pytest.raises(UntrainedError):
        bare.window_message(0)
    assert bare.poll() == []


def test_one_window_message_shape(detection_setup):
    task, arts, series = detection_setup
    cache = EdgeCache()
    fill(cache, list(series.values()))
    runner = TaskRunner(task, cache, "gw1", artifacts=arts)
    runner.calibrate()
    msg = runner.window_message(600)
    assert isinstance(msg, FeatureMessage)
    assert (msg.window_start_ms, msg.window_end_ms, msg.timestamp_ms) == (600, 1200, 600)
    (dev,) = msg.devices
    assert len(dev.features) == 12 and dev.extra is None and dev.cqi_type is CqiType.PHY
    msgs = runner.poll()
    assert len(msgs) == 8
    ts = [m.timestamp_ms for m in msgs]
    assert ts == sorted(set(ts)) and runner.state.counters.emitted == 8
    assert runner.poll() == []


def test_activity_message_carries_extras():
    cfg = ex.load_preset("activity")
    cfg.update(train_segments=30, test_segments=6)
    task = ex.preset_task(cfg)
    train = ex.activity_scene(cfg, task, cfg["train_segments"], cfg["train_seed"])
    res = simulate(train)
    arts = ex.activity_artifacts(cfg, task, res.series, res.truth)
    test = simulate(ex.activity_scene(cfg, task, cfg["test_segments"], cfg["seed"]))
    cache = EdgeCache()
    fill(cache, list(test.series.values()))
    runner = TaskRunner(task, cache, "gw1", artifacts=arts)
    runner.calibrate()
    msgs = runner.poll()
    assert msgs
    for m in msgs:
        (dev,) = m.devices
        assert list(dev.extra) == list(EXTRA_KEYS)
        assert len(dev.features) == arts.models[dev.device_id].P
        assert dev.vector.size == arts.knn.dim


def test_local_training_from_backlog():
    cache = EdgeCache()
    rng = np.random.default_rng(0)
    quiet = rng.normal(-50, 0.2, (1, 3, 100))
    busy = quiet + rng.normal(0, 3, (1, 3, 100)) * (np.arange(100) >= 50)
    fill(cache, [make_series(busy)])
    runner = TaskRunner(make_task(num_components=2), cache, "gw1")
    with pytest.raises(ValueError, match="unknown label"):
        runner.record_training_window("noise", 0)
    for k in range(4):
        runner.record_training_window("empty", 600 * k)
    with pytest.raises(ValueError, match="no windows for class 'occupied'"):
        runner.train_from_backlog()
    for k in range(5, 8):
        runner.record_training_window("occupied", 600 * k)
    arts = runner.train_from_backlog()
    assert arts.models["d0"].P == 2 and cache.model_versions["T1"] == 1


# ---------------------------------------------------------------------------
# uploader


def test_backoff_schedule():
    assert [backoff_delay_ms(i) for i in range(8)] == [250, 500, 1000, 2000, 4000, 8000, 8000, 8000]
    with pytest.raises(ValueError):
        backoff_delay_ms(-1)


def msg(ts):
    from radiosense.wire import DeviceFeatures

    return FeatureMessage("gw1", "T1", ts, ts, ts + 600, (DeviceFeatures("rx", (0,), CqiType.UP, (float(ts),)),))


def test_uploader_buffers_through_outage():
    async def scenario():
        loop = asyncio.get_running_loop()
        t0 = loop.time()
        delivered = []

        def handler(request):
            if loop.time() - t0 < 2.0:
                raise httpx.ConnectError("down", request=request)
            delivered.append(json.loads(request.content)["timestamp_ms"])
            return httpx.Response(202, json={"accepted": True})

        async with httpx.AsyncClient(transport=httpx.MockTransport(handler)) as client:
            up = Uploader("http://cloud", capacity=1000, base_ms=50, cap_ms=400, client=client)
            task = asyncio.create_task(up.run())
            for i in range(20):
                up.submit(msg(600 * i))
                await asyncio.sleep(0.05)
            ok = await up.drain(timeout_s=10)
            task.cancel()
        return ok, delivered, up.counters

    ok, delivered, counters = asyncio.run(scenario())
    assert ok and delivered == [600 * i for i in range(20)]
    assert counters.delivered == 20 and counters.failed_attempts > 0 and counters.overflow_dropped == 0


def test_uploader_overflow_and_permanent_rejection():
    async def scenario():
        seen = []

        def handler(request):
            ts = json.loads(request.content)["timestamp_ms"]
            seen.append(ts)
            return httpx.Response(409 if ts == 1200 else 202)

        async with httpx.AsyncClient(transport=httpx.MockTransport(handler)) as client:
            up = Uploader("http://cloud", capacity=3, client=client)
            for i in range(5):
                up.submit(msg(600 * i))
            task = asyncio.create_task(up.run())
            await up.drain(timeout_s=5)
            task.cancel()
        return seen, up.counters

    seen, c = asyncio.run(scenario())
    assert seen == [1200, 1800, 2400]
    assert (c.overflow_dropped, c.rejected, c.delivered) == (2, 1, 2)


# ---------------------------------------------------------------------------
# control plane against an in-process cloud


def cloud_client(app):
    return httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://cloud")


def test_poller_starts_and_stops_tasks(detection_setup):
    task, arts, _ = detection_setup

    async def scenario():
        app = create_app(CloudConfig())
        async with cloud_client(app) as client:
            gw = EdgeGateway(EdgeConfig(), "http://cloud", "gw1", client=client)
            assert await gw.poll_once() and gw.runners == {}
            body = {"task": task.to_json(), **arts.upload_body()}
            assert (await client.post("/api/detection/start_task", params={"GW": "gw1"}, json=body)).status_code == 201
            await gw.poll_once()
            started = list(gw.runners)
            await client.post("/api/detection/stop_task", params={"task_id": task.task_id})
            await gw.poll_once()
            stopped = list(gw.runners)
        return started, stopped

    started, stopped = asyncio.run(scenario())
    assert started == [task.task_id] and stopped == []


def test_unreachable_cloud_keeps_tasks():
    async def scenario():
        def handler(request):
            raise httpx.ConnectError("down", request=request)

        async with httpx.AsyncClient(transport=httpx.MockTransport(handler)) as client:
            gw = EdgeGateway(EdgeConfig(), "http://cloud", "gw1", client=client)
            await gw.apply([make_task().to_json()])
            ok = await gw.poll_once()
            kept = list(gw.runners)
            for t in gw._pipelines.values():
                t.cancel()
        return ok, kept, gw.poll_errors

    ok, kept, errors = asyncio.run(scenario())
    assert not ok and kept == ["T1"] and errors == 1


def test_ota_change_bumps_version_and_sets_replay_duty(tmp_path):
    async def scenario():
        gw = EdgeGateway(EdgeConfig(), "http://cloud", "gw1")
        gw.source = FileReplay(tmp_path / "unused.csv", gw.cache, 0)
        await gw.apply([make_task().to_json()])
        v0, d0 = gw.ota_version, gw.source.duty_cycle_ms
        slow = make_task(ota_profile=OtaProfile(duty_cycle_ms=120, cqi_sampling_ms=120))
        await gw.apply([slow.to_json()])
        out = (v0, d0, gw.ota_version, gw.source.duty_cycle_ms, gw.runners["T1"].state.ota_version)
        for t in gw._pipelines.values():
            t.cancel()
        return out

    v0, d0, v1, d1, runner_v = asyncio.run(scenario())
    assert (v0, d0) == (0, 60)
    assert (v1, d1, runner_v) == (1, 120, 1)


def test_daemon_replay_end_to_end(tmp_path, detection_setup):
    task, arts, series = detection_setup
    from radiosense.cqi_core import write_trace

    trace = write_trace(tmp_path / "trace.csv", list(series.values()))
    model = arts.save(tmp_path / "model.json")

    async def scenario():
        app = create_app(CloudConfig())
        async with cloud_client(app) as client:
            await client.post("/api/detection/start_task", params={"GW": "gw1"}, json={"task": task.to_json()})
            cfg = EdgeConfig(models={task.task_id: str(model)})
            counters = await EdgeGateway(cfg, "http://cloud", "gw1", client=client).run(trace, speed=0)
            hist = (await client.get("/api/detection/get_LatentValues", params={"history": 100})).json()
        return counters, hist

    counters, hist = asyncio.run(scenario())
    assert counters["tasks"][task.task_id]["emitted"] == 8
    assert counters["delivered"] == 8 and counters["rejected"] == 0
    assert [h["seq"] for h in hist] == list(range(1, 9))
    assert [h["timestamp_ms"] for h in hist] == [600 * i for i in range(8)]


def test_edge_config_validation(tmp_path):
    with pytest.raises(ValueError, match="unknown edge config keys"):
        EdgeConfig.from_json({"nope": 1})
    with pytest.raises(ValueError, match="push_buffer"):
        EdgeConfig.from_json({"push_buffer": 0})
    p = tmp_path / "sub" / "edge.json"
    p.parent.mkdir()
    p.write_text(json.dumps({"models": {"T1": "m.json"}}))
    assert EdgeConfig.load(p).models["T1"] == str((p.parent / "m.json").resolve())
    with pytest.raises(FileNotFoundError):
        EdgeConfig.load(tmp_path / "missing.json")
