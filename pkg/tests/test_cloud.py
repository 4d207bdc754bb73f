import asyncio
import json
import time

import jsonschema
import numpy as np
import pytest
from fastapi.testclient import TestClient

from radiosense.artifacts import TaskArtifacts
from radiosense.cloud_service import CloudConfig, create_app
from radiosense.cloud_service.app import Hub, Subscriber
from radiosense.cloud_service.registry import TaskEntry
from radiosense.cqi_core import Layout
from radiosense.feature_pca import TrainingSet, train_pca

from conftest import make_task

TOKEN = "s3cret"
AUTH = {"Authorization": f"Bearer {TOKEN}"}


def detection_task(task_id="T1", **kw):
    return make_task(task_id=task_id, num_components=2, **kw)


def artifacts(task, devices=("rx",)):
    rng = np.random.default_rng(0)
    models = {}
    for dev in devices:
        ts = TrainingSet(task.task_id, {"empty": rng.normal(0, 1, (20, 4)), "occupied": rng.normal(3, 1, (20, 4))}, Layout(4, 1, 1), dev)
        models[dev] = train_pca(ts, task.priors, num_components=2)
    return TaskArtifacts(task.task_id, models)


def start_body(task, arts=None, profile=None):
    body = {"task": task.to_json()}
    if arts is not None:
        body.update(arts.upload_body())
    if profile:
        body["profile"] = profile
    return body


def feature_msg(task_id="T1", ts=0, feats=(0.0, 0.0), gw="gw1", dev="rx"):
    return {
        "gw_id": gw,
        "task_id": task_id,
        "timestamp_ms": ts,
        "window": {"start_ms": ts, "end_ms": ts + 600},
        "devices": [{"device_id": dev, "link_ids": [0], "cqi_type": "UP", "features": list(feats)}],
    }


@pytest.fixture
def client():
    with TestClient(create_app(CloudConfig(private_token=TOKEN))) as c:
        yield c


@pytest.fixture
def running(client):
    task = detection_task()
    r = client.post("/api/detection/start_task", params={"GW": "gw1"}, json=start_body(task, artifacts(task)))
    assert r.status_code == 201
    return client


# ---------------------------------------------------------------------------
# start / stop / control plane


def test_start_task_listed_for_gateway(client):
    task = detection_task()
    r = client.post("/api/detection/start_task", params={"GW": "gw1"}, json=start_body(task))
    assert r.status_code == 201 and r.json()["created"] is True
    active = client.get("/api/detection/CQI_feature", params={"GW": "gw1"}).json()
    assert active["gw_id"] == "gw1"
    assert [t["task_id"] for t in active["active_tasks"]] == ["T1"]
    assert active["active_tasks"][0]["ota_profile"] == task.ota_profile.to_json()
    assert client.get("/api/detection/CQI_feature", params={"GW": "nobody"}).json()["active_tasks"] == []


def test_start_task_idempotent_and_conflict(client):
    task = detection_task()
    body = start_body(task)
    client.post("/api/detection/start_task", params={"GW": "gw1"}, json=body)
    r = client.post("/api/detection/start_task", params={"GW": "gw1"}, json=body)
    assert r.status_code == 201 and r.json()["created"] is False
    assert len(client.app.state.registry.tasks) == 1
    assert r.json()["gw_ids"] == ["gw1"]
    other = detection_task(priors=(0.3, 0.7))
    assert client.post("/api/detection/start_task", params={"GW": "gw1"}, json=start_body(other)).status_code == 409


def test_start_task_validation(client):
    doc = detection_task().to_json()
    doc["priors"] = [0.5, 0.4]
    assert client.post("/api/detection/start_task", json={"task": doc}).status_code == 400
    ok = detection_task().to_json()
    assert client.post("/api/localization/start_task", json={"task": ok}).status_code == 400
    assert client.post("/api/weather/start_task", json={"task": ok}).status_code == 404
    r = client.post("/api/detection/start_task", content=b"{not json", headers={"content-type": "application/json"})
    assert r.status_code == 400


def test_two_tasks_stable_order_and_stop(client):
    for tid in ("T2", "T1"):
        client.post("/api/detection/start_task", params={"GW": "gw1"}, json=start_body(detection_task(tid)))
    ids = [t["task_id"] for t in client.get("/api/detection/CQI_feature", params={"GW": "gw1"}).json()["active_tasks"]]
    assert ids == ["T1", "T2"]
    for tid in ("T1", "T2"):
        assert client.post("/api/detection/stop_task", params={"task_id": tid, "GW": "gw1"}).json()["removed"]
    assert client.get("/api/detection/CQI_feature", params={"GW": "gw1"}).json()["active_tasks"] == []
    assert client.post("/api/detection/stop_task", params={"task_id": "T1"}).status_code == 404


def test_upload_model_bumps_version(client):
    task = detection_task()
    client.post("/api/detection/start_task", params={"GW": "gw1"}, json=start_body(task))
    r = client.post("/api/detection/upload_model", params={"task_id": "T1"}, json=artifacts(task).upload_body())
    assert r.status_code == 200 and r.json()["model_version"] == 1
    assert client.post("/api/detection/upload_model", params={"task_id": "T1"}, json={}).status_code == 400
    bad = artifacts(task).upload_body()
    bad["model"]["models"][0]["class_stats"] = bad["model"]["models"][0]["class_stats"][:1]
    assert client.post("/api/detection/upload_model", params={"task_id": "T1"}, json=bad).status_code == 400


# ---------------------------------------------------------------------------
# ingestion and retrieval


def test_post_then_get(running):
    assert running.get("/api/detection/get_LatentValues", params={"GW": "gw1"}).status_code == 204
    r = running.post("/api/post_CQIfeatures", json=feature_msg(feats=(0.1, -0.2)))
    assert r.status_code == 202 and r.json() == {"accepted": True, "seq": 1}
    est = running.get("/api/detection/get_LatentValues", params={"GW": "gw1"}).json()
    post = est["posteriors"]
    assert abs(sum(post.values()) - 1) < 1e-9
    assert est["estimate"] == max(post, key=post.get)
    assert est["gw_ids"] == ["gw1"] and est["seq"] == 1


def test_history(running):
    for i in range(3):
        assert running.post("/api/post_CQIfeatures", json=feature_msg(ts=600 * i)).status_code == 202
    hist = running.get("/api/detection/get_LatentValues", params={"GW": "gw1", "history": 5}).json()
    assert [h["seq"] for h in hist] == [1, 2, 3]
    assert [h["timestamp_ms"] for h in hist] == [0, 600, 1200]
    assert running.get("/api/detection/get_LatentValues", params={"history": 0}).status_code == 400


def test_ingest_errors(running):
    r = running.post("/api/post_CQIfeatures", json=feature_msg(feats=(0.0,)))
    assert r.status_code == 400
    assert r.json()["error"] == "devices[0].features: expected 2" and r.json()["path"] == "devices[0].features"
    assert running.post("/api/post_CQIfeatures", json=feature_msg(task_id="nope")).status_code == 404
    assert running.post("/api/post_CQIfeatures", json=feature_msg(gw="gw9")).status_code == 403
    assert running.post("/api/post_CQIfeatures", json=feature_msg(dev="other")).status_code == 400
    assert running.post("/api/post_CQIfeatures", json=feature_msg(ts=600)).status_code == 202
    assert running.post("/api/post_CQIfeatures", json=feature_msg(ts=600)).status_code == 409
    assert running.post("/api/post_CQIfeatures", json=feature_msg(ts=0)).status_code == 409
    bad = feature_msg(ts=1200)
    del bad["window"]
    r = running.post("/api/post_CQIfeatures", json=bad)
    assert r.status_code == 400 and r.json()["path"] == "window"
    assert running.get("/api/detection/get_LatentValues", params={"task_id": "nope"}).status_code == 404


def test_post_without_model_conflicts(client):
    client.post("/api/detection/start_task", params={"GW": "gw1"}, json=start_body(detection_task()))
    assert client.post("/api/post_CQIfeatures", json=feature_msg()).status_code == 409


def test_post_latency_under_50ms(running):
    times = []
    for i in range(20):
        t0 = time.perf_counter()
        assert running.post("/api/post_CQIfeatures", json=feature_msg(ts=600 * i)).status_code == 202
        times.append(time.perf_counter() - t0)
    assert np.median(times) < 0.050
    assert running.get("/api/detection/get_LatentValues").json()["seq"] == 20


def test_two_gateways_and_staleness(client):
    task = detection_task()
    arts = artifacts(task)
    for gw in ("gw1", "gw2"):
        client.post("/api/detection/start_task", params={"GW": gw}, json=start_body(task, arts))
    client.post("/api/post_CQIfeatures", json=feature_msg(ts=0, gw="gw1"))
    client.post("/api/post_CQIfeatures", json=feature_msg(ts=600, gw="gw2"))
    assert client.get("/api/detection/get_LatentValues").json()["gw_ids"] == ["gw1", "gw2"]
    # gw1's last message is now more than two windows old
    client.post("/api/post_CQIfeatures", json=feature_msg(ts=1800, gw="gw2"))
    assert client.get("/api/detection/get_LatentValues").json()["gw_ids"] == ["gw2"]


# ---------------------------------------------------------------------------
# private profile


def test_private_task_invisible_without_token(client):
    task = detection_task("P1")
    body = start_body(task, artifacts(task), profile="private")
    assert client.post("/api/detection/start_task", params={"GW": "gw1"}, json=body).status_code == 401
    assert client.post("/api/detection/start_task", params={"GW": "gw1"}, json=body, headers=AUTH).status_code == 201
    assert client.post("/api/post_CQIfeatures", json=feature_msg("P1")).status_code == 401
    assert client.post("/api/post_CQIfeatures", json=feature_msg("P1"), headers=AUTH).status_code == 202

    unauth = [
        client.get("/api/detection/CQI_feature", params={"GW": "gw1"}).json()["active_tasks"],
        client.get("/api/catalog").json()["sensing_tasks"],
    ]
    for listing in unauth:
        assert all(t["task_id"] != "P1" for t in listing)
    text = json.dumps(client.get("/api/catalog").json())
    assert '"P1"' not in text
    for params in ({"GW": "gw1"}, {"task_id": "P1"}, {}):
        assert client.get("/api/detection/get_LatentValues", params=params).status_code == 401
    assert client.post("/api/detection/stop_task", params={"task_id": "P1"}).status_code == 401
    with client.websocket_connect("/api/detection/subscribe?task_id=P1") as ws:
        with pytest.raises(Exception) as e:
            ws.receive_text()
    assert getattr(e.value, "code", None) == 1008

    assert client.get("/api/detection/get_LatentValues", params={"task_id": "P1"}, headers=AUTH).status_code == 200
    ids = [t["task_id"] for t in client.get("/api/catalog", headers=AUTH).json()["sensing_tasks"]]
    assert ids == ["P1"]


# ---------------------------------------------------------------------------
# WebSocket


def test_subscribers_receive_identical_ordered_streams(running):
    with running.websocket_connect("/api/detection/subscribe?GW=gw1") as a, running.websocket_connect(
        "/api/detection/subscribe?GW=gw1"
    ) as b:
        for i in range(5):
            running.post("/api/post_CQIfeatures", json=feature_msg(ts=600 * i))
        got_a = [json.loads(a.receive_text()) for _ in range(5)]
        got_b = [json.loads(b.receive_text()) for _ in range(5)]
    assert got_a == got_b
    assert [e["seq"] for e in got_a] == [1, 2, 3, 4, 5]
    assert [e["timestamp_ms"] for e in got_a] == sorted(e["timestamp_ms"] for e in got_a)
    hist = running.get("/api/detection/get_LatentValues", params={"history": 5}).json()
    assert hist == got_a


def test_subscriber_sees_only_estimates_while_connected(running):
    running.post("/api/post_CQIfeatures", json=feature_msg(ts=0))
    with running.websocket_connect("/api/detection/subscribe?task_id=T1") as ws:
        running.post("/api/post_CQIfeatures", json=feature_msg(ts=600))
        assert json.loads(ws.receive_text())["seq"] == 2


def test_unknown_type_subscription_closed(client):
    with client.websocket_connect("/api/weather/subscribe") as ws:
        with pytest.raises(Exception) as e:
            ws.receive_text()
    assert getattr(e.value, "code", None) == 1008


def test_slow_subscriber_dropped():
    async def scenario():
        task = detection_task()
        entry = TaskEntry(task, gw_ids={"gw1"})
        hub = Hub(backlog=3)
        slow = Subscriber("detection", None, None, False, asyncio.Queue(maxsize=3))
        fast = Subscriber("detection", None, None, False, asyncio.Queue(maxsize=100))
        hub.add(slow)
        hub.add(fast)
        for i in range(5):
            hub.publish(entry, str(i))
            await fast.queue.get()
        return hub, slow

    hub, slow = asyncio.run(scenario())
    assert slow.overflowed and slow not in hub.subscribers
    assert slow.queue.get_nowait() is None
    assert len(hub.subscribers) == 1


# ---------------------------------------------------------------------------
# catalog


def test_catalog_contents_and_schema(running):
    running.post("/api/register_gateway", json={"gw_id": "gw1", "link_ids": [0, 1, 2], "devices": ["rx"]})
    cat = running.get("/api/catalog").json()
    ops = {(s["method"], s["path"]) for s in cat["services"]}
    assert {
        ("POST", "/api/post_CQIfeatures"),
        ("GET", "/api/{task_type}/get_LatentValues"),
        ("POST", "/api/{task_type}/start_task"),
        ("GET", "/api/{task_type}/CQI_feature"),
        ("WS", "/api/{task_type}/subscribe"),
    } <= ops
    (gw,) = cat["radio_links"]
    assert gw["gw_id"] == "gw1" and gw["link_ids"] == [0, 1, 2]
    assert set(gw["ota_profile"]) >= {"carrier_frequency_hz", "bandwidth_hz", "duty_cycle_ms", "cqi_type"}
    schema = running.get("/api/catalog/schema").json()
    jsonschema.validate(cat, schema)
    jsonschema.validate(running.get("/api/catalog", headers=AUTH).json(), running.get("/api/catalog/schema", headers=AUTH).json())
    running.post("/api/post_CQIfeatures", json=feature_msg())
    est = running.get("/api/detection/get_LatentValues").json()
    jsonschema.validate(est, cat["schemas"]["LatentEstimate"])
    jsonschema.validate(feature_msg(), cat["schemas"]["FeatureMessage"])


def test_catalog_schema_rejects_malformed(client):
    schema = client.get("/api/catalog/schema").json()
    cat = client.get("/api/catalog").json()
    del cat["services"]
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate(cat, schema)


def test_register_gateway_validation(client):
    assert client.post("/api/register_gateway", json={"link_ids": [1]}).status_code == 400
    assert client.post("/api/register_gateway", json={"gw_id": "g", "ota_profile": {"duty_cycle_ms": -5}}).status_code == 400


# ---------------------------------------------------------------------------
# durability


@pytest.mark.parametrize("snapshot_every", [1000, 2])
def test_registry_survives_restart(tmp_path, snapshot_every):
    journal = tmp_path / "registry.jsonl"
    cfg = CloudConfig(private_token=TOKEN, snapshot_every=snapshot_every)
    task, priv = detection_task("T1"), detection_task("P1")
    with TestClient(create_app(cfg, journal)) as c:
        c.post("/api/register_gateway", json={"gw_id": "gw1", "link_ids": [0]})
        c.post("/api/detection/start_task", params={"GW": "gw1"}, json=start_body(task))
        c.post("/api/detection/upload_model", params={"task_id": "T1"}, json=artifacts(task).upload_body())
        c.post("/api/detection/start_task", params={"GW": "gw1"}, json=start_body(priv, artifacts(priv), "private"), headers=AUTH)
        c.post("/api/detection/start_task", params={"GW": "gw2"}, json=start_body(detection_task("T3")))
        c.post("/api/detection/stop_task", params={"task_id": "T3"})
        c.post("/api/post_CQIfeatures", json=feature_msg(ts=0))
        before = c.get("/api/catalog", headers=AUTH).json()
    if snapshot_every == 2:
        assert journal.with_name(journal.name + ".snapshot").exists()
    with TestClient(create_app(cfg, journal)) as c:
        after = c.get("/api/catalog", headers=AUTH).json()
        assert after["sensing_tasks"] == before["sensing_tasks"]
        assert after["radio_links"] == before["radio_links"]
        assert [t["task_id"] for t in after["sensing_tasks"]] == ["P1", "T1"]
        assert all(t["has_model"] for t in after["sensing_tasks"])
        assert "P1" not in json.dumps(c.get("/api/catalog").json())
        # estimates are not persisted, but the restored model serves new ones
        assert c.get("/api/detection/get_LatentValues", params={"task_id": "T1"}).status_code == 204
        assert c.post("/api/post_CQIfeatures", json=feature_msg(ts=600)).status_code == 202


def test_torn_journal_line_ignored(tmp_path):
    journal = tmp_path / "j.jsonl"
    with TestClient(create_app(CloudConfig(), journal)) as c:
        c.post("/api/detection/start_task", params={"GW": "gw1"}, json=start_body(detection_task()))
    with open(journal, "a") as fh:
        fh.write('{"op": "start_task", "task": {')
    with TestClient(create_app(CloudConfig(), journal)) as c:
        assert list(c.app.state.registry.tasks) == ["T1"]
