"""Gateway daemon: ingestion, per-task pipelines, uploader and config poller.

All activities are asyncio tasks on one event loop.  Ingestion is the only
writer into the cache; each task pipeline reads copied window snapshots;
the uploader owns the retry buffer.
"""

from __future__ import annotations

import asyncio
import logging
from pathlib import Path

import httpx

from ..artifacts import TaskArtifacts, train_task_models
from ..cqi_core import SensingTask, TaskType
from ..simulator import read_training_sets
from .cache import EdgeCache
from .config import EdgeConfig
from .ingest import FileReplay, TcpIngest, parse_address
from .runner import CalibrationShortfall, TaskRunner
from .uploader import Uploader

log = logging.getLogger(__name__)


class EdgeGateway:
    def __init__(self, config: EdgeConfig, cloud_url: str, gw_id: str, client: httpx.AsyncClient | None = None):
        self.config = config
        self.cloud_url = cloud_url.rstrip("/")
        self.gw_id = gw_id
        self.cache = EdgeCache(config.cache_capacity, config.reorder_horizon_ms)
        self.runners: dict[str, TaskRunner] = {}
        self._pipelines: dict[str, asyncio.Task] = {}
        self._wakeups: dict[str, asyncio.Event] = {}
        self._client = client
        self.uploader: Uploader | None = None
        self.source: FileReplay | TcpIngest | None = None
        self.ota_version = 0
        self.duty_cycle_ms: int | None = None
        self.poll_errors = 0

    @property
    def headers(self) -> dict:
        return {"Authorization": f"Bearer {self.config.token}"} if self.config.token else {}

    # -- control plane -------------------------------------------------------

    async def register(self) -> None:
        body = {"gw_id": self.gw_id, "link_ids": self.config.link_ids, "devices": self.config.devices}
        r = await self._client.post(f"{self.cloud_url}/api/register_gateway", json=body, headers=self.headers)
        r.raise_for_status()

    async def fetch_tasks(self) -> list[dict]:
        tasks = []
        for tt in TaskType:
            r = await self._client.get(
                f"{self.cloud_url}/api/{tt.value}/CQI_feature", params={"GW": self.gw_id}, headers=self.headers
            )
            r.raise_for_status()
            tasks.extend(r.json()["active_tasks"])
        return sorted(tasks, key=lambda t: t["task_id"])

    async def poll_once(self) -> bool:
        """One control-plane poll; returns False if the cloud was unreachable."""
        try:
            docs = await self.fetch_tasks()
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            self.poll_errors += 1
            log.warning("config poll failed, keeping %d tasks: %s", len(self.runners), exc)
            return False
        await self.apply(docs)
        return True

    def _load_artifacts(self, task: SensingTask) -> TaskArtifacts | None:
        tid = task.task_id
        if tid in self.config.models:
            return TaskArtifacts.load(self.config.models[tid])
        if tid in self.config.training_sets:
            sets = read_training_sets(self.config.training_sets[tid])
            return TaskArtifacts(tid, train_task_models(sets, task))
        return None

    async def apply(self, docs: list[dict]) -> None:
        wanted = {d["task_id"]: d for d in docs}
        for tid in sorted(set(self.runners) - set(wanted)):
            self.stop_task(tid)
        for tid, doc in wanted.items():
            task = SensingTask.from_json(doc)
            current = self.runners.get(tid)
            if current is not None and current.task.to_json() == task.to_json():
                continue
            if current is not None:
                self.stop_task(tid)
            await self.start_task(task, has_model=bool(doc.get("has_model", doc.get("model_version", 0))))
        self._apply_ota()

    def _apply_ota(self) -> None:
        duty = max((r.task.ota_profile.duty_cycle_ms for r in self.runners.values()), default=None)
        if duty is not None and duty != self.duty_cycle_ms:
            if self.duty_cycle_ms is not None or duty != self.config.sampling_ms:
                self.ota_version += 1
                for r in self.runners.values():
                    r.state.ota_version = self.ota_version
            self.duty_cycle_ms = duty
            if isinstance(self.source, FileReplay):
                self.source.set_duty_cycle(duty)

    async def start_task(self, task: SensingTask, has_model: bool = True) -> TaskRunner:
        arts = self._load_artifacts(task)
        runner = TaskRunner(task, self.cache, self.gw_id, self.config.denoise_len, arts)
        if arts is not None and not has_model and self._client is not None:
            r = await self._client.post(
                f"{self.cloud_url}/api/{task.task_type.value}/upload_model",
                params={"task_id": task.task_id},
                json=arts.upload_body(),
                headers=self.headers,
            )
            if r.status_code >= 300:
                log.warning("model upload for %s failed: %s", task.task_id, r.text)
        if self.cache.sample_count():
            # join a running stream at its current edge
            runner.state.next_start_ms = self.cache.watermark(runner.devices)
        self.runners[task.task_id] = runner
        self._wakeups[task.task_id] = asyncio.Event()
        self._pipelines[task.task_id] = asyncio.create_task(self._pipeline(runner))
        log.info("task %s started", task.task_id)
        return runner

    def stop_task(self, task_id: str) -> None:
        self.runners.pop(task_id, None)
        self._wakeups.pop(task_id, None)
        t = self._pipelines.pop(task_id, None)
        if t:
            t.cancel()
        log.info("task %s stopped", task_id)

    # -- data plane ----------------------------------------------------------

    def _on_packet(self, time_ms: int) -> None:
        for ev in self._wakeups.values():
            ev.set()

    def step(self, runner: TaskRunner) -> int:
        """Calibrate if needed and push every completed window; returns messages queued."""
        if not runner.calibrated:
            try:
                runner.calibrate(self.config.calibration_ms)
            except CalibrationShortfall:
                return 0
        msgs = runner.poll()
        for m in msgs:
            self.uploader.submit(m)
        return len(msgs)

    async def _pipeline(self, runner: TaskRunner) -> None:
        ev = self._wakeups[runner.task.task_id]
        while True:
            await ev.wait()
            ev.clear()
            self.step(runner)

    async def _poller(self) -> None:
        while True:
            await asyncio.sleep(self.config.poll_interval_ms / 1000.0)
            await self.poll_once()

    async def run(self, replay: str | Path | None = None, speed: float = 1.0, listen: str | None = None) -> dict:
        """Run until the replay ends (or forever for TCP ingestion); returns counters."""
        own_client = self._client is None
        if own_client:
            self._client = httpx.AsyncClient(timeout=self.config.request_timeout_s)
        self.uploader = Uploader(
            self.cloud_url,
            self.config.push_buffer,
            self.config.backoff_base_ms,
            self.config.backoff_cap_ms,
            self._client,
            self.config.token,
        )
        background = [asyncio.create_task(self.uploader.run())]
        try:
            try:
                await self.register()
            except httpx.HTTPError as exc:
                log.warning("gateway registration failed: %s", exc)
            await self.poll_once()
            background.append(asyncio.create_task(self._poller()))
            if replay is not None:
                self.source = FileReplay(replay, self.cache, speed, self.duty_cycle_ms)
                self.source.on_packet = self._on_packet
                await self.source.run()
                for r in list(self.runners.values()):
                    self.step(r)
                if not self.config.exit_on_eof:
                    await asyncio.Event().wait()
                await self.uploader.drain(timeout_s=30.0)
            elif listen is not None:
                host, port = parse_address(listen)
                self.source = TcpIngest(self.cache, host, port)
                self.source.on_packet = self._on_packet
                addr = await self.source.start()
                log.info("listening for CQI rows on %s:%d", *addr)
                await asyncio.Event().wait()
        finally:
            for t in list(self._pipelines.values()) + background:
                t.cancel()
            await asyncio.gather(*self._pipelines.values(), *background, return_exceptions=True)
            if isinstance(self.source, TcpIngest):
                await self.source.close()
            if own_client:
                await self._client.aclose()
        return self.counters()

    def counters(self) -> dict:
        c = self.cache.counters
        out = {
            "samples_accepted": c.accepted,
            "late_dropped": c.late_dropped,
            "evicted": c.evicted,
            "malformed": c.malformed,
            "poll_errors": self.poll_errors,
            "ota_version": self.ota_version,
            "tasks": {tid: {"emitted": r.state.counters.emitted, "skipped": r.state.counters.skipped} for tid, r in self.runners.items()},
        }
        if self.uploader:
            u = self.uploader.counters
            out.update(delivered=u.delivered, rejected=u.rejected, overflow_dropped=u.overflow_dropped, failed_attempts=u.failed_attempts)
        return out


def run_edge(config: EdgeConfig, cloud_url: str, gw_id: str, replay=None, speed: float = 1.0, listen=None) -> dict:
    return asyncio.run(EdgeGateway(config, cloud_url, gw_id).run(replay, speed, listen))
