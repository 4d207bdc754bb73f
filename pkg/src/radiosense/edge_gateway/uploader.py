"""Ordered push of FeatureMessages with a bounded retry buffer."""

from __future__ import annotations

import asyncio
import logging
import time
from collections import deque
from dataclasses import dataclass, replace

import httpx

from ..wire import FeatureMessage

log = logging.getLogger(__name__)

# statuses after which retrying the same message cannot succeed
PERMANENT = {400, 401, 403, 404, 409, 422}


def backoff_delay_ms(attempt: int, base_ms: int = 250, cap_ms: int = 8000) -> int:
    """Delay before retry number ``attempt`` (0-based): ``base * 2**attempt`` capped."""
    if attempt < 0:
        raise ValueError("attempt must be >= 0")
    return min(cap_ms, base_ms * (2 ** min(attempt, 30)))


@dataclass
class UploaderCounters:
    delivered: int = 0
    rejected: int = 0
    overflow_dropped: int = 0
    failed_attempts: int = 0


class Uploader:
    """Owns the retry buffer; messages leave strictly in submission order."""

    def __init__(
        self,
        cloud_url: str,
        capacity: int = 1000,
        base_ms: int = 250,
        cap_ms: int = 8000,
        client: httpx.AsyncClient | None = None,
        token: str | None = None,
    ):
        self.url = cloud_url.rstrip("/") + "/api/post_CQIfeatures"
        self.buffer: deque[FeatureMessage] = deque()
        self.capacity = capacity
        self.base_ms, self.cap_ms = base_ms, cap_ms
        self.client = client
        self.headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.counters = UploaderCounters()
        self._wake = asyncio.Event()
        self._idle = asyncio.Event()
        self._idle.set()

    def submit(self, msg: FeatureMessage) -> None:
        if len(self.buffer) >= self.capacity:
            self.buffer.popleft()
            self.counters.overflow_dropped += 1
        self.buffer.append(msg)
        self._idle.clear()
        self._wake.set()

    async def _post(self, msg: FeatureMessage) -> int:
        stamped = replace(msg, sent_at=time.time() * 1000.0)
        r = await self.client.post(self.url, json=stamped.to_json(), headers=self.headers)
        return r.status_code

    async def run(self) -> None:
        attempt = 0
        while True:
            if not self.buffer:
                self._idle.set()
                self._wake.clear()
                await self._wake.wait()
                continue
            msg = self.buffer[0]
            try:
                status = await self._post(msg)
            except httpx.HTTPError as exc:
                status, err = None, exc
            if status is not None and status < 300:
                self.buffer.popleft()
                self.counters.delivered += 1
                attempt = 0
            elif status in PERMANENT:
                self.buffer.popleft()
                self.counters.rejected += 1
                log.warning("message %s@%d rejected with %d", msg.task_id, msg.timestamp_ms, status)
                attempt = 0
            else:
                self.counters.failed_attempts += 1
                delay = backoff_delay_ms(attempt, self.base_ms, self.cap_ms)
                log.info("push failed (%s); retry in %d ms", status or err, delay)
                attempt += 1
                await asyncio.sleep(delay / 1000.0)

    async def drain(self, timeout_s: float | None = None) -> bool:
        """Wait until the buffer is empty; returns False on timeout."""
        try:
            await asyncio.wait_for(self._idle.wait(), timeout_s)
            return True
        except asyncio.TimeoutError:
            return False
