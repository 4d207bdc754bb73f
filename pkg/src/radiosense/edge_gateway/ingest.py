"""Raw CQI ingestion: timed file replay or newline-delimited CSV over TCP.

Both sources share one row parser.  Malformed rows are skipped and
counted; the stream never stops because of bad input.
"""

from __future__ import annotations

import asyncio
import csv
import logging
import time
from pathlib import Path
from typing import Callable, Iterable, Iterator

from ..cqi_core import TRACE_HEADER, parse_trace_row
from .cache import EdgeCache

log = logging.getLogger(__name__)


class RowSink:
    """Parses CSV lines and writes samples into the cache (the single writer)."""

    def __init__(self, cache: EdgeCache):
        self.cache = cache
        self.rows = 0

    def feed_fields(self, fields: list[str]) -> bool:
        if not fields or tuple(f.strip() for f in fields) == TRACE_HEADER:
            return False
        self.rows += 1
        try:
            dev, sample = parse_trace_row(fields)
        except (ValueError, TypeError):
            self.cache.counters.malformed += 1
            return False
        return self.cache.add(dev, sample)

    def feed_line(self, line: str) -> bool:
        line = line.strip()
        if not line:
            return False
        return self.feed_fields(next(csv.reader([line])))


def read_packets(path: str | Path) -> Iterator[tuple[int, list[list[str]]]]:
    """Yield ``(time_ms, rows)`` groups of consecutive rows sharing a timestamp.

    Rows whose timestamp cannot be parsed are passed through in the current
    group so the sink counts them as malformed.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trace file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        current_t, group = None, []
        for fields in reader:
            if not fields or tuple(f.strip() for f in fields) == TRACE_HEADER:
                continue
            try:
                t = int(fields[0])
            except (ValueError, IndexError):
                group.append(fields)
                continue
            if current_t is not None and t != current_t:
                yield current_t, group
                group = []
            current_t = t
            group.append(fields)
        if group:
            yield (current_t if current_t is not None else 0), group


def ingest_file(path: str | Path, cache: EdgeCache) -> RowSink:
    """Load a whole trace into the cache without pacing."""
    sink = RowSink(cache)
    for _, rows in read_packets(path):
        for fields in rows:
            sink.feed_fields(fields)
    return sink


class FileReplay:
    """Replays a trace at ``speed`` times real time (0 = as fast as possible).

    ``duty_cycle_ms`` emulates the field devices' transmit period: packets
    closer than one duty cycle to the previously forwarded one are skipped.
    """

    def __init__(self, path: str | Path, cache: EdgeCache, speed: float = 1.0, duty_cycle_ms: int | None = None):
        self.path = Path(path)
        self.sink = RowSink(cache)
        self.speed = float(speed)
        self.duty_cycle_ms = duty_cycle_ms
        self.forwarded_times: list[int] = []
        self.on_packet: Callable[[int], None] | None = None

    def set_duty_cycle(self, duty_cycle_ms: int | None) -> None:
        self.duty_cycle_ms = duty_cycle_ms

    async def run(self) -> None:
        t0 = wall0 = None
        last_fwd = None
        for t, rows in read_packets(self.path):
            if t0 is None:
                t0, wall0 = t, time.monotonic()
            if self.speed > 0:
                delay = wall0 + (t - t0) / 1000.0 / self.speed - time.monotonic()
                if delay > 0:
                    await asyncio.sleep(delay)
            else:
                await asyncio.sleep(0)
            if self.duty_cycle_ms and last_fwd is not None and t - last_fwd < self.duty_cycle_ms:
                continue
            last_fwd = t
            for fields in rows:
                self.sink.feed_fields(fields)
            self.forwarded_times.append(t)
            if self.on_packet:
                self.on_packet(t)


class TcpIngest:
    """Accepts connections streaming newline-delimited CSV trace rows."""

    def __init__(self, cache: EdgeCache, host: str = "127.0.0.1", port: int = 0):
        self.sink = RowSink(cache)
        self.host, self.port = host, port
        self.server: asyncio.AbstractServer | None = None
        self.on_packet: Callable[[int], None] | None = None

    async def start(self) -> tuple[str, int]:
        self.server = await asyncio.start_server(self._handle, self.host, self.port)
        sock = self.server.sockets[0].getsockname()
        self.port = sock[1]
        return sock[0], sock[1]

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while line := await reader.readline():
                text = line.decode("utf-8", errors="replace")
                if self.sink.feed_line(text) and self.on_packet:
                    try:
                        self.on_packet(int(text.split(",", 1)[0]))
                    except ValueError:
                        pass
        except (ConnectionError, asyncio.IncompleteReadError):
            log.info("ingest connection closed")
        finally:
            writer.close()

    async def close(self) -> None:
        if self.server:
            self.server.close()
            await self.server.wait_closed()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


def iter_lines(lines: Iterable[str], cache: EdgeCache) -> RowSink:
    sink = RowSink(cache)
    for line in lines:
        sink.feed_line(line)
    return sink
