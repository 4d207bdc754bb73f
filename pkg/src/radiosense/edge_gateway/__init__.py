"""Gateway daemon: raw CQI ingestion, local cache, feature pipelines and cloud push."""

from .cache import CacheCounters, EdgeCache, LinkBuffer
from .config import EdgeConfig
from .daemon import EdgeGateway, run_edge
from .ingest import FileReplay, RowSink, TcpIngest, ingest_file, read_packets
from .runner import ActiveTaskState, CalibrationShortfall, TaskRunner, UntrainedError
from .uploader import Uploader, backoff_delay_ms

__all__ = [
    "ActiveTaskState",
    "CacheCounters",
    "CalibrationShortfall",
    "EdgeCache",
    "EdgeConfig",
    "EdgeGateway",
    "FileReplay",
    "LinkBuffer",
    "RowSink",
    "TcpIngest",
    "TaskRunner",
    "UntrainedError",
    "Uploader",
    "backoff_delay_ms",
    "ingest_file",
    "read_packets",
    "run_edge",
]
