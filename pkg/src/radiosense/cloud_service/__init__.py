"""Cloud service: task registry, inference endpoint, pull/push retrieval and catalog."""

from .app import CloudConfig, create_app, serve
from .catalog import CATALOG_SCHEMA, build_catalog
from .registry import PRIVATE, PUBLIC, RegistryError, TaskRegistry

__all__ = [
    "CATALOG_SCHEMA",
    "CloudConfig",
    "PRIVATE",
    "PUBLIC",
    "RegistryError",
    "TaskRegistry",
    "build_catalog",
    "create_app",
    "serve",
]
