"""Machine-readable resource catalog and the JSON schemas it publishes.

The catalog describes services (operation, method, path, schema refs),
radio links per gateway, the OTA actuation functions and the sensing
tasks visible to the caller.  ``CATALOG_SCHEMA`` validates the catalog
document itself.
"""

from __future__ import annotations

from ..behavior_features import EXTRA_KEYS
from .registry import TaskRegistry

OTA_FUNCTIONS = (
    {"name": "neighborhood_links", "type": "array", "description": "link ids assigned to the task"},
    {"name": "carrier_frequency_hz", "type": "number", "description": "RF carrier frequency"},
    {"name": "bandwidth_hz", "type": "number", "description": "RF channel bandwidth"},
    {"name": "duty_cycle_ms", "type": "integer", "description": "field-device transmit period"},
    {"name": "cqi_type", "type": "string", "description": "PHY, UP or IQ"},
    {"name": "cqi_sampling_ms", "type": "integer", "description": "CQI extraction period"},
)

SERVICES = (
    {
        "operation": "post_CQIfeatures",
        "method": "POST",
        "path": "/api/post_CQIfeatures",
        "input": "#/schemas/FeatureMessage",
        "output": "#/schemas/Accepted",
    },
    {
        "operation": "get_LatentValues",
        "method": "GET",
        "path": "/api/{task_type}/get_LatentValues",
        "query": ["GW", "task_id", "history"],
        "output": "#/schemas/LatentEstimate",
    },
    {
        "operation": "start_task",
        "method": "POST",
        "path": "/api/{task_type}/start_task",
        "query": ["GW"],
        "input": "#/schemas/StartTask",
        "output": "#/schemas/SensingTask",
    },
    {
        "operation": "stop_task",
        "method": "POST",
        "path": "/api/{task_type}/stop_task",
        "query": ["GW", "task_id"],
    },
    {
        "operation": "upload_model",
        "method": "POST",
        "path": "/api/{task_type}/upload_model",
        "query": ["task_id"],
    },
    {
        "operation": "CQI_feature",
        "method": "GET",
        "path": "/api/{task_type}/CQI_feature",
        "query": ["GW"],
        "output": "#/schemas/ActiveTasks",
    },
    {
        "operation": "subscribe",
        "method": "WS",
        "path": "/api/{task_type}/subscribe",
        "query": ["GW", "task_id", "token"],
        "output": "#/schemas/LatentEstimate",
    },
    {
        "operation": "register_gateway",
        "method": "POST",
        "path": "/api/register_gateway",
        "input": "#/schemas/Gateway",
    },
    {"operation": "catalog", "method": "GET", "path": "/api/catalog"},
    {"operation": "catalog_schema", "method": "GET", "path": "/api/catalog/schema"},
)

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_STR = {"type": "string", "minLength": 1}

OTA_PROFILE_SCHEMA = {
    "type": "object",
    "required": [f["name"] for f in OTA_FUNCTIONS],
    "properties": {
        "neighborhood_links": {"type": "array", "items": _INT},
        "carrier_frequency_hz": _NUM,
        "bandwidth_hz": _NUM,
        "duty_cycle_ms": {"type": "integer", "minimum": 1},
        "cqi_type": {"enum": ["PHY", "UP", "IQ"]},
        "cqi_sampling_ms": {"type": "integer", "minimum": 1},
    },
}

SENSING_TASK_SCHEMA = {
    "type": "object",
    "required": ["task_id", "task_type", "latent_labels", "priors", "feature_recipe", "window_ms", "cqi_type"],
    "properties": {
        "task_id": _STR,
        "task_type": {"enum": ["detection", "localization", "activity"]},
        "latent_labels": {"type": "array", "items": _STR, "minItems": 2},
        "priors": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 2},
        "feature_recipe": {"enum": ["PCA", "PCA_PEAK_PHASE"]},
        "num_components": {"type": "integer", "minimum": 1},
        "eigenvalue_threshold": _NUM,
        "window_ms": {"type": "integer", "minimum": 1},
        "cqi_type": {"enum": ["PHY", "UP", "IQ"]},
        "ota_profile": OTA_PROFILE_SCHEMA,
        "hop_ms": {"type": ["integer", "null"]},
        "subbands": {"type": ["integer", "null"]},
        "segment_window_ms": _INT,
        "gateway_combine": {"enum": ["sum", "product"]},
    },
}

FEATURE_MESSAGE_SCHEMA = {
    "type": "object",
    "required": ["gw_id", "task_id", "timestamp_ms", "window", "devices"],
    "properties": {
        "gw_id": _STR,
        "task_id": _STR,
        "timestamp_ms": _INT,
        "sent_at": _NUM,
        "window": {
            "type": "object",
            "required": ["start_ms", "end_ms"],
            "properties": {"start_ms": _INT, "end_ms": _INT},
        },
        "devices": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["device_id", "link_ids", "cqi_type", "features"],
                "properties": {
                    "device_id": _STR,
                    "link_ids": {"type": "array", "items": _INT},
                    "cqi_type": {"enum": ["PHY", "UP", "IQ"]},
                    "features": {"type": "array", "items": _NUM},
                    "extra": {
                        "type": "object",
                        "required": list(EXTRA_KEYS),
                        "additionalProperties": _NUM,
                    },
                },
            },
        },
    },
}

LATENT_ESTIMATE_SCHEMA = {
    "type": "object",
    "required": ["task_id", "gw_ids", "timestamp_ms", "estimate", "posteriors"],
    "properties": {
        "task_id": _STR,
        "gw_ids": {"type": "array", "items": _STR, "minItems": 1},
        "timestamp_ms": _INT,
        "estimate": _STR,
        "posteriors": {"type": "object", "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1}},
        "seq": _INT,
        "sent_at": _NUM,
    },
}

GATEWAY_SCHEMA = {
    "type": "object",
    "required": ["gw_id", "link_ids", "ota_profile"],
    "properties": {
        "gw_id": _STR,
        "link_ids": {"type": "array", "items": _INT},
        "devices": {"type": "array", "items": _STR},
        "ota_profile": OTA_PROFILE_SCHEMA,
    },
}

SCHEMAS = {
    "FeatureMessage": FEATURE_MESSAGE_SCHEMA,
    "LatentEstimate": LATENT_ESTIMATE_SCHEMA,
    "SensingTask": SENSING_TASK_SCHEMA,
    "Gateway": GATEWAY_SCHEMA,
    "StartTask": {
        "type": "object",
        "properties": {
            "task": SENSING_TASK_SCHEMA,
            "profile": {"enum": ["public", "private"]},
            "model": {"type": "object"},
            "knn": {"type": "object"},
        },
    },
    "Accepted": {
        "type": "object",
        "required": ["accepted", "seq"],
        "properties": {"accepted": {"const": True}, "seq": _INT},
    },
    "ActiveTasks": {
        "type": "object",
        "required": ["gw_id", "active_tasks"],
        "properties": {"gw_id": {"type": "string"}, "active_tasks": {"type": "array", "items": SENSING_TASK_SCHEMA}},
    },
}

CATALOG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["services", "radio_links", "actuation", "sensing_tasks", "schemas"],
    "properties": {
        "services": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["operation", "method", "path"],
                "properties": {
                    "operation": _STR,
                    "method": {"enum": ["GET", "POST", "WS"]},
                    "path": {"type": "string", "pattern": "^/api/"},
                    "input": {"type": "string"},
                    "output": {"type": "string"},
                    "query": {"type": "array", "items": {"type": "string"}},
                },
            },
        },
        "radio_links": {"type": "array", "items": GATEWAY_SCHEMA},
        "actuation": {
            "type": "object",
            "required": ["OTA_FUNCTION"],
            "properties": {
                "OTA_FUNCTION": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["name", "type"],
                        "properties": {"name": _STR, "type": _STR, "description": {"type": "string"}},
                    },
                }
            },
        },
        "sensing_tasks": {
            "type": "array",
            "items": {
                "allOf": [SENSING_TASK_SCHEMA],
                "type": "object",
                "required": ["profile", "gw_ids"],
                "properties": {"profile": {"const": "public"}, "gw_ids": {"type": "array", "items": _STR}},
            },
        },
        "schemas": {"type": "object"},
    },
}


def build_catalog(registry: TaskRegistry, authorized: bool = False) -> dict:
    tasks = [e.public_json() for e in registry.visible(authorized)]
    doc = {
        "services": [dict(s) for s in SERVICES],
        "radio_links": [registry.gateways[g].to_json() for g in sorted(registry.gateways)],
        "actuation": {"OTA_FUNCTION": [dict(f) for f in OTA_FUNCTIONS]},
        "sensing_tasks": tasks,
        "schemas": SCHEMAS,
    }
    return doc


def catalog_schema(authorized: bool = False) -> dict:
    """The catalog schema; authorized callers may also see private tasks."""
    if not authorized:
        return CATALOG_SCHEMA
    schema = {**CATALOG_SCHEMA, "properties": dict(CATALOG_SCHEMA["properties"])}
    items = dict(schema["properties"]["sensing_tasks"]["items"])
    items["properties"] = {**items["properties"], "profile": {"enum": ["public", "private"]}}
    schema["properties"]["sensing_tasks"] = {"type": "array", "items": items}
    return schema
