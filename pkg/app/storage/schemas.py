import logging

import jsonschema

logger = logging.getLogger(__name__)

_SUMMARY = {
    "type": ["object", "null"],
    "required": ["artifact"],
    "properties": {"artifact": {"type": "string"}},
}

RUN_REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "RunReport",
    "type": "object",
    "required": ["scenario", "strata", "lattices", "schedule", "certificate", "zero_set", "morse", "timings", "versions"],
    "properties": {
        "scenario": {
            "type": "object",
            "required": ["preset", "k", "mode"],
            "properties": {
                "preset": {"type": "string"},
                "k": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["cutoff", "periodized", "gaussian"]},
            },
        },
        "strata": {
            "type": "object",
            "required": ["artifact", "count", "heights"],
            "properties": {
                "artifact": {"type": "string"},
                "count": {"type": "integer", "minimum": 1},
                "heights": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
        "lattices": _SUMMARY,
        "schedule": _SUMMARY,
        "certificate": {
            "type": ["object", "null"],
            "required": ["artifact", "status"],
            "properties": {
                "artifact": {"type": "string"},
                "status": {"enum": ["certified", "failed", "inconclusive"]},
                "eta": {"type": "number"},
            },
        },
        "zero_set": _SUMMARY,
        "morse": _SUMMARY,
        "profile": _SUMMARY,
        "timings": {"type": "object", "additionalProperties": {"type": "number"}},
        "versions": {"type": "object", "additionalProperties": {"type": "string"}},
        "plots": {"type": "array", "items": {"type": "string"}},
    },
}


def validate_report(report: dict) -> None:
    """Raises jsonschema.ValidationError when the report does not match RUN_REPORT_SCHEMA."""
    jsonschema.validate(report, RUN_REPORT_SCHEMA)
    logger.debug("RunReport validated against schema")
