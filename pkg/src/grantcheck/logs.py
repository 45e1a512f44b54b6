"""Line-delimited JSON logging."""

from __future__ import annotations

import json
import logging
import sys

from .models import format_ts, utcnow


class JsonLineFormatter(logging.Formatter):
    """One JSON object per record: ts, level, component, msg, plus msg_id when given."""

    def format(self, record):
        doc = {
            "ts": format_ts(utcnow()),
            "level": record.levelname.lower(),
            "component": getattr(record, "component", None) or record.name.rsplit(".", 1)[-1],
            "msg": record.getMessage(),
        }
        msg_id = getattr(record, "msg_id", None)
        if msg_id:
            doc["msg_id"] = msg_id
        if record.exc_info:
            doc["exc"] = self.formatException(record.exc_info)
        return json.dumps(doc, ensure_ascii=False)


def configure(level="WARNING", stream=None):
    """Route the package logger to ``stream`` (stderr by default) as JSON lines."""
    logger = logging.getLogger("grantcheck")
    for h in list(logger.handlers):
        if getattr(h, "_grantcheck", False):
            logger.removeHandler(h)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    handler._grantcheck = True
    logger.addHandler(handler)
    logger.setLevel(level)
    return logger
