"""Centralized failure handling for CLI commands.

handle_failure(cfg, err) logs the failure on the diagnostic stream, saves a
JSON debug dump when enabled in config, and returns the exit code. It never
exits the process; the caller decides.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import KwsError, UsageError

ROOT = Path(__file__).parent.parent


def _dump_dir(cfg: Dict[str, Any]) -> Path:
    dbg = cfg.get("debug") or {}
    p = Path(dbg.get("dump_dir") or "debug_dumps")
    if not p.is_absolute():
        p = ROOT / p
    return p


def _save_debug_dump(cfg: Dict[str, Any], context: Dict[str, Any]) -> Optional[Path]:
    dbg = cfg.get("debug") or {}
    if not dbg.get("save_failures"):
        return None
    try:
        dump_dir = _dump_dir(cfg)
        dump_dir.mkdir(parents=True, exist_ok=True)
        ts = datetime.now().strftime("%Y%m%dT%H%M%S%f")
        outp = dump_dir / f"failure_{ts}.json"
        with outp.open("w", encoding="utf-8") as fh:
            json.dump(context, fh, ensure_ascii=False, indent=2, default=str)
        logging.info("saved failure debug dump to %s", outp)
        return outp
    except Exception:
        logging.exception("failed to save failure debug dump")
        return None


def handle_failure(cfg: Dict[str, Any], err: BaseException) -> int:
    """Report err and return the exit code the CLI should use."""
    if isinstance(err, KwsError):
        code = err.exit_code
        context = dict(err.context)
        message = err.message
    elif isinstance(err, OSError):
        code = 2
        context = {"filename": getattr(err, "filename", None)}
        message = str(err)
    else:
        code = 3 if isinstance(err, FloatingPointError) else 2
        context = {}
        message = str(err) or type(err).__name__

    if isinstance(err, UsageError):
        if err.usage:
            logging.error("%s", err.usage.rstrip())
        logging.error("usage error: %s", message)
    else:
        logging.error("%s: %s", type(err).__name__, message)

    context.update({"error": type(err).__name__, "message": message, "exit_code": code})
    _save_debug_dump(cfg, context)
    return code
