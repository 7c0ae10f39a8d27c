from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional

DEFAULT_OUT_ROOT = "runs"

_TRUE_WORDS = ("1", "true", "yes", "on")
_FALSE_WORDS = ("0", "false", "no", "off")


def get_resource_path(relative_path: str) -> str:
    """Absolute path to a resource shipped next to the package (``configs/...``)."""
    base_path = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    return os.path.join(base_path, relative_path)


def get_config_path(name: str) -> str:
    """Get path to a shipped experiment config (``configs/<name>.cfg``)"""
    if not name.endswith(".cfg"):
        name = f"{name}.cfg"
    return get_resource_path(os.path.join("configs", name))


def get_out_root(override: Optional[str] = None) -> Path:
    """Output root: ``--out`` beats ``STMOE_OUT`` beats ``./runs``."""
    root = override or os.environ.get("STMOE_OUT") or DEFAULT_OUT_ROOT
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def parse_bool(val: Any, default: bool = False) -> bool:
    # Config text hands us "true"/"false" strings; normalise to bool.
    if isinstance(val, bool):
        return val
    if isinstance(val, str):
        low = val.strip().lower()
        if low in _TRUE_WORDS:
            return True
        if low in _FALSE_WORDS:
            return False
        raise ValueError(f"not a boolean: {val!r}")
    if isinstance(val, int):
        return bool(val)
    return default


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def write_records(path: Path, records: Iterable[Mapping[str, Any]], append: bool = False) -> None:
    """Write line-delimited JSON records."""
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(dict(rec), sort_keys=False) + "\n")


def read_records(path: Path) -> list[dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def format_table(headers: list[str], rows: list[list[Any]]) -> str:
    """Plain fixed-width table for terminal output."""
    cells = [[_fmt(c) for c in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        for i, c in enumerate(row):
            widths[i] = max(widths[i], len(c))
    line = "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))
    sep = "  ".join("-" * w for w in widths)
    body = ["  ".join(c.ljust(widths[i]) for i, c in enumerate(row)) for row in cells]
    return "\n".join([line, sep, *body])


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if value is None:
        return "-"
    return str(value)
