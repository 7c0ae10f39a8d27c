"""Checkpoint file format.

Layout::

    STMOE-CKPT 1\\n
    <resolved config, key=value lines>
    %%\\n
    then per parameter block: "<name> <d0,d1,...>\\n" followed by the
    little-endian float32 values in row-major order.

Only parameters are stored; optimizer state is not persisted.
"""
from __future__ import annotations

import io
import logging
from pathlib import Path
from typing import Union

import numpy as np

from . import numkern as nk
from .config import RunConfig, parse_config_text
from .errors import CheckpointError, ConfigError
from .model import StMoeLM
from .numkern import get_dtype

logger = logging.getLogger(__name__)

MAGIC = b"STMOE-CKPT"
VERSION = 1
SEPARATOR = b"%%\n"
_DISK_DTYPE = np.dtype("<f4")


def to_bytes(model: StMoeLM, config: RunConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC + b" " + str(VERSION).encode() + b"\n")
    buf.write(config.to_text().encode("utf-8"))
    buf.write(SEPARATOR)
    for name, t in model.named_parameters():
        dims = ",".join(str(n) for n in t.shape)
        buf.write(f"{name} {dims}\n".encode("utf-8"))
        buf.write(np.ascontiguousarray(t.data, dtype=_DISK_DTYPE).tobytes())
    return buf.getvalue()


def save(path: Union[str, Path], model: StMoeLM, config: RunConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model, config))
    logger.info("Saved checkpoint %s", path)
    return path


def _readline(buf: io.BytesIO) -> bytes:
    line = buf.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError("truncated checkpoint header")
    return line


def from_bytes(data: bytes) -> tuple[RunConfig, StMoeLM]:
    buf = io.BytesIO(data)
    head = _readline(buf).split()
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if head[1] != str(VERSION).encode():
        raise CheckpointError(f"unsupported checkpoint version {head[1].decode(errors='replace')}")
    config_lines = []
    while True:
        line = _readline(buf)
        if line == SEPARATOR:
            break
        try:
            config_lines.append(line.decode("utf-8"))
        except UnicodeDecodeError:
            raise CheckpointError("checkpoint config is not valid UTF-8") from None
    try:
        config = parse_config_text("".join(config_lines), source="checkpoint")
    except ConfigError as e:
        raise CheckpointError(f"checkpoint config is invalid: {e}") from e

    with nk.precision(config.precision):
        model = StMoeLM(config.to_model_config())
        dtype = get_dtype()
    expected = dict(model.named_parameters())
    seen = set()
    while True:
        line = buf.readline()
        if not line:
            break
        try:
            name, dims = line.decode("utf-8").rstrip("\n").split(" ")
            shape = tuple(int(n) for n in dims.split(",")) if dims else ()
        except (ValueError, UnicodeDecodeError):
            raise CheckpointError(f"bad parameter header {line!r}") from None
        if name not in expected:
            raise CheckpointError(f"unexpected parameter block {name!r}")
        target = expected[name]
        if shape != target.shape:
            raise CheckpointError(f"{name}: shape {shape} does not match {target.shape}")
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(count * _DISK_DTYPE.itemsize)
        if len(raw) != count * _DISK_DTYPE.itemsize:
            raise CheckpointError(f"{name}: truncated data")
        target.data = np.frombuffer(raw, dtype=_DISK_DTYPE).reshape(shape).astype(dtype)
        seen.add(name)
    missing = sorted(set(expected) - seen)
    if missing:
        raise CheckpointError(f"missing parameter block {missing[0]!r}")
    return config, model


def load(path: Union[str, Path]) -> tuple[RunConfig, StMoeLM]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    config, model = from_bytes(path.read_bytes())
    logger.info("Loaded checkpoint %s", path)
    return config, model
