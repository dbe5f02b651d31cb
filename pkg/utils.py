# utils.py
import logging
import os
import tempfile
from pathlib import Path
from typing import Callable, IO

import pandas as pd

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"


def atomic_write(path, write: Callable[[IO[bytes]], None]) -> Path:
    """
    Write a file through a temp file in the target directory, then rename over
    the destination. Readers never observe a half-written file.
    """
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    directory.mkdir(parents=True, exist_ok=True)

    tmp_path = None
    try:
        with tempfile.NamedTemporaryFile(mode="wb", dir=directory, prefix=f".{path.name}.",
                                         suffix=".tmp", delete=False) as tf:
            tmp_path = tf.name
            write(tf)
        os.replace(tmp_path, path)
        tmp_path = None
    finally:
        if tmp_path and os.path.exists(tmp_path):
            try:
                os.remove(tmp_path)
            except OSError as e:
                logger.warning("Failed to clean up temp file %s: %s", tmp_path, e)
    return path


def atomic_write_bytes(path, payload: bytes) -> Path:
    return atomic_write(path, lambda fh: fh.write(payload))


def atomic_write_text(path, text: str) -> Path:
    return atomic_write(path, lambda fh: fh.write(text.encode("utf-8")))


def write_csv(path, frame: pd.DataFrame) -> Path:
    """CSV with 17 significant digits so every float reads back bit-exactly."""
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    out = atomic_write_text(path, text)
    logger.info("Wrote %d rows to %s", len(frame), out)
    return out


def parse_float_list(text: str) -> list[float]:
    """'0, 0.01,0.1' -> [0.0, 0.01, 0.1]"""
    return [float(part) for part in text.split(",") if part.strip()]


def parse_int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]
