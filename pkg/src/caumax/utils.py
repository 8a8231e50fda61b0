"""Shared plumbing: error types, named RNG streams, atomic file writes."""

from __future__ import annotations

import os
import tempfile
import zlib
from pathlib import Path

import numpy as np


class CaumaxError(Exception):
    """Base class for errors caused by user input or configuration."""


class ParseError(CaumaxError):
    pass


class SplitError(CaumaxError):
    pass


class ParameterError(CaumaxError, ValueError):
    pass


class SupportError(CaumaxError):
    """No observational sample matches the requested treatment configuration."""


class FormatError(CaumaxError):
    pass


def stream_seed(seed: int, label: str, *indices: int) -> np.random.SeedSequence:
    """Seed sequence for the stream named ``label`` under ``seed``.

    Streams depend only on (seed, label, indices), never on call order, so
    work split across threads draws the same numbers as a sequential run.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode())]
    key.extend(int(i) for i in indices)
    return np.random.SeedSequence(key)


def rng_stream(seed: int, label: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, label, *indices))


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
