"""``.field`` files: one JSON header line, then raw little-endian float64 samples (C order)."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .grid import GridSpec, ScalarField

__all__ = ["write_field", "read_field", "FieldFormatError"]

FORMAT = "choquardlab.field/1"


class FieldFormatError(ValueError):
    pass


def write_field(path, f: ScalarField, meta: Optional[dict] = None) -> Path:
    g = f.grid
    header = {
        "format": FORMAT,
        "dim": g.dim,
        "points_per_axis": g.points_per_axis,
        "half_width": g.half_width,
        "dtype": "<f8",
        "order": "C",
        "meta": meta or {},
    }
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())
    return path


def read_field(path) -> tuple[ScalarField, dict]:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FieldFormatError(f"{path}: bad header line") from exc
        if header.get("format") != FORMAT:
            raise FieldFormatError(f"{path}: unknown format {header.get('format')!r}")
        grid = GridSpec(int(header["dim"]), int(header["points_per_axis"]), float(header["half_width"]))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != int(np.prod(grid.shape)):
        raise FieldFormatError(f"{path}: expected {np.prod(grid.shape)} samples, found {data.size}")
    return ScalarField(grid, data.reshape(grid.shape).astype(float)), header.get("meta", {})
