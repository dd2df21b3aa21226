"""Checkpoint container: a JSON header plus named float64 parameter blobs.

The format is deliberately hand-rolled so that identical training runs
produce byte-identical files: the header is canonical JSON (sorted keys, no
whitespace variance, no timestamps) and arrays are written in sorted name
order as little-endian float64 with explicit shapes.  Writes go through a
temp file and an atomic rename.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"ATALIGN\x01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Deserialized checkpoint: header metadata plus parameter arrays."""

    header: dict
    arrays: dict[str, np.ndarray]

    @property
    def stage(self) -> str:
        return self.header["stage"]

    @property
    def config(self) -> dict:
        return self.header["config"]

    @property
    def backbone_name(self) -> str:
        return self.header["backbone_name"]

    def require_stage(self, stage: str) -> None:
        if self.stage != stage:
            raise CheckpointError(f"expected a {stage} checkpoint, got {self.stage}")


def save_checkpoint(path: str | Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(arrays)
    meta = dict(header)
    meta["format_version"] = FORMAT_VERSION
    meta["arrays"] = [
        {"name": n, "shape": list(arrays[n].shape)} for n in names
    ]
    header_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (size,) = (int.from_bytes(fh.read(8), "little"),)
        header = json.loads(fh.read(size).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint format_version {header.get('format_version')}"
            )
        arrays = {}
        for spec in header.pop("arrays"):
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return Checkpoint(header=header, arrays=arrays)
