"""Writer for the attnseg attention-container wire format.

Implemented against the documented byte layout rather than the attnseg
code, so the two sides of the contract stay independent: a directory with
``manifest.json`` plus per-(layer, timestep) blobs of records, each record
a 16-byte header (magic "ATTN", version u16, kind u8, pad, h u16, w u16,
cols u32) followed by row-major little-endian float32 data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"ATTN"
VERSION = 1
HEADER = struct.Struct("<4sHBBHHI")
KIND_CODES = {"self": 0, "cross": 1}


class ExportError(Exception):
    pass


@dataclass
class Record:
    kind: str  # "self" | "cross"
    layer: int
    timestep: int
    grid: tuple[int, int]
    data: np.ndarray  # (h*w, cols) float32 rows summing to 1


@dataclass
class Manifest:
    image_id: str
    prompt: str
    class_prompt: str
    classes: list[dict]  # {"id", "name", "token_span"}
    num_layers: int
    num_timesteps: int
    image_size: tuple[int, int]
    seed: int
    token_count: int
    records: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "format": "attnseg-container",
            "version": VERSION,
            "image_id": self.image_id,
            "prompt": self.prompt,
            "class_prompt": self.class_prompt,
            "classes": self.classes,
            "num_layers": self.num_layers,
            "num_timesteps": self.num_timesteps,
            "image_size": list(self.image_size),
            "seed": self.seed,
            "token_count": self.token_count,
            "records": self.records,
        }


def _check_record(rec: Record) -> np.ndarray:
    data = np.ascontiguousarray(rec.data, dtype=np.float32)
    h, w = rec.grid
    if data.ndim != 2 or data.shape[0] != h * w:
        raise ExportError(
            f"{rec.kind} record at ({rec.layer}, {rec.timestep}) has shape "
            f"{data.shape}, expected {h * w} rows"
        )
    if rec.kind == "self" and data.shape[1] != h * w:
        raise ExportError("self record must be square over the grid")
    sums = data.sum(axis=1, dtype=np.float64)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ExportError(
            f"{rec.kind} record at ({rec.layer}, {rec.timestep}) is not "
            f"row-stochastic"
        )
    if data.min() < 0.0 or data.max() > 1.0:
        raise ExportError("attention entries must lie in [0, 1]")
    return data


def write_container(
    manifest: Manifest, records: Iterable[Record], out_dir: Path | str
) -> Path:
    """Stream records into blob files and finish with the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    offsets: dict[str, int] = {}
    seen: set[tuple] = set()
    descriptors: list[dict] = []
    for rec in records:
        data = _check_record(rec)
        h, w = rec.grid
        key = (rec.kind, rec.layer, rec.timestep, rec.grid)
        if key in seen:
            raise ExportError(f"duplicate record {key}")
        seen.add(key)
        cols = data.shape[1]
        name = f"t{rec.timestep:05d}_l{rec.layer:04d}.bin"
        payload = (
            HEADER.pack(MAGIC, VERSION, KIND_CODES[rec.kind], 0, h, w, cols)
            + data.astype("<f4", copy=False).tobytes(order="C")
        )
        offset = offsets.get(name, 0)
        with open(out_dir / name, "ab" if name in offsets else "wb") as fh:
            fh.write(payload)
        offsets[name] = offset + len(payload)
        descriptors.append(
            {
                "kind": rec.kind,
                "layer": rec.layer,
                "timestep": rec.timestep,
                "grid": [h, w],
                "cols": cols,
                "file": name,
                "offset": offset,
                "length": len(payload),
            }
        )
    manifest.records = descriptors
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out_dir
