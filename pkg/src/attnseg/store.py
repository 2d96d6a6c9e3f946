"""On-disk container format for attention dumps.

A container is a directory holding one ``manifest.json`` plus one binary
blob per (layer, timestep) group. Each record inside a blob is a 16-byte
header followed by row-major little-endian float32 data:

    magic   4 bytes  b"ATTN"
    version u16      currently 1
    kind    u8       0 = self-attention, 1 = cross-attention
    pad     u8       0
    h       u16      spatial grid height
    w       u16      spatial grid width
    cols    u32      h*w for self records, token count for cross records

Containers are immutable once written; readers may load records from any
number of threads or processes (every load opens its own file handle).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContainerIOError, FormatError, ManifestError

MAGIC = b"ATTN"
VERSION = 1
HEADER = struct.Struct("<4sHBBHHI")  # 16 bytes
ROW_SUM_TOL = 1e-4

MANIFEST_NAME = "manifest.json"


class Kind(enum.Enum):
    SELF = "self"
    CROSS = "cross"

    @property
    def code(self) -> int:
        return 0 if self is Kind.SELF else 1

    @staticmethod
    def from_code(code: int) -> "Kind":
        if code == 0:
            return Kind.SELF
        if code == 1:
            return Kind.CROSS
        raise FormatError(f"unknown attention kind code {code}")


@dataclass
class AttentionRecord:
    """One dumped attention map at a given layer/timestep/grid.

    ``data`` has shape (h*w, h*w) for self-attention and (h*w, token_count)
    for cross-attention. Rows are probability distributions.
    """

    kind: Kind
    layer: int
    timestep: int
    grid: tuple[int, int]
    data: np.ndarray
    token_count: Optional[int] = None

    def __post_init__(self):
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.kind is Kind.CROSS and self.token_count is None:
            self.token_count = int(self.data.shape[-1])

    @property
    def cols(self) -> int:
        h, w = self.grid
        return h * w if self.kind is Kind.SELF else int(self.token_count)

    def validate(self) -> None:
        h, w = self.grid
        if h < 1 or w < 1:
            raise FormatError(f"invalid grid {self.grid}")
        if self.layer < 0 or self.timestep < 0:
            raise FormatError(
                f"negative layer/timestep ({self.layer}, {self.timestep})"
            )
        if self.data.ndim != 2 or self.data.shape != (h * w, self.cols):
            raise FormatError(
                f"{self.kind.value} record at grid {self.grid} has data shape "
                f"{self.data.shape}, expected {(h * w, self.cols)}"
            )
        if np.any(self.data < 0.0) or np.any(self.data > 1.0):
            raise FormatError(
                f"{self.key()} has entries outside [0, 1]"
            )
        sums = self.data.sum(axis=1, dtype=np.float64)
        worst = np.abs(sums - 1.0).max() if sums.size else 0.0
        if worst > ROW_SUM_TOL:
            row = int(np.abs(sums - 1.0).argmax())
            raise FormatError(
                f"{self.key()} is not row-stochastic: row {row} sums to "
                f"{sums[row]:.6f} (tolerance {ROW_SUM_TOL})"
            )

    def key(self) -> str:
        return (
            f"{self.kind.value} record (layer={self.layer}, "
            f"timestep={self.timestep}, grid={self.grid[0]}x{self.grid[1]})"
        )


@dataclass(frozen=True)
class RecordDescriptor:
    """Locates one record inside the container directory."""

    kind: Kind
    layer: int
    timestep: int
    grid: tuple[int, int]
    cols: int
    file: str = ""
    offset: int = 0
    length: int = 0

    @property
    def identity(self) -> tuple:
        return (self.kind.value, self.layer, self.timestep, self.grid)

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "layer": self.layer,
            "timestep": self.timestep,
            "grid": list(self.grid),
            "cols": self.cols,
            "file": self.file,
            "offset": self.offset,
            "length": self.length,
        }

    @staticmethod
    def from_json(obj: dict) -> "RecordDescriptor":
        return RecordDescriptor(
            kind=Kind(obj["kind"]),
            layer=int(obj["layer"]),
            timestep=int(obj["timestep"]),
            grid=(int(obj["grid"][0]), int(obj["grid"][1])),
            cols=int(obj["cols"]),
            file=obj["file"],
            offset=int(obj["offset"]),
            length=int(obj["length"]),
        )


@dataclass(frozen=True)
class ManifestClass:
    """A class present in the prompt, with its token span on the
    cross-attention token axis (half-open [start, end))."""

    class_id: int
    name: str
    token_span: tuple[int, int]

    def to_json(self) -> dict:
        return {
            "id": self.class_id,
            "name": self.name,
            "token_span": list(self.token_span),
        }

    @staticmethod
    def from_json(obj: dict) -> "ManifestClass":
        return ManifestClass(
            class_id=int(obj["id"]),
            name=obj["name"],
            token_span=(int(obj["token_span"][0]), int(obj["token_span"][1])),
        )


@dataclass
class RunManifest:
    """Metadata binding one generated image to its prompt, classes and
    attention records."""

    image_id: str
    prompt: str
    class_prompt: str
    classes: list[ManifestClass]
    num_layers: int
    num_timesteps: int
    image_size: tuple[int, int]
    seed: int
    token_count: int
    records: list[RecordDescriptor] = field(default_factory=list)

    @property
    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.classes]

    def validate(self) -> None:
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ManifestError(f"duplicate class ids in manifest: {ids}")
        spans = []
        for c in self.classes:
            s, e = c.token_span
            if not (0 <= s < e <= self.token_count):
                raise ManifestError(
                    f"token span {c.token_span} of class {c.name!r} outside "
                    f"[0, {self.token_count})"
                )
            spans.append((s, e, c.name))
        spans.sort()
        for (s1, e1, n1), (s2, e2, n2) in zip(spans, spans[1:]):
            if s2 < e1:
                raise ManifestError(
                    f"token spans of {n1!r} and {n2!r} overlap"
                )
        seen = set()
        for d in self.records:
            if d.identity in seen:
                raise ManifestError(f"duplicate record descriptor {d.identity}")
            seen.add(d.identity)

    def to_json(self) -> dict:
        return {
            "format": "attnseg-container",
            "version": VERSION,
            "image_id": self.image_id,
            "prompt": self.prompt,
            "class_prompt": self.class_prompt,
            "classes": [c.to_json() for c in self.classes],
            "num_layers": self.num_layers,
            "num_timesteps": self.num_timesteps,
            "image_size": list(self.image_size),
            "seed": self.seed,
            "token_count": self.token_count,
            "records": [d.to_json() for d in self.records],
        }

    @staticmethod
    def from_json(obj: dict) -> "RunManifest":
        if obj.get("format") != "attnseg-container":
            raise FormatError(
                f"not an attention container manifest: format={obj.get('format')!r}"
            )
        if obj.get("version") != VERSION:
            raise FormatError(f"unsupported manifest version {obj.get('version')}")
        return RunManifest(
            image_id=obj["image_id"],
            prompt=obj["prompt"],
            class_prompt=obj["class_prompt"],
            classes=[ManifestClass.from_json(c) for c in obj["classes"]],
            num_layers=int(obj["num_layers"]),
            num_timesteps=int(obj["num_timesteps"]),
            image_size=(int(obj["image_size"][0]), int(obj["image_size"][1])),
            seed=int(obj["seed"]),
            token_count=int(obj["token_count"]),
            records=[RecordDescriptor.from_json(d) for d in obj["records"]],
        )


def _blob_name(layer: int, timestep: int) -> str:
    return f"t{timestep:05d}_l{layer:04d}.bin"


def _pack_record(rec: AttentionRecord) -> bytes:
    h, w = rec.grid
    header = HEADER.pack(MAGIC, VERSION, rec.kind.code, 0, h, w, rec.cols)
    return header + rec.data.astype("<f4", copy=False).tobytes(order="C")


def write_container(
    manifest: RunManifest,
    records: Iterable[AttentionRecord],
    out_dir: Path | str,
) -> Path:
    """Write a container directory; returns its path.

    Records are consumed as a stream and appended to per-(layer, timestep)
    blob files, so memory stays bounded by one record. If the manifest
    already declares record descriptors, the stream must produce exactly
    the same (kind, layer, timestep, grid) set; placement fields are
    recomputed either way.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    declared = {d.identity for d in manifest.records} if manifest.records else None
    written: list[RecordDescriptor] = []
    seen: set = set()
    offsets: dict[str, int] = {}

    for rec in records:
        rec.validate()
        if rec.layer >= manifest.num_layers or rec.timestep > manifest.num_timesteps:
            raise FormatError(
                f"{rec.key()} outside manifest bounds "
                f"(L={manifest.num_layers}, T={manifest.num_timesteps})"
            )
        if rec.kind is Kind.CROSS and rec.cols != manifest.token_count:
            raise FormatError(
                f"{rec.key()} has {rec.cols} token columns, manifest declares "
                f"{manifest.token_count}"
            )
        name = _blob_name(rec.layer, rec.timestep)
        desc = RecordDescriptor(
            kind=rec.kind,
            layer=rec.layer,
            timestep=rec.timestep,
            grid=rec.grid,
            cols=rec.cols,
            file=name,
            offset=offsets.get(name, 0),
            length=HEADER.size + rec.data.nbytes,
        )
        if desc.identity in seen:
            raise FormatError(f"duplicate record in stream: {desc.identity}")
        seen.add(desc.identity)
        if declared is not None and desc.identity not in declared:
            raise FormatError(
                f"stream record {desc.identity} not declared in manifest"
            )
        payload = _pack_record(rec)
        mode = "ab" if name in offsets else "wb"
        with open(out_dir / name, mode) as fh:
            fh.write(payload)
        offsets[name] = desc.offset + len(payload)
        written.append(desc)

    if declared is not None and seen != declared:
        missing = sorted(declared - seen)
        raise FormatError(f"declared records never streamed: {missing}")

    manifest.records = written
    manifest.validate()
    with open(out_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out_dir


class ContainerReader:
    """Lazy accessor over a written container.

    Only the manifest is parsed eagerly; record payloads are read on
    demand so containers larger than memory stay usable. Safe for
    concurrent loads.
    """

    def __init__(self, directory: Path | str):
        self.directory = Path(directory)
        mpath = self.directory / MANIFEST_NAME
        if not mpath.is_file():
            raise ContainerIOError(f"no {MANIFEST_NAME} in {self.directory}")
        try:
            with open(mpath, encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not valid JSON: {exc}") from exc
        self.manifest = RunManifest.from_json(obj)
        self.manifest.validate()
        self._check_blobs()

    def _check_blobs(self) -> None:
        need: dict[str, tuple[int, RecordDescriptor]] = {}
        for d in self.manifest.records:
            end = d.offset + d.length
            if d.file not in need or end > need[d.file][0]:
                need[d.file] = (end, d)
        for name, (end, d) in need.items():
            path = self.directory / name
            if not path.is_file():
                raise ContainerIOError(
                    f"blob {name} missing (first needed by {d.identity})"
                )
            size = path.stat().st_size
            if size < end:
                raise ContainerIOError(
                    f"blob {name} truncated: {size} bytes, record {d.identity} "
                    f"ends at {end}"
                )

    @property
    def descriptors(self) -> list[RecordDescriptor]:
        return list(self.manifest.records)

    def select(
        self,
        kind: Optional[Kind] = None,
        grid: Optional[tuple[int, int]] = None,
        timestep_range: Optional[tuple[int, int]] = None,
        layers: Optional[Sequence[int]] = None,
    ) -> list[RecordDescriptor]:
        """Descriptors matching the filters, in ascending (timestep, layer)
        order. This order is the summation order contract of aggregation."""
        out = []
        layer_set = set(layers) if layers is not None else None
        for d in self.manifest.records:
            if kind is not None and d.kind is not kind:
                continue
            if grid is not None and d.grid != tuple(grid):
                continue
            if timestep_range is not None and not (
                timestep_range[0] <= d.timestep <= timestep_range[1]
            ):
                continue
            if layer_set is not None and d.layer not in layer_set:
                continue
            out.append(d)
        out.sort(key=lambda d: (d.timestep, d.layer, d.kind.value))
        return out

    def load(self, desc: RecordDescriptor) -> AttentionRecord:
        path = self.directory / desc.file
        try:
            with open(path, "rb") as fh:
                fh.seek(desc.offset)
                raw = fh.read(desc.length)
        except OSError as exc:
            raise ContainerIOError(f"cannot read blob for {desc.identity}: {exc}")
        if len(raw) < desc.length:
            raise ContainerIOError(
                f"blob {desc.file} truncated while reading {desc.identity}"
            )
        magic, version, kind_code, _, h, w, cols = HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} in blob for {desc.identity}")
        if version != VERSION:
            raise FormatError(f"unsupported blob version {version}")
        if (
            Kind.from_code(kind_code) is not desc.kind
            or (h, w) != desc.grid
            or cols != desc.cols
        ):
            raise FormatError(
                f"blob header disagrees with descriptor {desc.identity}: "
                f"kind={kind_code} grid=({h},{w}) cols={cols}"
            )
        expect = h * w * cols * 4
        payload = raw[HEADER.size:]
        if len(payload) != expect:
            raise ContainerIOError(
                f"blob {desc.file} holds {len(payload)} payload bytes for "
                f"{desc.identity}, expected {expect}"
            )
        data = np.frombuffer(payload, dtype="<f4").reshape(h * w, cols).copy()
        rec = AttentionRecord(
            kind=desc.kind,
            layer=desc.layer,
            timestep=desc.timestep,
            grid=desc.grid,
            data=data,
            token_count=cols if desc.kind is Kind.CROSS else None,
        )
        rec.validate()
        return rec

    def iter_records(self, **filters) -> Iterator[AttentionRecord]:
        for d in self.select(**filters):
            yield self.load(d)


def read_container(directory: Path | str) -> ContainerReader:
    """Open a container; the returned reader exposes the parsed manifest
    (``reader.manifest``) and loads records lazily."""
    return ContainerReader(directory)


def resize_spatial(arr: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of an (h, w) or (h, w, C) map.

    Channels are interpolated independently. Output is float64 and clipped
    per channel to the input's [min, max] so interpolation rounding can
    never escape the input range. Resizing to the source grid returns an
    unmodified copy.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected (h, w) or (h, w, C) map, got shape {arr.shape}")
    h, w = arr.shape[:2]
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1 or h < 1 or w < 1:
        raise ValueError(f"grids must be >= 1, got {(h, w)} -> {(th, tw)}")
    if (th, tw) == (h, w):
        return arr.copy()

    def coords(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.linspace(0.0, n_in - 1.0, n_out)

    ys = coords(h, th)
    xs = coords(w, tw)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    if arr.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]

    a00 = arr[y0][:, x0]
    a01 = arr[y0][:, x1]
    a10 = arr[y1][:, x0]
    a11 = arr[y1][:, x1]
    out = (
        (1.0 - fy) * (1.0 - fx) * a00
        + (1.0 - fy) * fx * a01
        + fy * (1.0 - fx) * a10
        + fy * fx * a11
    )
    # Guard against last-ulp overshoot of the convex combination.
    axes = (0, 1)
    lo = arr.min(axis=axes)
    hi = arr.max(axis=axes)
    return np.clip(out, lo, hi)


def resize_nearest(arr: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Corner-aligned nearest-neighbour resize for label maps."""
    arr = np.asarray(arr)
    h, w = arr.shape[:2]
    th, tw = int(target[0]), int(target[1])
    if (th, tw) == (h, w):
        return arr.copy()

    def coords(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, dtype=int)
        return np.rint(np.linspace(0.0, n_in - 1.0, n_out)).astype(int)

    return arr[coords(h, th)][:, coords(w, tw)].copy()
