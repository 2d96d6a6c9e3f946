"""Deterministic synthetic scenes: ground-truth masks plus fabricated
attention containers that behave like the real thing.

Cross-attention rows put (1 - noise) of their mass on the token of the
shape owning the pixel; self-attention is block-dominant over shape
identity, so pixels of one shape attend to each other. That is exactly
the affinity structure matrix exponentiation exploits, which makes
tau > 0 measurably better than tau = 0 once noise is present.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError
from .masks import SegMask, write_mask
from .store import (
    AttentionRecord,
    Kind,
    ManifestClass,
    RunManifest,
    write_container,
)

FIXTURE_CLASS_NAMES = {
    1: "disc",
    2: "box",
    3: "stripe",
    4: "blob",
    5: "ring",
    6: "wedge",
}

GT_NAME = "gt.png"
SCENE_NAME = "scene.json"


@dataclass(frozen=True)
class Shape:
    """One rasterizable primitive.

    Rect geometry is (top, left, height, width) in pixels; ellipse
    geometry is (cy, cx, ry, rx). Higher z_order paints later.
    """

    class_id: int
    kind: str  # "rect" | "ellipse"
    geometry: tuple[int, int, int, int]
    z_order: int


@dataclass
class SceneSpec:
    seed: int
    canvas: tuple[int, int]
    shapes: list[Shape]
    noise_level: float = 0.0
    grids: tuple[int, ...] = (16, 32)
    layers: int = 2
    timesteps: int = 2

    def __post_init__(self):
        if not (0.0 <= self.noise_level < 1.0):
            raise ContractError(
                f"noise_level must be in [0, 1), got {self.noise_level}"
            )
        zs = [s.z_order for s in self.shapes]
        if len(set(zs)) != len(zs):
            raise ContractError("shape z_order values must be distinct")

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "canvas": list(self.canvas),
            "noise_level": self.noise_level,
            "grids": list(self.grids),
            "layers": self.layers,
            "timesteps": self.timesteps,
            "shapes": [
                {
                    "class_id": s.class_id,
                    "kind": s.kind,
                    "geometry": list(s.geometry),
                    "z_order": s.z_order,
                }
                for s in self.shapes
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "SceneSpec":
        return SceneSpec(
            seed=int(obj["seed"]),
            canvas=(int(obj["canvas"][0]), int(obj["canvas"][1])),
            shapes=[
                Shape(
                    class_id=int(s["class_id"]),
                    kind=s["kind"],
                    geometry=tuple(int(g) for g in s["geometry"]),
                    z_order=int(s["z_order"]),
                )
                for s in obj["shapes"]
            ],
            noise_level=float(obj["noise_level"]),
            grids=tuple(int(g) for g in obj["grids"]),
            layers=int(obj["layers"]),
            timesteps=int(obj["timesteps"]),
        )


def _shape_support(shape: Shape, canvas: tuple[int, int]) -> np.ndarray:
    h, w = canvas
    yy, xx = np.ogrid[0:h, 0:w]
    if shape.kind == "rect":
        top, left, sh, sw = shape.geometry
        if top < 0 or left < 0 or top + sh > h or left + sw > w:
            raise ContractError(f"rect {shape.geometry} outside canvas {canvas}")
        return (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
    if shape.kind == "ellipse":
        cy, cx, ry, rx = shape.geometry
        if ry < 1 or rx < 1 or cy - ry < 0 or cx - rx < 0 or cy + ry >= h or cx + rx >= w:
            raise ContractError(f"ellipse {shape.geometry} outside canvas {canvas}")
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    raise ContractError(f"unknown shape kind {shape.kind!r}")


def _raster(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Class map and winning-shape-index map (painter's algorithm,
    ascending z_order; -1 marks background)."""
    cls = np.zeros(spec.canvas, dtype=np.uint8)
    region = np.full(spec.canvas, -1, dtype=np.int32)
    order = sorted(range(len(spec.shapes)), key=lambda i: spec.shapes[i].z_order)
    for i in order:
        shape = spec.shapes[i]
        mask = _shape_support(shape, spec.canvas)
        cls[mask] = shape.class_id
        region[mask] = i
    return cls, region


def render_gt(spec: SceneSpec) -> SegMask:
    """Rasterize the scene's ground-truth mask (no uncertainty)."""
    cls, _ = _raster(spec)
    legend = tuple(int(v) for v in np.unique(cls) if v != 0)
    return SegMask(data=cls, legend=legend)


def _downsample(labels: np.ndarray, grid: int) -> np.ndarray:
    """Corner-aligned nearest-sample downsampling of a label map."""
    h, w = labels.shape

    def coords(n_in: int, n_out: int) -> np.ndarray:
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out, dtype=int)
        return np.rint(np.linspace(0.0, n_in - 1.0, n_out)).astype(int)

    return labels[coords(h, grid)][:, coords(w, grid)]


def scene_classes(spec: SceneSpec) -> list[int]:
    return sorted({s.class_id for s in spec.shapes})


def fabricate_container(spec: SceneSpec, out_dir: Path | str) -> Path:
    """Write an attention container consistent with the scene.

    Token axis layout: token 0 is a scene token soaking up background
    mass, tokens 1..M are the classes in ascending-id order, and the last
    token is padding. One self and one cross record are emitted per
    (layer, timestep, grid) with independent noise, so averaging over
    records is actually exercised.
    """
    class_ids = scene_classes(spec)
    if len(class_ids) == 0:
        raise ContractError("scene has no shapes; nothing to fabricate")
    m_classes = len(class_ids)
    n_tokens = m_classes + 2
    cls_map, region_map = _raster(spec)
    nu = spec.noise_level

    def records():
        for grid in spec.grids:
            cls_g = _downsample(cls_map, grid)
            reg_g = _downsample(region_map, grid)
            n = grid * grid
            cls_flat = cls_g.reshape(n)
            reg_flat = reg_g.reshape(n)

            cross_base = np.zeros((n, n_tokens))
            for j, cid in enumerate(class_ids):
                cross_base[cls_flat == cid, j + 1] = 1.0
            cross_base[cls_flat == 0, 0] = 1.0

            same_region = reg_flat[:, None] == reg_flat[None, :]
            self_base = same_region / same_region.sum(axis=1, keepdims=True)

            for layer in range(spec.layers):
                for t in range(spec.timesteps):
                    rng = np.random.default_rng(
                        (spec.seed, grid, layer, t)
                    )
                    cross = (1.0 - nu) * cross_base + nu * rng.random(
                        (n, n_tokens)
                    )
                    cross /= cross.sum(axis=1, keepdims=True)
                    yield AttentionRecord(
                        kind=Kind.CROSS,
                        layer=layer,
                        timestep=t,
                        grid=(grid, grid),
                        data=cross.astype(np.float32),
                        token_count=n_tokens,
                    )
                    self_m = (1.0 - nu) * self_base + (nu / n) * rng.random((n, n))
                    self_m /= self_m.sum(axis=1, keepdims=True)
                    yield AttentionRecord(
                        kind=Kind.SELF,
                        layer=layer,
                        timestep=t,
                        grid=(grid, grid),
                        data=self_m.astype(np.float32),
                    )

    names = [FIXTURE_CLASS_NAMES.get(c, f"class-{c}") for c in class_ids]
    manifest = RunManifest(
        image_id=f"scene_{spec.seed:08d}",
        prompt="a synthetic scene; " + " ".join(names),
        class_prompt=" ".join(names),
        classes=[
            ManifestClass(class_id=cid, name=name, token_span=(j + 1, j + 2))
            for j, (cid, name) in enumerate(zip(class_ids, names))
        ],
        num_layers=spec.layers,
        num_timesteps=spec.timesteps,
        image_size=spec.canvas,
        seed=spec.seed,
        token_count=n_tokens,
    )
    return write_container(manifest, records(), out_dir)


def materialize_scene(spec: SceneSpec, out_dir: Path | str) -> Path:
    """Container plus the scene's ground truth and spec, side by side."""
    out_dir = Path(out_dir)
    fabricate_container(spec, out_dir)
    write_mask(render_gt(spec), out_dir / GT_NAME)
    with open(out_dir / SCENE_NAME, "w", encoding="utf-8") as fh:
        json.dump(spec.to_json(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return out_dir


def random_scene(
    seed: int,
    canvas: tuple[int, int] = (64, 64),
    noise_level: float = 0.1,
    grids: tuple[int, ...] = (16, 32),
    layers: int = 2,
    timesteps: int = 2,
    class_pool: Optional[list[int]] = None,
) -> SceneSpec:
    """A reproducible 2-3 shape scene with large, mostly-visible shapes.

    Shapes are kept big relative to the coarsest attention grid and
    re-sampled (bounded retries) if stacking would bury one, so every
    declared class keeps solid support; a buried class would make its
    min-max-normalized channel pure noise.
    """
    rng = np.random.default_rng(seed)
    pool = list(class_pool) if class_pool else list(FIXTURE_CLASS_NAMES)
    h, w = canvas
    n_shapes = int(rng.integers(2, 4))
    ids = rng.choice(pool, size=min(n_shapes, len(pool)), replace=False)

    def sample_shape(cid: int, z: int) -> Shape:
        if rng.random() < 0.5:
            sh = int(rng.integers(h * 3 // 8, h * 5 // 8))
            sw = int(rng.integers(w * 3 // 8, w * 5 // 8))
            top = int(rng.integers(0, h - sh + 1))
            left = int(rng.integers(0, w - sw + 1))
            return Shape(int(cid), "rect", (top, left, sh, sw), z)
        ry = int(rng.integers(h * 3 // 16, h * 5 // 16))
        rx = int(rng.integers(w * 3 // 16, w * 5 // 16))
        cy = int(rng.integers(ry, h - ry))
        cx = int(rng.integers(rx, w - rx))
        return Shape(int(cid), "ellipse", (cy, cx, ry, rx), z)

    shapes: list[Shape] = []
    for z, cid in enumerate(ids):
        candidate = sample_shape(cid, z)
        for _ in range(20):
            trial = shapes + [candidate]
            spec = SceneSpec(seed, canvas, trial, 0.0, grids, layers, timesteps)
            _, region = _raster(spec)
            visible = np.bincount(region[region >= 0], minlength=len(trial))
            areas = [
                _shape_support(s, canvas).sum() for s in trial
            ]
            if all(v >= 0.6 * a for v, a in zip(visible, areas)):
                break
            candidate = sample_shape(cid, z)
        shapes.append(candidate)

    return SceneSpec(
        seed=seed,
        canvas=canvas,
        shapes=shapes,
        noise_level=noise_level,
        grids=grids,
        layers=layers,
        timesteps=timesteps,
    )
