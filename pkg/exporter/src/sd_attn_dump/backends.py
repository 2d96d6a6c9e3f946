"""Export jobs and the model-free dry-run backend.

The dry-run backend fabricates deterministic, plausibly-shaped attention
(a gaussian objectness blob per class, locality-shaped self-attention) so
the whole export path, container format included, is testable without
model weights. The real diffusion hook lives in diffusers_backend.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np
from PIL import Image

from .container import Manifest, Record, write_container
from .spans import class_token_spans, whitespace_token_count


@dataclass
class ExportJob:
    """One generation to capture: prompts, classes, seed, and what to dump."""

    prompt: str
    class_prompt: str
    classes: Sequence[tuple[int, str]]  # (class_id, name) in prompt order
    seed: int
    steps: int = 100
    scales: tuple[int, ...] = (16, 32)
    out_dir: Path | str = "."
    image_id: str = ""

    def __post_init__(self):
        if not self.image_id:
            self.image_id = f"export_{self.seed:08d}"


@dataclass
class ExportResult:
    container_dir: Path
    image_path: Path
    manifest: Manifest


class Backend(Protocol):
    def run(self, job: ExportJob) -> ExportResult: ...


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


class DryRunBackend:
    """Deterministic exporter that needs no model.

    Layers alternate across the requested scales (layer l captures at
    scales[l % len(scales)]), one self and one cross record per layer and
    timestep. Token spans come from a whitespace tokenizer, so compound
    class names span one token per word.
    """

    def __init__(self, layers: int = 16, image_size: tuple[int, int] = (64, 64),
                 noise: float = 0.1):
        self.layers = layers
        self.image_size = image_size
        self.noise = noise

    def _layer_scale(self, job: ExportJob, layer: int) -> int:
        return job.scales[layer % len(job.scales)]

    def _centers(self, job: ExportJob) -> np.ndarray:
        rng = np.random.default_rng((_stable_hash(job.prompt), job.seed))
        return rng.uniform(0.15, 0.85, size=(len(job.classes), 2))

    def _records(self, job: ExportJob, spans) -> Iterator[Record]:
        centers = self._centers(job)
        token_count = spans[1]
        class_spans = spans[0]
        for layer in range(self.layers):
            g = self._layer_scale(job, layer)
            yy, xx = np.meshgrid(
                (np.arange(g) + 0.5) / g, (np.arange(g) + 0.5) / g, indexing="ij"
            )
            pos = np.stack([yy.ravel(), xx.ravel()], axis=1)  # (n, 2)
            n = g * g
            blob = np.zeros((n, len(job.classes)))
            for j, c in enumerate(centers):
                d2 = ((pos - c) ** 2).sum(axis=1)
                blob[:, j] = np.exp(-d2 / (2 * 0.12**2))
            d2_self = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(axis=2)
            locality = np.exp(-d2_self / (2 * 0.15**2))
            for t in range(job.steps):
                rng = np.random.default_rng(
                    (_stable_hash(job.prompt), job.seed, layer, t)
                )
                scores = np.full((n, token_count), 0.02)
                scores[:, 0] = 0.6  # start token soaks up background mass
                for j, (s, e) in enumerate(class_spans):
                    scores[:, s:e] = (0.05 + blob[:, j])[:, None]
                scores += self.noise * rng.random(scores.shape) * 0.1
                cross = scores / scores.sum(axis=1, keepdims=True)
                yield Record("cross", layer, t, (g, g), cross.astype(np.float32))
                self_scores = locality + self.noise * rng.random((n, n)) * 0.05
                self_map = self_scores / self_scores.sum(axis=1, keepdims=True)
                yield Record("self", layer, t, (g, g), self_map.astype(np.float32))

    def _image(self, job: ExportJob) -> np.ndarray:
        h, w = self.image_size
        rng = np.random.default_rng((_stable_hash(job.prompt), job.seed, 0xFACE))
        img = rng.integers(40, 90, size=(h, w, 3)).astype(np.float64)
        yy, xx = np.meshgrid(
            (np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij"
        )
        for j, c in enumerate(self._centers(job)):
            d2 = (yy - c[0]) ** 2 + (xx - c[1]) ** 2
            tint = rng.integers(90, 220, size=3)
            weight = np.exp(-d2 / (2 * 0.12**2))
            img += weight[:, :, None] * tint[None, None, :]
        return np.clip(img, 0, 255).astype(np.uint8)

    def run(self, job: ExportJob) -> ExportResult:
        spans = class_token_spans(
            [name for _, name in job.classes], whitespace_token_count
        )
        class_entries = [
            {"id": cid, "name": name, "token_span": list(span)}
            for (cid, name), span in zip(job.classes, spans[0])
        ]
        manifest = Manifest(
            image_id=job.image_id,
            prompt=job.prompt,
            class_prompt=job.class_prompt,
            classes=class_entries,
            num_layers=self.layers,
            num_timesteps=job.steps,
            image_size=self.image_size,
            seed=job.seed,
            token_count=spans[1],
        )
        out = Path(job.out_dir)
        write_container(manifest, self._records(job, spans), out)
        image_path = out / "image.png"
        Image.fromarray(self._image(job), mode="RGB").save(image_path, format="PNG")
        return ExportResult(container_dir=out, image_path=image_path, manifest=manifest)
