"""Batch driver: containers in, masks and reports out.

Per-image work is pure, so images run fully in parallel; report rows are
merged back in input order and all timing lives in a separate report
section, keeping everything else byte-reproducible across worker counts.
One bad container marks its row as failed and the batch keeps going.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import aggregate, class_slice, refine
from .errors import AttnSegError, ConfigError, ContractError
from .evaluate import ConfusionMatrix, confusion, miou
from .fixtures import GT_NAME
from .masks import (
    BACKGROUND,
    UNCERTAIN,
    SegMask,
    decide,
    objectness,
    read_mask,
    write_mask,
)
from .store import MANIFEST_NAME, read_container, resize_nearest

REPORT_NAME = "report.json"


@dataclass
class PipelineConfig:
    """Hyperparameters of the mask generation pipeline.

    Defaults are the best ablation cells: tau=4, thresholds 0.5/0.6,
    cross-attention at 16 and self-attention at 32.
    """

    tau: int = 4
    alpha: float = 0.5
    beta: float = 0.6
    cross_scale: int = 16
    self_scale: int = 32
    timestep_range: Optional[tuple[int, int]] = None
    top_k: int = 3
    reduction: str = "sum"
    normalize_objectness: bool = True
    decide_at_grid: bool = False
    include_background: bool = True
    workers: int = 1

    def validate(self) -> "PipelineConfig":
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if not (0.0 <= self.alpha < self.beta <= 1.0):
            raise ConfigError(
                f"need 0 <= alpha < beta <= 1, got ({self.alpha}, {self.beta})"
            )
        if self.cross_scale < 1 or self.self_scale < 1:
            raise ConfigError("scales must be positive")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown reduction {self.reduction!r}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if self.timestep_range is not None:
            lo, hi = self.timestep_range
            if lo > hi:
                raise ConfigError(f"empty timestep range {self.timestep_range}")
        return self

    def to_json(self) -> dict:
        obj = asdict(self)
        if obj["timestep_range"] is not None:
            obj["timestep_range"] = list(obj["timestep_range"])
        return obj

    @staticmethod
    def from_json(obj: dict) -> "PipelineConfig":
        known = {f for f in PipelineConfig.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kwargs = dict(obj)
        if kwargs.get("timestep_range") is not None:
            kwargs["timestep_range"] = tuple(kwargs["timestep_range"])
        return PipelineConfig(**kwargs).validate()

    @staticmethod
    def load(path: Path | str) -> "PipelineConfig":
        with open(path, encoding="utf-8") as fh:
            return PipelineConfig.from_json(json.load(fh))

    def save(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def generate_mask(container_dir: Path | str, config: PipelineConfig) -> tuple[str, SegMask]:
    """Run one container through aggregate -> slice -> refine -> decide."""
    reader = read_container(container_dir)
    agg = aggregate(
        reader,
        self_scale=config.self_scale,
        cross_scale=config.cross_scale,
        timestep_range=config.timestep_range,
    )
    refined = refine(class_slice(agg, reader.manifest), config.tau)
    size = reader.manifest.image_size
    if config.decide_at_grid:
        field = objectness(refined, refined.grid, normalize=config.normalize_objectness)
        coarse = decide(field, config.alpha, config.beta)
        mask = SegMask(
            data=resize_nearest(coarse.data, size), legend=coarse.legend
        )
    else:
        field = objectness(refined, size, normalize=config.normalize_objectness)
        mask = decide(field, config.alpha, config.beta)
    return reader.manifest.image_id, mask


def _generate_one(args: tuple[str, dict, str]) -> dict:
    container_dir, config_obj, out_dir = args
    config = PipelineConfig.from_json(config_obj)
    started = time.perf_counter()
    row: dict = {"container": str(container_dir)}
    try:
        image_id, mask = generate_mask(container_dir, config)
        write_mask(mask, Path(out_dir) / f"{image_id}.png")
        row.update(
            {
                "image_id": image_id,
                "status": "ok",
                "uncertain_fraction": round(mask.uncertain_fraction(), 6),
                "classes": mask.present_classes(),
            }
        )
    except (AttnSegError, OSError) as exc:
        row.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    row["_seconds"] = time.perf_counter() - started
    return row


def _reject_duplicate_ids(container_dirs: Sequence[Path | str]) -> None:
    """Duplicate image ids would silently overwrite each other's masks;
    refuse the batch before any work happens. Unreadable manifests are
    left for per-image handling."""
    seen: dict[str, str] = {}
    dupes = []
    for d in container_dirs:
        try:
            with open(Path(d) / MANIFEST_NAME, encoding="utf-8") as fh:
                image_id = json.load(fh).get("image_id")
        except (OSError, json.JSONDecodeError):
            continue
        if image_id in seen:
            dupes.append(f"{image_id!r} ({seen[image_id]} and {d})")
        else:
            seen[image_id] = str(d)
    if dupes:
        raise ContractError("duplicate image ids in batch: " + "; ".join(dupes))


def run_generate(
    config: PipelineConfig,
    container_dirs: Sequence[Path | str],
    out_dir: Path | str,
) -> dict:
    """Generate one mask per container; returns the run report.

    The report's "images" rows are deterministic; wall-clock numbers are
    isolated under "timing".
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    _reject_duplicate_ids(container_dirs)
    jobs = [(str(d), config.to_json(), str(out_dir)) for d in container_dirs]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            rows = list(pool.map(_generate_one, jobs, chunksize=8))
    else:
        rows = [_generate_one(j) for j in jobs]

    timing = {
        "total_seconds": time.perf_counter() - started,
        "per_image_seconds": {
            row.get("image_id", row["container"]): row.pop("_seconds")
            for row in rows
        },
    }
    failed = sum(1 for r in rows if r["status"] == "failed")
    report = {
        "config": config.to_json(),
        "images": rows,
        "summary": {"total": len(rows), "failed": failed},
        "timing": timing,
    }
    with open(out_dir / REPORT_NAME, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return report


def score_against_gt(
    mask: SegMask, gt: SegMask, num_classes: int
) -> ConfusionMatrix:
    """Confusion of a generated mask against fixture/real ground truth.

    Uncertain pixels are mapped to background first: the scorer rejects
    255 in predictions, and an unlabeled pixel is a background claim for
    IoU purposes.
    """
    pred = np.where(mask.data == UNCERTAIN, np.uint8(BACKGROUND), mask.data)
    return confusion(pred, gt, num_classes)


def find_containers(root: Path | str) -> list[Path]:
    """A container dir itself, or every container directly under root."""
    root = Path(root)
    if (root / MANIFEST_NAME).is_file():
        return [root]
    found = sorted(
        p.parent for p in root.glob(f"*/{MANIFEST_NAME}")
    )
    return found


def run_ablation(
    base_config: PipelineConfig,
    cells: Sequence[dict],
    fixture_dirs: Sequence[Path | str],
    num_classes: int,
) -> dict:
    """Score a config grid over fixture scenes (container + gt pairs).

    Each cell is a partial config patch; invalid cells are skipped with a
    note instead of aborting the sweep. mIoU per cell is computed from
    the confusion pooled over all fixtures.
    """
    if not cells:
        raise ConfigError("ablation grid is empty")
    fixture_dirs = [Path(d) for d in fixture_dirs]
    rows = []
    for cell in cells:
        try:
            cfg = replace(base_config, **cell).validate()
        except (ConfigError, TypeError) as exc:
            rows.append({"cell": cell, "status": "skipped", "note": str(exc)})
            continue
        pooled: Optional[ConfusionMatrix] = None
        for d in fixture_dirs:
            _, mask = generate_mask(d, cfg)
            gt = read_mask(d / GT_NAME)
            cm = score_against_gt(mask, gt, num_classes)
            pooled = cm if pooled is None else pooled + cm
        _, mean = miou(pooled, include_background=cfg.include_background)
        rows.append({"cell": cell, "status": "ok", "miou": round(mean, 6)})
    return {"base_config": base_config.to_json(), "cells": rows}


def format_ablation_table(result: dict) -> str:
    lines = ["cell                                     mIoU"]
    for row in result["cells"]:
        cell = json.dumps(row["cell"], sort_keys=True)
        if row["status"] == "ok":
            lines.append(f"{cell:<40} {100.0 * row['miou']:6.1f}")
        else:
            lines.append(f"{cell:<40} skipped ({row['note']})")
    return "\n".join(lines)
