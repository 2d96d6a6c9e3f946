"""Mask synthesis: objectness fields, threshold decisions with an
uncertainty band, PNG round-trip, and the self-training mask swap.

Masks are 8-bit: 0 = background, class ids in [1, 254], 255 = uncertain.
Uncertain pixels exist so a downstream trainer can skip their loss; they
are never predictions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .attention import RefinedAttention
from .errors import ConfigError, ContractError, FormatError
from .store import resize_spatial

UNCERTAIN = 255
BACKGROUND = 0

log = logging.getLogger(__name__)


@dataclass
class SegMask:
    """An H x W map over {0} | legend | {255}."""

    data: np.ndarray
    legend: tuple[int, ...]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        self.legend = tuple(int(c) for c in self.legend)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def uncertain_fraction(self) -> float:
        return float(np.mean(self.data == UNCERTAIN))

    def present_classes(self) -> list[int]:
        vals = np.unique(self.data)
        return [int(v) for v in vals if v not in (BACKGROUND, UNCERTAIN)]


@dataclass
class ObjectnessField:
    """Per-pixel max objectness and the class channel that produced it.

    ``labels`` holds positions into ``class_ids`` (not class ids), so the
    argmax stays meaningful even for non-contiguous id sets.
    """

    values: np.ndarray
    labels: np.ndarray
    class_ids: list[int]


def class_score_stack(
    refined: RefinedAttention,
    image_size: tuple[int, int],
    normalize: bool = True,
) -> np.ndarray:
    """Per-class score maps at image resolution, shape (H, W, M).

    Each class channel is min-max normalized over the image (raw averaged
    attention never reaches the 0.5/0.6 threshold range on its own;
    constant channels map to 0), then bilinearly upsampled. Set
    ``normalize=False`` for the raw-value sensitivity mode.
    """
    m = len(refined.class_ids)
    if m == 0:
        raise ContractError("refined attention has no classes")
    h, w = refined.grid
    stack = np.asarray(refined.map, dtype=np.float64).reshape(h, w, m)
    if normalize:
        lo = stack.min(axis=(0, 1), keepdims=True)
        hi = stack.max(axis=(0, 1), keepdims=True)
        span = hi - lo
        flat = span[0, 0] < 1e-12
        span = np.where(span < 1e-12, 1.0, span)
        stack = (stack - lo) / span
        stack[:, :, flat] = 0.0
    return resize_spatial(stack, image_size)


def objectness(
    refined: RefinedAttention,
    image_size: tuple[int, int],
    normalize: bool = True,
) -> ObjectnessField:
    """Pixel-wise max / argmax over class channels at image resolution.

    Ties go to the lowest class position (numpy argmax semantics).
    """
    stack = class_score_stack(refined, image_size, normalize=normalize)
    return ObjectnessField(
        values=stack.max(axis=2),
        labels=stack.argmax(axis=2).astype(np.int32),
        class_ids=list(refined.class_ids),
    )


def decide(field: ObjectnessField, alpha: float, beta: float) -> SegMask:
    """Three-way threshold of the objectness field.

    V <= alpha is certain background, V >= beta is the argmax class, and
    the open interval between them is the uncertainty value 255. The
    boundary cases sit exactly on the <= and < of that piecewise map.
    """
    if not (0.0 <= alpha < beta <= 1.0):
        raise ConfigError(
            f"thresholds must satisfy 0 <= alpha < beta <= 1, got "
            f"({alpha}, {beta})"
        )
    v = field.values
    ids = np.asarray(field.class_ids, dtype=np.uint8)
    data = ids[field.labels]
    data = np.where(v < beta, np.uint8(UNCERTAIN), data)
    data = np.where(v <= alpha, np.uint8(BACKGROUND), data)
    return SegMask(data=data, legend=tuple(field.class_ids))


def color_palette(n: int = 256) -> np.ndarray:
    """Deterministic (n, 3) uint8 palette via bit-reversal, the usual
    indexed-segmentation coloring."""
    pal = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        c = i
        r = g = b = 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    pal[UNCERTAIN] = (255, 255, 255)
    return pal


def write_mask(mask: SegMask, path: Path | str, palette: bool = False) -> None:
    """Write an 8-bit single-channel PNG; pixel value = class id.

    ``palette=True`` writes the same pixel values as an indexed-color
    image for visual inspection; the round-trip stays bit-exact.
    """
    img = Image.fromarray(mask.data, mode="L")
    if palette:
        img = img.convert("P")
        img.putpalette(color_palette().flatten().tolist())
    img.save(path, format="PNG")


def read_mask(path: Path | str) -> SegMask:
    """Read a mask PNG written by write_mask (or any 8-bit single-channel
    PNG). The legend is inferred from the values present."""
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise FormatError(
                f"mask must be an 8-bit single-channel PNG, got mode {img.mode!r}"
            )
        data = np.asarray(img, dtype=np.uint8)
    legend = tuple(
        int(v) for v in np.unique(data) if v not in (BACKGROUND, UNCERTAIN)
    )
    return SegMask(data=data, legend=legend)


def mask_violations(mask: SegMask, allowed_ids: Sequence[int]) -> list[int]:
    """Values present in the mask that are neither background, uncertain,
    nor in ``allowed_ids``. Empty list means the mask is clean."""
    allowed = {BACKGROUND, UNCERTAIN, *(int(c) for c in allowed_ids)}
    return [int(v) for v in np.unique(mask.data) if int(v) not in allowed]


def adopt_pseudo_labels(
    original: SegMask,
    predicted: SegMask,
    allowed_ids: Optional[Sequence[int]] = None,
) -> SegMask:
    """Self-training swap: replace the attention-derived mask with the
    segmenter's own prediction.

    The prediction must carry no uncertainty. Classes the prediction
    introduces beyond the original mask are accepted (self-training may
    legitimately relabel) but logged for audit; values outside
    ``allowed_ids``, when given, are rejected.
    """
    if original.data.shape != predicted.data.shape:
        raise ContractError(
            f"mask shapes differ: {original.data.shape} vs {predicted.data.shape}"
        )
    if np.any(predicted.data == UNCERTAIN):
        raise ContractError("pseudo labels must not contain the uncertain value 255")
    if allowed_ids is not None:
        bad = mask_violations(predicted, allowed_ids)
        if bad:
            raise ContractError(f"pseudo labels use out-of-vocabulary values {bad}")
    new_classes = sorted(
        set(predicted.present_classes()) - set(original.present_classes())
    )
    if new_classes:
        log.warning(
            "pseudo labels introduce classes %s absent from the original mask",
            new_classes,
        )
    return SegMask(data=predicted.data.copy(), legend=predicted.legend)


def write_overlay(
    image: np.ndarray, mask: SegMask, path: Path | str, alpha: float = 0.5
) -> None:
    """Blend an RGB image with the colorized mask for inspection."""
    image = np.asarray(image, dtype=np.uint8)
    if image.shape[:2] != mask.data.shape:
        raise ContractError(
            f"image {image.shape[:2]} and mask {mask.data.shape} sizes differ"
        )
    colors = color_palette()[mask.data]
    blended = (1.0 - alpha) * image.astype(np.float64) + alpha * colors
    Image.fromarray(np.round(blended).astype(np.uint8), mode="RGB").save(
        path, format="PNG"
    )
