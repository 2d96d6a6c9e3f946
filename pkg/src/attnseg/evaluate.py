"""Scoring: confusion matrices, per-class IoU / mIoU, and the
uncertainty-aware cross-entropy kernel with analytic gradients.

Confusion matrices add elementwise, so per-image matrices from parallel
workers merge deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .errors import ContractError, EvalError, NumericError
from .masks import SegMask, UNCERTAIN


@dataclass
class ConfusionMatrix:
    """(K+1) x (K+1) pixel counts; rows are ground truth, columns are
    prediction. Class 0 is background."""

    counts: np.ndarray
    ignored_pixels: int = 0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0] - 1

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ContractError(
                f"cannot merge confusion matrices of shapes "
                f"{self.counts.shape} and {other.counts.shape}"
            )
        return ConfusionMatrix(
            counts=self.counts + other.counts,
            ignored_pixels=self.ignored_pixels + other.ignored_pixels,
        )


def _as_array(mask: Union[SegMask, np.ndarray]) -> np.ndarray:
    data = mask.data if isinstance(mask, SegMask) else np.asarray(mask)
    return data


def confusion(
    pred: Union[SegMask, np.ndarray],
    gt: Union[SegMask, np.ndarray],
    num_classes: int,
    ignore: int = UNCERTAIN,
) -> ConfusionMatrix:
    """Count (gt, pred) pixel pairs, skipping ignored ground truth.

    Predictions are final labels and must not contain the uncertain
    value; map it away (e.g. to background) before scoring.
    """
    p = _as_array(pred)
    g = _as_array(gt)
    if p.shape != g.shape:
        raise ContractError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if np.any(p == ignore):
        raise ContractError(
            f"prediction contains the ignore value {ignore}; predictions "
            f"are never uncertain"
        )
    valid = g != ignore
    pv = p[valid].astype(np.int64)
    gv = g[valid].astype(np.int64)
    k1 = num_classes + 1
    if pv.size and (pv.max() >= k1 or gv.max() >= k1):
        raise ContractError(
            f"mask values exceed the declared class count {num_classes}"
        )
    counts = np.bincount(gv * k1 + pv, minlength=k1 * k1).reshape(k1, k1)
    return ConfusionMatrix(counts=counts, ignored_pixels=int((~valid).sum()))


def miou(
    cm: ConfusionMatrix, include_background: bool = True
) -> tuple[dict[int, float], float]:
    """Per-class IoU and their mean.

    IoU_c = TP / (TP + FP + FN). Classes whose union is empty carry no
    signal and are excluded from both the map and the mean; background
    (class 0) participates by default, matching the 20-classes-plus-
    background convention.
    """
    tp = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - np.diag(cm.counts)
    per_class: dict[int, float] = {}
    for c in range(cm.counts.shape[0]):
        if union[c] > 0:
            per_class[c] = float(tp[c] / union[c])
    if not per_class:
        raise EvalError("no class has a non-empty union; mIoU is undefined")
    pool = [
        iou
        for c, iou in per_class.items()
        if include_background or c != 0
    ]
    if not pool:
        raise EvalError("only background has a non-empty union")
    return per_class, float(np.mean(pool))


@dataclass
class LossReport:
    """Uncertainty-aware cross entropy and its gradient wrt the logits."""

    loss: float
    gradient: np.ndarray
    counted_pixels: int


def uncertainty_ce(
    logits: np.ndarray,
    target: Union[SegMask, np.ndarray],
    reduction: str = "sum",
) -> LossReport:
    """Cross entropy summed over pixels whose target is not 255.

    The gradient wrt logits is (softmax - onehot) at counted pixels and
    exactly zero at uncertain ones. ``reduction="mean"`` divides both loss
    and gradient by the counted-pixel count, the normalization trainers
    usually want.
    """
    if reduction not in ("sum", "mean"):
        raise ContractError(f"unknown reduction {reduction!r}")
    z = np.asarray(logits, dtype=np.float64)
    t = _as_array(target).astype(np.int64)
    if z.ndim != 3 or z.shape[:2] != t.shape:
        raise ContractError(
            f"logits shape {z.shape} does not match target {t.shape}"
        )
    if not np.all(np.isfinite(z)):
        raise NumericError("logits contain non-finite values")
    n_ch = z.shape[2]
    counted = t != UNCERTAIN
    if np.any((t[counted] < 0) | (t[counted] >= n_ch)):
        raise ContractError(
            f"target labels exceed the {n_ch} logit channels"
        )

    shifted = z - z.max(axis=2, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    logp = shifted - lse
    soft = np.exp(logp)

    grad = soft.copy()
    yy, xx = np.nonzero(counted)
    grad[yy, xx, t[yy, xx]] -= 1.0
    grad[~counted] = 0.0
    loss = float(-logp[yy, xx, t[yy, xx]].sum())

    n = int(counted.sum())
    if reduction == "mean":
        if n > 0:
            loss /= n
            grad /= n
    return LossReport(loss=loss, gradient=grad, counted_pixels=n)


def format_iou_table(
    per_class: Mapping[int, float],
    mean: float,
    names: Mapping[int, str] | None = None,
) -> str:
    """Plain-text per-class IoU table plus the mean, in class-id order."""
    rows = ["class                      IoU"]
    for c in sorted(per_class):
        label = names.get(c, str(c)) if names else str(c)
        if c == 0 and (not names or 0 not in names):
            label = "background"
        rows.append(f"{label:<24} {100.0 * per_class[c]:6.1f}")
    rows.append(f"{'mIoU':<24} {100.0 * mean:6.1f}")
    return "\n".join(rows)
