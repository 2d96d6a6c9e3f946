"""Attention math: layer/timestep averaging, class-token slicing, and
self-attention matrix exponentiation.

All arithmetic runs in float64; containers store float32. The self map is
a row-stochastic n x n matrix whose tau-th power propagates per-class
cross-attention evidence along intra-image affinities:

    refined = self_map ** tau @ cross_map

Rows are renormalized after every matrix multiplication so the stochastic
interpretation survives float drift.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AggregationError, ContractError, ManifestError
from .store import ContainerReader, Kind, RunManifest, resize_spatial

ZERO_ROW_EPS = 1e-12


def renormalize_rows(mat: np.ndarray) -> np.ndarray:
    """Scale each row to sum to 1; rows with (near-)zero mass become
    uniform. Returns a new float64 array."""
    mat = np.asarray(mat, dtype=np.float64)
    sums = mat.sum(axis=1, keepdims=True)
    dead = sums[:, 0] < ZERO_ROW_EPS
    safe = np.where(dead[:, None], 1.0, sums)
    out = mat / safe
    if dead.any():
        out[dead] = 1.0 / mat.shape[1]
    return out


@dataclass
class AggregatedAttention:
    """Mean self- and cross-attention for one image.

    ``cross_map`` spans the full token axis until class_slice reduces it
    to one column per class (``sliced`` flips to True at that point).
    """

    self_map: np.ndarray
    cross_map: np.ndarray
    self_grid: tuple[int, int]
    cross_grid: tuple[int, int]
    class_ids: list[int]
    sliced: bool = False


@dataclass
class RefinedAttention:
    """Per-class objectness scores on the self-attention grid, one column
    per class, rows summing to 1."""

    map: np.ndarray
    class_ids: list[int]
    grid: tuple[int, int]


def _mean_records(
    reader: ContainerReader,
    kind: Kind,
    grid: tuple[int, int],
    timestep_range: Optional[tuple[int, int]],
    layer_filter: Optional[Sequence[int]],
) -> np.ndarray:
    descs = reader.select(
        kind=kind, grid=grid, timestep_range=timestep_range, layers=layer_filter
    )
    if not descs:
        raise AggregationError(
            f"no {kind.value} records at grid {grid[0]}x{grid[1]} match "
            f"timestep range {timestep_range} / layer filter {layer_filter}"
        )
    acc = None
    for d in descs:  # ascending (timestep, layer): fixed summation order
        rec = reader.load(d)
        if acc is None:
            acc = rec.data.astype(np.float64)
        else:
            acc += rec.data
    return acc / len(descs)


def aggregate(
    reader: ContainerReader,
    self_scale: int = 32,
    cross_scale: int = 16,
    timestep_range: Optional[tuple[int, int]] = None,
    layer_filter: Optional[Sequence[int]] = None,
) -> AggregatedAttention:
    """Average attention over layers and timesteps, streaming one record
    at a time.

    Only records at the selected scale per kind participate; the default
    timestep range is everything the container holds. Summation order is
    ascending timestep then layer, which makes the result bit-reproducible.
    """
    self_grid = (self_scale, self_scale)
    cross_grid = (cross_scale, cross_scale)
    self_map = _mean_records(reader, Kind.SELF, self_grid, timestep_range, layer_filter)
    cross_map = _mean_records(
        reader, Kind.CROSS, cross_grid, timestep_range, layer_filter
    )
    return AggregatedAttention(
        self_map=self_map,
        cross_map=cross_map,
        self_grid=self_grid,
        cross_grid=cross_grid,
        class_ids=reader.manifest.class_ids,
        sliced=False,
    )


def class_slice(agg: AggregatedAttention, manifest: RunManifest) -> AggregatedAttention:
    """Reduce the token axis to one column per class and renormalize.

    Multi-token class names average their token columns first. Because
    restricting a softmax to a subset and renormalizing equals the softmax
    of the subset logits, this reproduces cross-attention computed against
    a class-only prompt. Rows with no class mass at all become uniform.
    """
    if agg.sliced:
        raise ContractError("cross_map is already class-sliced")
    n_tokens = agg.cross_map.shape[1]
    cols = []
    for cls in manifest.classes:
        s, e = cls.token_span
        if not (0 <= s < e <= n_tokens):
            raise ManifestError(
                f"token span {cls.token_span} of {cls.name!r} outside [0, {n_tokens})"
            )
        cols.append(agg.cross_map[:, s:e].mean(axis=1))
    sliced = renormalize_rows(np.stack(cols, axis=1))
    return AggregatedAttention(
        self_map=agg.self_map,
        cross_map=sliced,
        self_grid=agg.self_grid,
        cross_grid=agg.cross_grid,
        class_ids=[c.class_id for c in manifest.classes],
        sliced=True,
    )


def self_power(self_map: np.ndarray, tau: int) -> np.ndarray:
    """tau-th power of a row-stochastic matrix by repeated squaring.

    Every matrix product is followed by a row renormalization; tau = 0
    returns the identity. Exponent bits drive ceil(log2 tau) squarings
    plus one product per set bit, which is what keeps tau = 4 on a
    4096-row matrix affordable.
    """
    a = np.asarray(self_map, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"self map must be square, got shape {a.shape}")
    if tau < 0 or int(tau) != tau:
        raise ContractError(f"tau must be a non-negative integer, got {tau}")
    tau = int(tau)
    n = a.shape[0]
    if tau == 0:
        return np.eye(n)
    result: Optional[np.ndarray] = None
    base = a
    while tau:
        if tau & 1:
            result = base if result is None else renormalize_rows(result @ base)
        tau >>= 1
        if tau:
            base = renormalize_rows(base @ base)
    return result


def refine(agg: AggregatedAttention, tau: int) -> RefinedAttention:
    """Propagate class evidence along intra-image affinities.

    The class-sliced cross map is brought up to the self grid by
    channel-wise bilinear resize (never the self map down: downsampling an
    n x n affinity matrix has no meaning), renormalized, then multiplied
    by the tau-th self-attention power. The product of row-stochastic
    factors is renormalized once more to pin row sums at 1.
    """
    if not agg.sliced:
        raise ContractError("refine expects a class-sliced AggregatedAttention")
    hc, wc = agg.cross_grid
    hs, ws = agg.self_grid
    m = agg.cross_map.shape[1]
    stack = agg.cross_map.reshape(hc, wc, m)
    resized = resize_spatial(stack, (hs, ws)).reshape(hs * ws, m)
    cross = renormalize_rows(resized)
    if tau == 0:
        out = cross
    else:
        power = self_power(agg.self_map, tau)
        if power.shape[1] != cross.shape[0]:
            raise ContractError(
                f"self grid {agg.self_grid} does not match resized cross rows "
                f"{cross.shape[0]}"
            )
        out = renormalize_rows(power @ cross)
    return RefinedAttention(
        map=out, class_ids=list(agg.class_ids), grid=(hs, ws)
    )
