"""Probabilistic Hough matching over a selected subset of pyramid levels.

Selected levels are resized to a common grid and concatenated into a
"hyperimage"; appearance similarity between all position pairs is then
re-weighted by geometric consensus: every pair votes its similarity into an
offset bin, and each pair's similarity is multiplied by its bin total.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .errors import EmptySelectionError, ShapeError, ValidationError
from .pyramid import FeatureMap, FeaturePyramid, KeypointSet, concat_channels, upsample

DEFAULT_BINS = 16


@dataclass(frozen=True)
class GridGeom:
    """Feature-grid geometry; positions are linearized row-major (p = iy * w + ix)."""

    h: int
    w: int
    stride: float

    @property
    def positions(self) -> int:
        return self.h * self.w

    @property
    def image_h(self) -> float:
        return self.stride * self.h

    @property
    def image_w(self) -> float:
        return self.stride * self.w

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-position cell-center (x, y) image coordinates."""
        iy, ix = np.divmod(np.arange(self.positions), self.w)
        return (ix + 0.5) * self.stride, (iy + 0.5) * self.stride


def grid_of(fmap: FeatureMap) -> GridGeom:
    return GridGeom(fmap.height, fmap.width, fmap.stride)


@dataclass(frozen=True, eq=False)
class Correlation:
    """Clamped cosine similarity between every source and target position."""

    values: np.ndarray  # (P_s, P_t) float64 in [0, 1]
    src_grid: GridGeom
    tgt_grid: GridGeom


@dataclass(frozen=True, eq=False)
class OffsetBinGrid:
    """Accumulated similarity votes over discretized (dx, dy) offsets.

    Bins cover [-range_x, range_x] x [-range_y, range_y] in image pixels;
    every representable offset maps to exactly one bin.
    """

    bins_x: int
    bins_y: int
    range_x: float
    range_y: float
    votes: np.ndarray  # (bins_y, bins_x) float64, non-negative


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Re-weighted correlation plus the per-source-position best target."""

    reweighted: np.ndarray  # (P_s, P_t) non-negative
    best_target: np.ndarray  # (P_s,) int64, ties broken by smallest index
    src_grid: GridGeom
    tgt_grid: GridGeom


@dataclass(frozen=True, eq=False)
class DenseFlow:
    """Per source cell (dx, dy) displacement in image pixels."""

    flow: np.ndarray  # (P_s, 2)
    grid: GridGeom  # source grid


def build_hyperimage(pyr: FeaturePyramid, selected: Iterable[int]) -> FeatureMap:
    """Upsample the selected levels to the largest grid among them and concatenate.

    The selection is canonicalized to ascending layer order, so any
    permutation of the same index set produces an identical output.
    """
    sel = sorted(set(int(i) for i in selected))
    if not sel:
        raise EmptySelectionError("feature selection must be non-empty")
    if sel[0] < 0 or sel[-1] >= pyr.num_levels:
        raise ValidationError(f"selection {sel} outside levels 0..{pyr.num_levels - 1}")
    maps = [pyr.levels[i] for i in sel]
    out_h = max(m.height for m in maps)
    out_w = max(m.width for m in maps)
    stride = pyr.image_height / out_h
    resized = [
        replace(upsample(m, out_h, out_w), stride=stride, layer_index=m.layer_index)
        for m in maps
    ]
    return concat_channels(resized, normalize_per_level=True)


def compute_correlation(src: FeatureMap, tgt: FeatureMap) -> Correlation:
    """Pairwise cosine similarity, clamped to [0, 1]; zero descriptors give 0."""
    if src.channels != tgt.channels:
        raise ShapeError(f"channel mismatch: {src.channels} vs {tgt.channels}")

    def unit_descriptors(m: FeatureMap) -> np.ndarray:
        d = m.data.astype(np.float64).reshape(m.channels, -1)
        norm = np.sqrt((d * d).sum(axis=0, keepdims=True))
        return d / np.where(norm > 0.0, norm, 1.0)

    vals = np.clip(unit_descriptors(src).T @ unit_descriptors(tgt), 0.0, 1.0)
    return Correlation(vals, grid_of(src), grid_of(tgt))


def _offset_ranges(corr: Correlation) -> tuple[float, float]:
    return (
        max(corr.src_grid.image_w, corr.tgt_grid.image_w),
        max(corr.src_grid.image_h, corr.tgt_grid.image_h),
    )


def _bin_indices(corr: Correlation, bins_x: int, bins_y: int) -> np.ndarray:
    """Linearized bin index (by * bins_x + bx) for every (p, q) pair."""
    range_x, range_y = _offset_ranges(corr)
    sx, sy = corr.src_grid.centers()
    tx, ty = corr.tgt_grid.centers()
    off_x = tx[None, :] - sx[:, None]
    off_y = ty[None, :] - sy[:, None]
    bx = np.clip(((off_x + range_x) * (bins_x / (2.0 * range_x))).astype(np.int64), 0, bins_x - 1)
    by = np.clip(((off_y + range_y) * (bins_y / (2.0 * range_y))).astype(np.int64), 0, bins_y - 1)
    return by * bins_x + bx


def hough_vote(corr: Correlation, bins_x: int = DEFAULT_BINS, bins_y: int = DEFAULT_BINS) -> OffsetBinGrid:
    """Accumulate every pair's similarity into its offset bin."""
    if bins_x < 1 or bins_y < 1:
        raise ValidationError("bin counts must be >= 1")
    lin = _bin_indices(corr, bins_x, bins_y)
    votes = np.bincount(lin.ravel(), weights=corr.values.ravel(), minlength=bins_x * bins_y)
    range_x, range_y = _offset_ranges(corr)
    return OffsetBinGrid(bins_x, bins_y, range_x, range_y, votes.reshape(bins_y, bins_x))


def reweight(corr: Correlation, bins: OffsetBinGrid) -> MatchResult:
    """Multiply each pair's similarity by the vote total of its offset bin."""
    range_x, range_y = _offset_ranges(corr)
    if (bins.range_x, bins.range_y) != (range_x, range_y):
        raise ShapeError("offset bins were not built from this correlation's geometry")
    lin = _bin_indices(corr, bins.bins_x, bins.bins_y)
    rew = corr.values * bins.votes.ravel()[lin]
    best = np.argmax(rew, axis=1).astype(np.int64)
    return MatchResult(rew, best, corr.src_grid, corr.tgt_grid)


def match_pair(
    pair_source: FeaturePyramid,
    pair_target: FeaturePyramid,
    selected: Iterable[int],
    bins_x: int = DEFAULT_BINS,
    bins_y: int = DEFAULT_BINS,
) -> MatchResult:
    """Full pipeline: hyperimages, correlation, voting, re-weighting."""
    hyper_s = build_hyperimage(pair_source, selected)
    hyper_t = build_hyperimage(pair_target, selected)
    corr = compute_correlation(hyper_s, hyper_t)
    return reweight(corr, hough_vote(corr, bins_x, bins_y))


def transfer_keypoints(match: MatchResult, kps: KeypointSet) -> KeypointSet:
    """Map source keypoints to the target image through the matched grid.

    For each keypoint the <= 4 grid cells with the nearest centers vote with
    bilinear weights in center displacement; the prediction is the weighted
    mean of their best targets' centers. Predictions may collapse to a single
    point, so the output bbox is padded to keep a positive extent.
    """
    g = match.src_grid
    tcx, tcy = match.tgt_grid.centers()
    pts = kps.points
    if pts.shape[0] == 0:
        return KeypointSet(pts.copy(), kps.bbox)
    out = np.empty_like(pts)
    for j, (x, y) in enumerate(pts):
        ix0 = int(np.floor(x / g.stride - 0.5))
        iy0 = int(np.floor(y / g.stride - 0.5))
        cells = {
            (min(max(iy, 0), g.h - 1), min(max(ix, 0), g.w - 1))
            for iy in (iy0, iy0 + 1)
            for ix in (ix0, ix0 + 1)
        }
        num = np.zeros(2)
        den = 0.0
        nearest = None
        nearest_d2 = np.inf
        for cy, cx in sorted(cells):
            ccx = (cx + 0.5) * g.stride
            ccy = (cy + 0.5) * g.stride
            wgt = max(0.0, 1.0 - abs(x - ccx) / g.stride) * max(0.0, 1.0 - abs(y - ccy) / g.stride)
            q = int(match.best_target[cy * g.w + cx])
            if wgt > 0.0:
                num += wgt * np.array([tcx[q], tcy[q]])
                den += wgt
            d2 = (x - ccx) ** 2 + (y - ccy) ** 2
            if d2 < nearest_d2:
                nearest_d2 = d2
                nearest = q
        if den > 0.0:
            out[j] = num / den
        else:  # all covering centers >= one stride away; fall back to the nearest cell
            out[j] = (tcx[nearest], tcy[nearest])
    eps = 1e-6
    bbox = (
        float(out[:, 0].min()) - eps,
        float(out[:, 1].min()) - eps,
        float(out[:, 0].max()) + eps,
        float(out[:, 1].max()) + eps,
    )
    return KeypointSet(out, bbox)


def dense_flow(match: MatchResult) -> DenseFlow:
    """flow(p) = center(best_target(p)) - center(p), in image pixels."""
    scx, scy = match.src_grid.centers()
    tcx, tcy = match.tgt_grid.centers()
    q = match.best_target
    return DenseFlow(np.stack([tcx[q] - scx, tcy[q] - scy], axis=1), match.src_grid)


def match_result_to_json(match: MatchResult) -> dict:
    return {
        "best_target": [int(q) for q in match.best_target],
        "grid": {"h": match.src_grid.h, "w": match.src_grid.w, "stride": match.src_grid.stride},
    }


def flow_to_csv_rows(flow: DenseFlow) -> list[tuple[float, float, float, float]]:
    """Rows (x, y, dx, dy): source cell center and its displacement."""
    cx, cy = flow.grid.centers()
    return [
        (float(cx[p]), float(cy[p]), float(flow.flow[p, 0]), float(flow.flow[p, 1]))
        for p in range(flow.grid.positions)
    ]
