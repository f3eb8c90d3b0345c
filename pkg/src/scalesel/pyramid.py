"""Multi-scale feature pyramids: data model, FPYR file I/O, synthetic pair generation.

A pyramid stands in for the per-layer activations of a CNN backbone. Real
features are exported to the FPYR binary format by external tooling; for
desk-scale experiments :func:`gen_synthetic_pair` plants shared descriptors
at known keypoint locations so matching quality has a ground truth.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CapacityError,
    EmptySelectionError,
    FormatError,
    ShapeError,
    TruncationError,
    UnsupportedError,
    ValidationError,
)

FPYR_MAGIC = b"FPYR"
FPYR_VERSION = 1

WARP_KINDS = ("identity", "translation", "similarity")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """One pyramid level: a (channels, height, width) float32 grid plus its stride.

    ``stride`` is the number of image pixels per feature cell on both axes;
    the cell (ix, iy) is centered at ((ix + 0.5) * stride, (iy + 0.5) * stride).
    """

    layer_index: int
    stride: float
    data: np.ndarray  # (c, h, w), channel-major then row-major

    def __post_init__(self):
        if self.layer_index < 0:
            raise ValidationError(f"layer_index must be >= 0, got {self.layer_index}")
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"feature data must be (c, h, w), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValidationError(f"channels/height/width must be >= 1, got {data.shape}")
        if self.stride <= 0:
            raise ValidationError(f"stride must be positive, got {self.stride}")
        if not np.isfinite(data).all():
            raise ValidationError("feature data contains NaN or Inf")
        object.__setattr__(self, "data", np.ascontiguousarray(data, dtype=np.float32))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Ordered multi-scale feature maps for one image plus a global descriptor."""

    image_height: int
    image_width: int
    levels: tuple[FeatureMap, ...]
    global_descriptor: np.ndarray

    def __post_init__(self):
        levels = tuple(self.levels)
        if len(levels) < 2:
            raise ValidationError(f"a pyramid needs at least 2 levels, got {len(levels)}")
        indices = [m.layer_index for m in levels]
        if indices != list(range(len(levels))):
            raise ValidationError(
                f"layer indices must be 0..N-1 strictly ascending, got {indices}"
            )
        for m in levels:
            if (
                abs(m.stride * m.height - self.image_height) > 0.5
                or abs(m.stride * m.width - self.image_width) > 0.5
            ):
                raise ValidationError(
                    f"level {m.layer_index}: stride*grid spans "
                    f"{m.stride * m.height:.2f}x{m.stride * m.width:.2f}, more than "
                    f"0.5 px off the {self.image_height}x{self.image_width} image"
                )
        gd = np.ascontiguousarray(np.asarray(self.global_descriptor), dtype=np.float32)
        if gd.ndim != 1 or gd.size < 1 or not np.isfinite(gd).all():
            raise ValidationError("global descriptor must be a finite non-empty vector")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "global_descriptor", gd)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def global_dim(self) -> int:
        return int(self.global_descriptor.size)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Image-coordinate keypoints plus the object bounding box (x0, y0, x1, y1)."""

    points: np.ndarray  # (K, 2) float64, columns (x, y)
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        x0, y0, x1, y1 = (float(v) for v in self.bbox)
        if not (x1 > x0 and y1 > y0):
            raise ValidationError(f"bbox must have positive width and height, got {self.bbox}")
        if not np.isfinite(pts).all():
            raise ValidationError("keypoints contain NaN or Inf")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "bbox", (x0, y0, x1, y1))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class ImagePair:
    """A source/target pyramid pair with index-aligned keypoint correspondences."""

    source: FeaturePyramid
    target: FeaturePyramid
    src_keypoints: KeypointSet
    tgt_keypoints: KeypointSet
    src_mask: np.ndarray | None = None
    tgt_mask: np.ndarray | None = None

    def __post_init__(self):
        s, t = self.source, self.target
        if s.num_levels != t.num_levels:
            raise ShapeError("source and target pyramids must have the same level count")
        for a, b in zip(s.levels, t.levels):
            if a.channels != b.channels or abs(a.stride - b.stride) > 1e-6:
                raise ShapeError(
                    f"level {a.layer_index}: source/target channel or stride mismatch"
                )
        if len(self.src_keypoints) != len(self.tgt_keypoints):
            raise ValidationError("source/target keypoint sets must have equal cardinality")
        for kps, pyr, name in (
            (self.src_keypoints, s, "source"),
            (self.tgt_keypoints, t, "target"),
        ):
            pts = kps.points
            if pts.size and (
                pts[:, 0].min() < 0
                or pts[:, 1].min() < 0
                or pts[:, 0].max() > pyr.image_width
                or pts[:, 1].max() > pyr.image_height
            ):
                raise ValidationError(f"{name} keypoints fall outside the image bounds")
        for mask, pyr, name in ((self.src_mask, s, "src"), (self.tgt_mask, t, "tgt")):
            if mask is not None and mask.shape != (pyr.image_height, pyr.image_width):
                raise ShapeError(f"{name}_mask shape {mask.shape} does not match the image")

    @property
    def num_levels(self) -> int:
        return self.source.num_levels


@dataclass(frozen=True)
class Warp:
    """Geometric map applied to source keypoints to produce target keypoints."""

    kind: str = "identity"
    dx: float = 0.0
    dy: float = 0.0
    scale: float = 1.0
    rotation: float = 0.0  # radians, about the image center

    def __post_init__(self):
        if self.kind not in WARP_KINDS:
            raise ValidationError(f"warp kind must be one of {WARP_KINDS}, got {self.kind!r}")
        if self.kind == "similarity" and self.scale <= 0:
            raise ValidationError("similarity warp needs a positive scale")

    def apply(self, points: np.ndarray, image_h: float, image_w: float) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if self.kind == "identity":
            return pts.copy()
        if self.kind == "translation":
            return pts + np.array([self.dx, self.dy])
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        center = np.array([image_w / 2.0, image_h / 2.0])
        return (pts - center) @ (self.scale * rot).T + center


@dataclass(frozen=True)
class LevelSpec:
    channels: int
    height: int
    width: int
    stride: float


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one planted-correspondence pair; a pure function of ``seed``."""

    levels: tuple[LevelSpec, ...]
    informative_set: tuple[int, ...]
    signal_dims: int
    noise_sigma: float
    num_keypoints: int
    warp: Warp
    seed: int
    global_dim: int = 8

    def __post_init__(self):
        levels = tuple(self.levels)
        info = tuple(sorted(set(int(i) for i in self.informative_set)))
        if len(levels) < 2:
            raise ValidationError("synthetic spec needs at least 2 levels")
        if not info:
            raise ValidationError("informative_set must be non-empty")
        if info[0] < 0 or info[-1] >= len(levels):
            raise ValidationError(
                f"informative_set {info} has indices outside 0..{len(levels) - 1}"
            )
        if any(self.signal_dims > levels[i].channels for i in info):
            raise ValidationError("signal_dims exceeds channels of an informative level")
        if self.signal_dims < 1:
            raise ValidationError("signal_dims must be >= 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")
        if self.num_keypoints < 4:
            raise ValidationError("num_keypoints must be >= 4")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "informative_set", info)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def image_size(self) -> tuple[int, int]:
        """Image (height, width) implied by the level shapes; must be consistent."""
        l0 = self.levels[0]
        img_h = round(l0.stride * l0.height)
        img_w = round(l0.stride * l0.width)
        for i, l in enumerate(self.levels):
            if abs(l.stride * l.height - img_h) > 0.5 or abs(l.stride * l.width - img_w) > 0.5:
                raise ValidationError(
                    f"level {i} stride*grid disagrees with the level-0 image size"
                )
        return img_h, img_w


# ---------------------------------------------------------------------------
# FPYR binary format


def save_pyramid(pyr: FeaturePyramid, path) -> None:
    """Write the FPYR little-endian binary format (see README for the layout)."""
    buf = bytearray()
    buf += FPYR_MAGIC
    buf += struct.pack(
        "<IIIII",
        FPYR_VERSION,
        pyr.image_height,
        pyr.image_width,
        pyr.num_levels,
        pyr.global_dim,
    )
    buf += pyr.global_descriptor.astype("<f4").tobytes()
    for m in pyr.levels:
        buf += struct.pack("<IIIIf", m.layer_index, m.channels, m.height, m.width, m.stride)
        buf += m.data.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_pyramid(path) -> FeaturePyramid:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FPYR_MAGIC:
        raise FormatError(f"{path}: not an FPYR file (bad magic)")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncationError(
                f"{path}: needs {pos + n} bytes but the file has {len(raw)}"
            )
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    version, img_h, img_w, n_levels, d_g = struct.unpack("<IIIII", take(20))
    if version != FPYR_VERSION:
        raise FormatError(f"{path}: unsupported FPYR version {version}")
    gd = np.frombuffer(take(4 * d_g), dtype="<f4").copy()
    levels = []
    for _ in range(n_levels):
        li, c, h, w, stride = struct.unpack("<IIIIf", take(20))
        data = np.frombuffer(take(4 * c * h * w), dtype="<f4").reshape(c, h, w).copy()
        levels.append(FeatureMap(layer_index=li, stride=float(stride), data=data))
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} unexpected trailing bytes")
    return FeaturePyramid(int(img_h), int(img_w), tuple(levels), gd)


def pyramids_equal(a: FeaturePyramid, b: FeaturePyramid) -> bool:
    return (
        a.image_height == b.image_height
        and a.image_width == b.image_width
        and a.num_levels == b.num_levels
        and np.array_equal(a.global_descriptor, b.global_descriptor)
        and all(
            x.layer_index == y.layer_index
            and np.float32(x.stride) == np.float32(y.stride)
            and np.array_equal(x.data, y.data)
            for x, y in zip(a.levels, b.levels)
        )
    )


# ---------------------------------------------------------------------------
# Keypoint / mask JSON annotations


def mask_to_rle(mask: np.ndarray) -> dict:
    """Run-length encode a binary grid: per row, alternating (start, length) of 1-runs."""
    m = np.asarray(mask).astype(bool)
    rows = []
    for row in m:
        padded = np.concatenate([[False], row, [False]])
        edges = np.flatnonzero(padded[1:] != padded[:-1])
        starts, ends = edges[0::2], edges[1::2]
        run = []
        for s, e in zip(starts, ends):
            run += [int(s), int(e - s)]
        rows.append(run)
    return {"height": int(m.shape[0]), "width": int(m.shape[1]), "rows": rows}


def rle_to_mask(obj: dict) -> np.ndarray:
    h, w = int(obj["height"]), int(obj["width"])
    mask = np.zeros((h, w), dtype=np.uint8)
    rows = obj["rows"]
    if len(rows) != h:
        raise ValidationError(f"RLE mask declares {h} rows but provides {len(rows)}")
    for y, run in enumerate(rows):
        for s, n in zip(run[0::2], run[1::2]):
            if s < 0 or s + n > w:
                raise ValidationError(f"RLE run ({s}, {n}) exceeds row width {w}")
            mask[y, s : s + n] = 1
    return mask


def save_keypoints(kps: KeypointSet, path, mask: np.ndarray | None = None) -> None:
    doc = {"points": [[float(x), float(y)] for x, y in kps.points], "bbox": list(kps.bbox)}
    if mask is not None:
        doc["mask"] = mask_to_rle(mask)
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def load_keypoints(path) -> tuple[KeypointSet, np.ndarray | None]:
    doc = json.loads(Path(path).read_text())
    kps = KeypointSet(np.asarray(doc["points"], dtype=np.float64), tuple(doc["bbox"]))
    mask = rle_to_mask(doc["mask"]) if "mask" in doc else None
    return kps, mask


# ---------------------------------------------------------------------------
# Resizing and channel concatenation


def upsample(fmap: FeatureMap, out_h: int, out_w: int) -> FeatureMap:
    """Corner-aligned bilinear resize to (out_h, out_w). Upsampling only.

    The output stride is rescaled by h/out_h so the map keeps spanning the
    same image extent.
    """
    c, h, w = fmap.data.shape
    if out_h < h or out_w < w:
        raise UnsupportedError(f"downsampling {h}x{w} -> {out_h}x{out_w} is not supported")
    if out_h == h and out_w == w:
        return fmap
    data = fmap.data.astype(np.float64)
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    out = (
        data[:, y0[:, None], x0[None, :]] * ((1 - fy) * (1 - fx))
        + data[:, y0[:, None], x1[None, :]] * ((1 - fy) * fx)
        + data[:, y1[:, None], x0[None, :]] * (fy * (1 - fx))
        + data[:, y1[:, None], x1[None, :]] * (fy * fx)
    )
    return FeatureMap(fmap.layer_index, fmap.stride * h / out_h, out)


def concat_channels(maps: Sequence[FeatureMap], normalize_per_level: bool = True) -> FeatureMap:
    """Stack maps along channels; all must share (h, w) and stride.

    With ``normalize_per_level`` each map's per-position descriptor is scaled
    to unit L2 norm first (zero vectors stay zero), so no level dominates the
    cosine similarity of the concatenated descriptor.
    """
    if not maps:
        raise EmptySelectionError("concat_channels needs at least one map")
    head = maps[0]
    for m in maps[1:]:
        if (m.height, m.width) != (head.height, head.width):
            raise ShapeError(
                f"spatial mismatch: {m.height}x{m.width} vs {head.height}x{head.width}"
            )
        if abs(m.stride - head.stride) > 1e-3 * head.stride:
            raise ShapeError(f"stride mismatch: {m.stride} vs {head.stride}")
    parts = []
    for m in maps:
        d = m.data.astype(np.float64)
        if normalize_per_level:
            norm = np.sqrt((d * d).sum(axis=0, keepdims=True))
            d = d / np.where(norm > 0.0, norm, 1.0)
        parts.append(d)
    return FeatureMap(head.layer_index, head.stride, np.concatenate(parts, axis=0))


# ---------------------------------------------------------------------------
# Synthetic planted-correspondence pairs


def _level_cell(x: float, y: float, level: LevelSpec) -> tuple[int, int]:
    ix = min(int(x / level.stride), level.width - 1)
    iy = min(int(y / level.stride), level.height - 1)
    return ix, iy


def _place_keypoints(
    spec: SyntheticSpec, rng: np.random.Generator, img_h: int, img_w: int
) -> np.ndarray:
    """Pick keypoints on fine-level cell centers, one per coarse informative cell."""
    info_levels = [spec.levels[i] for i in spec.informative_set]
    fine = max(info_levels, key=lambda l: l.height * l.width)
    coarse = min(info_levels, key=lambda l: l.height * l.width)
    if spec.num_keypoints > coarse.height * coarse.width:
        raise CapacityError(
            f"{spec.num_keypoints} keypoints exceed the {coarse.height}x{coarse.width} "
            "capacity of the coarsest informative level"
        )
    margin = coarse.stride
    groups: dict[tuple[int, int], list[tuple[float, float]]] = {}
    for iy in range(fine.height):
        for ix in range(fine.width):
            x = (ix + 0.5) * fine.stride
            y = (iy + 0.5) * fine.stride
            wx, wy = spec.warp.apply(np.array([[x, y]]), img_h, img_w)[0]
            if not (
                margin <= x <= img_w - margin
                and margin <= y <= img_h - margin
                and margin <= wx <= img_w - margin
                and margin <= wy <= img_h - margin
            ):
                continue
            groups.setdefault(_level_cell(x, y, coarse), []).append((x, y))
    cells = sorted(groups)
    if len(cells) < spec.num_keypoints:
        raise CapacityError(
            f"only {len(cells)} coarse cells admit keypoints after margins, "
            f"{spec.num_keypoints} requested"
        )
    for _ in range(64):
        pick = rng.choice(len(cells), size=spec.num_keypoints, replace=False)
        chosen = [cells[i] for i in pick]
        if len({c[0] for c in chosen}) >= 2 and len({c[1] for c in chosen}) >= 2:
            break
    else:
        raise CapacityError("could not place keypoints spanning two rows and two columns")
    pts = []
    for cell in chosen:
        cands = groups[cell]
        pts.append(cands[int(rng.integers(len(cands)))])
    return np.asarray(pts, dtype=np.float64)


def gen_synthetic_pair(spec: SyntheticSpec) -> ImagePair:
    """Generate a planted-correspondence pair; bitwise deterministic per seed.

    Every cell of every level gets i.i.d. N(0, noise_sigma^2) background. For
    each keypoint and each informative level a shared N(0, 1) descriptor of
    ``signal_dims`` channels is added at the source cell containing the
    keypoint and the target cell containing its warp.
    """
    img_h, img_w = spec.image_size()
    rng = np.random.default_rng(spec.seed)
    src_global = rng.standard_normal(spec.global_dim)
    tgt_global = rng.standard_normal(spec.global_dim)
    src_pts = _place_keypoints(spec, rng, img_h, img_w)
    tgt_pts = spec.warp.apply(src_pts, img_h, img_w)
    descs = rng.standard_normal((len(spec.informative_set), spec.num_keypoints, spec.signal_dims))

    src_levels, tgt_levels = [], []
    for li, level in enumerate(spec.levels):
        shape = (level.channels, level.height, level.width)
        src = rng.standard_normal(shape) * spec.noise_sigma
        tgt = rng.standard_normal(shape) * spec.noise_sigma
        if li in spec.informative_set:
            d_idx = spec.informative_set.index(li)
            for k in range(spec.num_keypoints):
                sx, sy = _level_cell(src_pts[k, 0], src_pts[k, 1], level)
                tx, ty = _level_cell(tgt_pts[k, 0], tgt_pts[k, 1], level)
                src[: spec.signal_dims, sy, sx] += descs[d_idx, k]
                tgt[: spec.signal_dims, ty, tx] += descs[d_idx, k]
        src_levels.append(FeatureMap(li, level.stride, src))
        tgt_levels.append(FeatureMap(li, level.stride, tgt))

    def bbox_of(pts: np.ndarray) -> tuple[float, float, float, float]:
        return (
            float(pts[:, 0].min()),
            float(pts[:, 1].min()),
            float(pts[:, 0].max()),
            float(pts[:, 1].max()),
        )

    return ImagePair(
        source=FeaturePyramid(img_h, img_w, tuple(src_levels), src_global),
        target=FeaturePyramid(img_h, img_w, tuple(tgt_levels), tgt_global),
        src_keypoints=KeypointSet(src_pts, bbox_of(src_pts)),
        tgt_keypoints=KeypointSet(tgt_pts, bbox_of(tgt_pts)),
    )


def derive_pair_seed(root_seed: int, split: int, index: int) -> int:
    """Stable per-pair seed for dataset generation."""
    ss = np.random.SeedSequence(entropy=root_seed, spawn_key=(split, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
