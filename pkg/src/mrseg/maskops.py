"""Mask and box arithmetic.

Masks are plain ``numpy`` boolean arrays of shape ``(height, width)`` in
row-major order. Boxes are half-open pixel rectangles ``(x1, y1, x2, y2)``
with the origin at the top-left corner and y growing downward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

DICE_EPS = 1e-6
CE_CLAMP = 1e-7


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box {self.as_list()}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def is_degenerate(self) -> bool:
        return self.width <= 0 or self.height <= 0

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def intersection_area(self, other: "Box") -> float:
        w = min(self.x2, other.x2) - max(self.x1, other.x1)
        h = min(self.y2, other.y2) - max(self.y1, other.y1)
        if w <= 0 or h <= 0:
            return 0
        return w * h

    def iou(self, other: "Box") -> float:
        inter = self.intersection_area(other)
        union = self.area + other.area - inter
        return inter / union if union > 0 else 0.0

    def contains(self, other: "Box") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and other.x2 <= self.x2 and other.y2 <= self.y2)

    def expand(self, pad: float) -> "Box":
        return Box(self.x1 - pad, self.y1 - pad, self.x2 + pad, self.y2 + pad)

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")


@dataclass(frozen=True)
class EmbeddingSpec:
    dim: int = 256
    frequency_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.dim <= 0 or self.dim % 8:
            raise ValueError(f"embedding dim must be a positive multiple of 8, got {self.dim}")
        if self.frequency_base <= 0:
            raise ValueError("frequency_base must be positive")


# ---------------------------------------------------------------------------
# run-length codec (COCO convention: column-major, starts with the zero run)
# ---------------------------------------------------------------------------

def rle_decode(counts: Sequence[int], h: int, w: int) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size and counts.min() < 0:
        raise ValueError("negative run length")
    total = int(counts.sum())
    if total != h * w:
        raise ValueError(f"run lengths sum to {total}, expected {h}*{w}={h * w}")
    values = np.arange(counts.size) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape(w, h).T.copy()


def rle_encode(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=bool).T.reshape(-1)
    if flat.size == 0:
        return [0]
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_to_string(counts: Sequence[int]) -> str:
    """Compress run lengths into the COCO ``counts`` text form."""
    out = []
    for i, x in enumerate(counts):
        x = int(x)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = x != -1 if c & 0x10 else x != 0
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def rle_from_string(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    while p < len(s):
        x = 0
        k = 0
        more = True
        while more:
            if p >= len(s):
                raise ValueError("truncated compressed RLE string")
            c = ord(s[p]) - 48
            if c < 0 or c > 63:
                raise ValueError(f"invalid character {s[p]!r} in compressed RLE")
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and c & 0x10:
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


# ---------------------------------------------------------------------------
# polygon rasterization
# ---------------------------------------------------------------------------

def _ring_points(ring: Sequence) -> np.ndarray:
    pts = np.asarray(ring, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 2)
    if pts.shape[0] < 3:
        raise ValueError("polygon ring needs at least 3 vertices")
    return pts


def _rasterize_ring(pts: np.ndarray, h: int, w: int) -> np.ndarray:
    out = np.zeros((h, w), dtype=bool)
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    ymin = max(int(math.floor(y0.min() - 0.5)), 0)
    ymax = min(int(math.ceil(y0.max() - 0.5)) + 1, h)
    centers = np.arange(w) + 0.5
    for row in range(ymin, ymax):
        yc = row + 0.5
        crosses = (y0 > yc) != (y1 > yc)
        if not crosses.any():
            continue
        ax, ay, bx, by = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xs = np.sort(ax + (yc - ay) * (bx - ax) / (by - ay))
        # crossings strictly right of the center; odd count means inside
        right = xs.size - np.searchsorted(xs, centers, side="right")
        out[row] = right % 2 == 1
    return out


def rasterize(polys: Iterable[Sequence], h: int, w: int) -> np.ndarray:
    """Fill polygon rings on an ``h`` x ``w`` grid.

    A pixel is set when its center ``(x + 0.5, y + 0.5)`` lies inside a ring
    by the even-odd rule; the rings are then unioned. Each ring is either a
    flat ``[x0, y0, x1, y1, ...]`` list or a sequence of ``(x, y)`` pairs.
    """
    out = np.zeros((h, w), dtype=bool)
    for ring in polys:
        out |= _rasterize_ring(_ring_points(ring), h, w)
    return out


# ---------------------------------------------------------------------------
# box / overlap
# ---------------------------------------------------------------------------

def bbox_of(mask: np.ndarray) -> Optional[Box]:
    """Tight half-open box over the set pixels, or ``None`` for an empty mask."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def iou(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    """Return the exact ``(intersection, union)`` pixel counts."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a | b))


# ---------------------------------------------------------------------------
# reference-mask encoding helpers
# ---------------------------------------------------------------------------

def blackout_crop(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Black out pixels outside ``mask`` and crop to the mask's box.

    ``image`` is ``(H, W)`` or ``(H, W, C)``; the result keeps the channel axis.
    """
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} disagree")
    box = bbox_of(mask)
    if box is None:
        raise ValueError("empty reference mask")
    keep = mask if image.ndim == 2 else mask[..., None]
    out = np.where(keep, image, np.zeros_like(image))
    return out[box.y1:box.y2, box.x1:box.x2].copy()


def bbox_embedding(box: Box, image, spec: EmbeddingSpec = EmbeddingSpec()) -> np.ndarray:
    """Sinusoidal embedding of a box normalized by the image size.

    ``image`` needs ``width`` and ``height`` attributes. Output layout is four
    blocks of ``dim / 4`` values ordered x1, y1, x2, y2; inside a block the
    values alternate sin, cos over geometrically spaced frequencies
    ``2*pi / base**(2i / block)``.
    """
    if not Box(0, 0, image.width, image.height).contains(box):
        raise ValueError(f"box {box.as_list()} outside {image.width}x{image.height} image")
    block = spec.dim // 4
    i = np.arange(block // 2, dtype=np.float64)
    freqs = 2 * math.pi / spec.frequency_base ** (2 * i / block)
    coords = np.array([box.x1 / image.width, box.y1 / image.height,
                       box.x2 / image.width, box.y2 / image.height])
    angles = coords[:, None] * freqs[None, :]
    out = np.empty((4, block), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out.reshape(-1)


# ---------------------------------------------------------------------------
# segmentation losses
# ---------------------------------------------------------------------------

def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} disagree")
    return pred, gt


def dice_loss(pred, gt) -> float:
    pred, gt = _check_pair(pred, gt)
    if pred.size and (pred.min() < 0 or pred.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    g = gt.astype(np.float64)
    num = 2 * float((pred * g).sum()) + DICE_EPS
    den = float(pred.sum()) + float(g.sum()) + DICE_EPS
    return 1.0 - num / den


def ce_loss(pred, gt) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    pred, gt = _check_pair(pred, gt)
    p = np.clip(pred, CE_CLAMP, 1 - CE_CLAMP)
    terms = np.where(gt, -np.log(p), -np.log1p(-p))
    return float(terms.mean())


def seg_loss(pred, gt, cfg: LossConfig = LossConfig()) -> float:
    return ce_loss(pred, gt) + cfg.lam * dice_loss(pred, gt)


def mask_pair_loss(ref_pred, ref_gt, tgt_pred, tgt_gt, cfg: LossConfig = LossConfig()) -> float:
    """Summed segmentation loss of the reference-mask and target-mask queries."""
    return seg_loss(ref_pred, ref_gt, cfg) + seg_loss(tgt_pred, tgt_gt, cfg)
