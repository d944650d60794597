"""Occupancy masks, the pixel/world transform, and the outline-point signed
distance field used as the obstacle-avoidance predicate.

Pixel indices are ``(u, v)``: ``u`` is the column, ``v`` counts rows from the
bottom of the image, so the world frame has its origin at the image's
bottom-left corner with x right and y up.  ``grid`` arrays keep image order
(row 0 at the top).
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .stl.predicates import PredicateBinding

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class MaskError(ValueError):
    pass


class UnsupportedMaskFormat(MaskError):
    pass


@dataclass(frozen=True, eq=False)
class OccupancyMask:
    """Binary raster, 1 = obstacle, with a world extent ``(m, n)`` in meters."""

    grid: np.ndarray
    extent: tuple = (1.0, 1.0)

    def __post_init__(self):
        g = np.asarray(self.grid).astype(bool)
        if g.ndim != 2 or g.size == 0:
            raise MaskError(f"mask must be a non-empty 2-D array, got shape {g.shape}")
        g.flags.writeable = False
        object.__setattr__(self, "grid", g)
        m, n = (float(e) for e in self.extent)
        if not (m > 0 and n > 0):
            raise MaskError("extent must be positive")
        object.__setattr__(self, "extent", (m, n))

    @property
    def H(self) -> int:
        return self.grid.shape[0]

    @property
    def W(self) -> int:
        return self.grid.shape[1]

    @property
    def n_obstacle(self) -> int:
        return int(self.grid.sum())

    def occupied(self, u, v) -> np.ndarray:
        """Occupancy at pixel indices; out-of-range indices count as obstacle."""
        u = np.asarray(u)
        v = np.asarray(v)
        inside = (u >= 0) & (u < self.W) & (v >= 0) & (v < self.H)
        uc = np.clip(u, 0, self.W - 1)
        vc = np.clip(v, 0, self.H - 1)
        return np.where(inside, self.grid[self.H - 1 - vc, uc], True)

    def __eq__(self, other):
        return (isinstance(other, OccupancyMask) and self.extent == other.extent
                and np.array_equal(self.grid, other.grid))

    __hash__ = None


@dataclass(frozen=True)
class WorldTransform:
    """world = offset + scale * pixel_index, per axis."""

    sx: float
    sy: float
    ox: float = 0.0
    oy: float = 0.0

    @classmethod
    def for_mask(cls, mask: OccupancyMask) -> "WorldTransform":
        m, n = mask.extent
        sx, sy = m / mask.W, n / mask.H
        return cls(sx, sy, 0.5 * sx, 0.5 * sy)

    @classmethod
    def identity(cls) -> "WorldTransform":
        return cls(1.0, 1.0, 0.0, 0.0)

    @property
    def pitch(self) -> float:
        return min(self.sx, self.sy)

    def to_world(self, pix) -> np.ndarray:
        pix = np.asarray(pix, dtype=float)
        return np.stack([self.ox + self.sx * pix[..., 0], self.oy + self.sy * pix[..., 1]], axis=-1)

    def to_pixel(self, g) -> np.ndarray:
        """Nearest pixel index (integer) for world points."""
        g = np.asarray(g, dtype=float)
        u = np.rint((g[..., 0] - self.ox) / self.sx)
        v = np.rint((g[..., 1] - self.oy) / self.sy)
        return np.stack([u, v], axis=-1).astype(np.int64)


def outline_pixels(mask: OccupancyMask) -> np.ndarray:
    """Obstacle pixels with a free 4-neighbour or lying on the image border,
    as an (N, 2) array of (u, v) indices."""
    g = mask.grid
    padded = np.pad(g, 1, constant_values=False)
    free_nb = (~padded[:-2, 1:-1]) | (~padded[2:, 1:-1]) | (~padded[1:-1, :-2]) | (~padded[1:-1, 2:])
    # padding with False makes border pixels see a "free" neighbour
    rows, cols = np.nonzero(g & free_nb)
    return np.stack([cols, mask.H - 1 - rows], axis=-1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class OutlineIndex:
    """KD-tree over outline pixels.  The tree is built on the world positions
    of the pixel centres so nearest-neighbour queries are exact in meters
    even for non-square pixels."""

    pixels: np.ndarray
    points: np.ndarray
    tree: cKDTree | None = field(repr=False)

    @property
    def empty(self) -> bool:
        return len(self.pixels) == 0

    def nearest(self, g) -> np.ndarray:
        """Index into ``points`` of an exact nearest outline point per query."""
        g = np.asarray(g, dtype=float)
        _, idx = self.tree.query(g.reshape(-1, 2))
        return np.asarray(idx).reshape(g.shape[:-1])


def build_index(mask: OccupancyMask, transform: WorldTransform | None = None) -> OutlineIndex:
    transform = transform or WorldTransform.for_mask(mask)
    pix = outline_pixels(mask)
    pts = transform.to_world(pix) if len(pix) else np.zeros((0, 2))
    tree = cKDTree(pts) if len(pix) else None
    return OutlineIndex(pix, pts, tree)


def _sign(g: np.ndarray, mask: OccupancyMask, transform: WorldTransform) -> np.ndarray:
    pix = transform.to_pixel(g)
    return np.where(mask.occupied(pix[..., 0], pix[..., 1]), -1.0, 1.0)


def _nearest_offset(g, index: OutlineIndex):
    p = index.points[index.nearest(g)]
    dx = g[..., 0] - p[..., 0]
    dy = g[..., 1] - p[..., 1]
    return dx, dy, np.sqrt(dx * dx + dy * dy)


def sdf(g, mask: OccupancyMask, index: OutlineIndex, transform: WorldTransform) -> np.ndarray:
    """Signed distance (meters) to the nearest outline pixel centre.

    Negative when ``g`` maps to an obstacle pixel or falls off the image;
    exactly 0.0 on an outline centre.  With no obstacles at all the value is
    +inf on the map and -inf off it.
    """
    g = np.asarray(g, dtype=float)
    sign = _sign(g, mask, transform)
    if index.empty:
        return sign * np.inf
    _, _, d = _nearest_offset(g, index)
    out = np.where(d == 0.0, 0.0, sign * d)
    return out if out.ndim else float(out)


def sdf_grad(g, mask: OccupancyMask, index: OutlineIndex, transform: WorldTransform) -> np.ndarray:
    """Gradient of :func:`sdf`; the zero vector where the distance is zero."""
    g = np.asarray(g, dtype=float)
    if index.empty:
        return np.zeros_like(g)
    sign = _sign(g, mask, transform)
    dx, dy, d = _nearest_offset(g, index)
    safe = np.where(d > 0, d, 1.0)
    scale = np.where(d > 0, sign / safe, 0.0)
    return np.stack([dx * scale, dy * scale], axis=-1)


class SignedDistanceField:
    """Mask, transform and outline index bundled for repeated queries."""

    def __init__(self, mask: OccupancyMask, transform: WorldTransform | None = None):
        self.mask = mask
        self.transform = transform or WorldTransform.for_mask(mask)
        self.index = build_index(mask, self.transform)

    def __call__(self, g):
        return sdf(g, self.mask, self.index, self.transform)

    def grad(self, g):
        return sdf_grad(g, self.mask, self.index, self.transform)

    def value_and_grad(self, g):
        g = np.asarray(g, dtype=float)
        if self.index.empty:
            return _sign(g, self.mask, self.transform) * np.inf, np.zeros_like(g)
        sign = _sign(g, self.mask, self.transform)
        dx, dy, d = _nearest_offset(g, self.index)
        val = np.where(d == 0.0, 0.0, sign * d)
        safe = np.where(d > 0, d, 1.0)
        scale = np.where(d > 0, sign / safe, 0.0)
        return val, np.stack([dx * scale, dy * scale], axis=-1)

    def soft(self, points) -> ad.Var:
        """SDF of a Var of points, attached to the autodiff tape."""
        points = ad.as_var(points)
        val, grad = self.value_and_grad(points.value)
        return ad.pointwise(points, val, grad)

    def occupied_world(self, g) -> np.ndarray:
        pix = self.transform.to_pixel(g)
        return self.mask.occupied(pix[..., 0], pix[..., 1])


def avoid_predicate(mask: OccupancyMask, index: OutlineIndex | None = None,
                    transform: WorldTransform | None = None,
                    name: str = "avoid_map") -> PredicateBinding:
    """Predicate whose robustness is the SDF at each waypoint; under
    ``G[0,T]`` it is positive iff every waypoint is collision-free."""
    transform = transform or WorldTransform.for_mask(mask)
    index = index or build_index(mask, transform)
    field_ = SignedDistanceField.__new__(SignedDistanceField)
    field_.mask, field_.transform, field_.index = mask, transform, index
    return PredicateBinding(name, lambda p, t: field_(p), lambda p, t: field_.soft(p))


def batched_avoid_predicate(fields: list[SignedDistanceField], name: str = "avoid_map") -> PredicateBinding:
    """Avoid predicate over a batch of maps: leading axis i of the points is
    evaluated against ``fields[i]``."""

    def fn(points, t):
        points = np.asarray(points, dtype=float)
        return np.stack([f(points[i]) for i, f in enumerate(fields)])

    def soft_fn(points, t):
        points = ad.as_var(points)
        vals, grads = zip(*(f.value_and_grad(points.value[i]) for i, f in enumerate(fields)))
        return ad.pointwise(points, np.stack(vals), np.stack(grads))

    return PredicateBinding(name, fn, soft_fn)


# -- file I/O -----------------------------------------------------------------

def _read_pgm(data: bytes) -> np.ndarray:
    pos = 2
    fields_: list[int] = []
    while len(fields_) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise MaskError("malformed PGM header")
        fields_.append(int(data[start:pos]))
    pos += 1  # single whitespace before raster
    w, h, maxval = fields_
    if w == 0 or h == 0:
        raise MaskError("zero-size image")
    if maxval != 255:
        raise UnsupportedMaskFormat(f"only 8-bit PGM is supported (maxval {maxval})")
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise MaskError("truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def _read_png(data: bytes) -> np.ndarray:
    from PIL import Image

    with Image.open(io.BytesIO(data)) as im:
        if im.mode != "L":
            raise UnsupportedMaskFormat(f"PNG must be 8-bit grayscale, got mode {im.mode}")
        arr = np.asarray(im, dtype=np.uint8)
    if arr.size == 0:
        raise MaskError("zero-size image")
    return arr


def load_mask(path, extent) -> OccupancyMask:
    """Read a binary P5 PGM or 8-bit grayscale PNG; values < 128 are obstacles."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise MaskError(f"cannot read mask {path}: {exc}") from exc
    if data.startswith(b"P5"):
        pixels = _read_pgm(data)
    elif data.startswith(PNG_SIGNATURE):
        pixels = _read_png(data)
    else:
        raise UnsupportedMaskFormat(f"{path}: not a binary PGM (P5) or PNG file")
    return OccupancyMask(pixels < 128, tuple(extent))


def mask_to_pgm(mask: OccupancyMask) -> bytes:
    raster = np.where(mask.grid, 0, 255).astype(np.uint8)
    header = f"P5\n{mask.W} {mask.H}\n255\n".encode("ascii")
    return header + raster.tobytes()


def save_mask(path, mask: OccupancyMask) -> None:
    path = os.fspath(path)
    if path.lower().endswith(".png"):
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.where(mask.grid, 0, 255).astype(np.uint8), mode="L").save(buf, "PNG")
        ad.atomic_write_bytes(path, buf.getvalue())
    else:
        ad.atomic_write_bytes(path, mask_to_pgm(mask))


def downsample(mask: OccupancyMask, size: int) -> np.ndarray:
    """Occupancy fraction on a ``size`` x ``size`` grid (image order)."""
    g = mask.grid.astype(float)
    H, W = g.shape
    rows = (np.arange(H) * size) // H
    cols = (np.arange(W) * size) // W
    out = np.zeros((size, size))
    count = np.zeros((size, size))
    np.add.at(out, (rows[:, None], cols[None, :]), g)
    np.add.at(count, (rows[:, None], cols[None, :]), 1.0)
    return np.divide(out, count, out=np.zeros_like(out), where=count > 0)
