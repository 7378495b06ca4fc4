"""Mask geometry: centroid, principal axes, push lines and grasp keypoints.

All coordinates are pixel coordinates with ``x`` the column and ``y`` the row;
pixel ``(x, y)`` has its centre at the integer point ``(x, y)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import IPerceptError


class MaskError(IPerceptError):
    pass


class EmptyMask(MaskError):
    pass


class DegenerateMask(MaskError):
    pass


class TooFewBoundaryPixels(MaskError):
    pass


class LineOffImage(MaskError):
    pass


class NoFeasiblePush(MaskError):
    pass


class PixelPoint(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Boolean raster, ``data[y, x]`` is True for object pixels."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=bool, copy=True)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"mask must be a non-empty 2-D grid, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_pixels(cls, width: int, height: int, pixels) -> BinaryMask:
        arr = np.zeros((height, width), dtype=bool)
        for x, y in pixels:
            arr[y, x] = True
        return cls(arr)

    def __getitem__(self, xy) -> bool:
        x, y = xy
        return bool(self.data[y, x])

    def contains(self, p: PixelPoint) -> bool:
        """True when the pixel nearest to ``p`` is an object pixel."""
        x = math.floor(p[0] + 0.5)
        y = math.floor(p[1] + 0.5)
        if 0 <= x < self.width and 0 <= y < self.height:
            return bool(self.data[y, x])
        return False

    def count(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return np.array_equal(self.data, other.data)

    def __hash__(self) -> int:
        return hash((self.data.shape, self.data.tobytes()))


@dataclass(frozen=True)
class PrincipalAxes:
    centroid: PixelPoint
    axis1: tuple[float, float]
    axis2: tuple[float, float]
    eigenvalue1: float
    eigenvalue2: float


class LineKind(enum.Enum):
    PRINCIPAL = "Principal"
    EDGE = "Edge"


@dataclass(frozen=True)
class PushLine:
    label_index: int
    pre_contact: PixelPoint
    post_contact: PixelPoint
    kind: LineKind

    @property
    def direction(self) -> tuple[float, float]:
        dx = self.post_contact.x - self.pre_contact.x
        dy = self.post_contact.y - self.pre_contact.y
        n = math.hypot(dx, dy)
        return (dx / n, dy / n)


@dataclass(frozen=True)
class KeypointSet:
    boundary_points: tuple[PixelPoint, ...]
    centroid_point: PixelPoint

    @property
    def labelled(self) -> list[tuple[str, PixelPoint]]:
        pts = list(self.boundary_points) + [self.centroid_point]
        return [(f"P{i + 1}", p) for i, p in enumerate(pts)]

    def point(self, label: str) -> PixelPoint:
        for name, p in self.labelled:
            if name == label.upper():
                return p
        raise KeyError(label)


def _object_coords(mask: BinaryMask) -> np.ndarray:
    ys, xs = np.nonzero(mask.data)
    if xs.size == 0:
        raise EmptyMask("mask has no object pixels")
    return np.column_stack([xs, ys]).astype(np.int64)


def compute_centroid(mask: BinaryMask) -> PixelPoint:
    coords = _object_coords(mask)
    n = coords.shape[0]
    sx, sy = coords.sum(axis=0)
    return PixelPoint(float(sx) / n, float(sy) / n)


def compute_principal_axes(mask: BinaryMask) -> PrincipalAxes:
    """Eigen-decomposition of the population covariance of object pixels.

    ``axis1`` belongs to the larger eigenvalue and is sign-normalised so that
    ``axis1.x > 0`` (or ``axis1.x == 0`` and ``axis1.y > 0``); ``axis2`` is
    ``axis1`` rotated by +90 degrees. Isotropic masks get ``axis1 = (1, 0)``.

    Raises
    ------
    EmptyMask
        No object pixels.
    DegenerateMask
        Both eigenvalues are below 1e-12 (a single pixel).
    """
    coords = _object_coords(mask).astype(np.float64)
    centroid = compute_centroid(mask)
    d = coords - np.array(centroid)
    n = coords.shape[0]
    a = float(np.dot(d[:, 0], d[:, 0]) / n)
    c = float(np.dot(d[:, 1], d[:, 1]) / n)
    b = float(np.dot(d[:, 0], d[:, 1]) / n)

    mean = 0.5 * (a + c)
    radius = math.hypot(0.5 * (a - c), b)
    lam1 = mean + radius
    lam2 = max(mean - radius, 0.0)
    if lam1 < 1e-12 and lam2 < 1e-12:
        raise DegenerateMask("covariance vanishes; use image axes")

    if radius <= 1e-9 * (a + c):
        vx, vy = 1.0, 0.0
    elif abs(b) <= 1e-15 * (a + c):
        vx, vy = (1.0, 0.0) if a >= c else (0.0, 1.0)
    else:
        # two algebraically equivalent forms; use the better conditioned one
        if a >= c:
            vx, vy = lam1 - c, b
        else:
            vx, vy = b, lam1 - a
        norm = math.hypot(vx, vy)
        vx, vy = vx / norm, vy / norm
    if vx < 0 or (vx == 0 and vy < 0):
        vx, vy = -vx, -vy
    # avoid signed zeros leaking into serialized output
    vx, vy = vx + 0.0, vy + 0.0
    return PrincipalAxes(
        centroid=centroid,
        axis1=(vx, vy),
        axis2=(-vy + 0.0, vx),
        eigenvalue1=lam1,
        eigenvalue2=lam2,
    )


def extract_boundary(mask: BinaryMask) -> list[PixelPoint]:
    """Object pixels with at least one non-object 4-neighbour, row-major order.

    Pixels on the image border always count as boundary.
    """
    m = mask.data
    if not m.any():
        raise EmptyMask("mask has no object pixels")
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    ys, xs = np.nonzero(m & ~interior)
    return [PixelPoint(float(x), float(y)) for x, y in zip(xs, ys)]


def farthest_point_order(points: np.ndarray, seed_index: int, count: int) -> list[int]:
    """Greedy farthest-point sampling on integer points.

    Ties on the min-distance are resolved toward the first index, which is the
    lowest row then lowest column when ``points`` is in row-major order.
    """
    chosen = [seed_index]
    diff = points - points[seed_index]
    mind = (diff * diff).sum(axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        diff = points - points[nxt]
        mind = np.minimum(mind, (diff * diff).sum(axis=1))
    return chosen


def generate_grasp_keypoints(mask: BinaryMask) -> KeypointSet:
    """Four boundary keypoints by FPS plus the centroid as ``P5``."""
    boundary = extract_boundary(mask)
    if len(boundary) < 4:
        raise TooFewBoundaryPixels(f"need 4 boundary pixels, mask has {len(boundary)}")
    pts = np.array(boundary, dtype=np.int64)
    coords = _object_coords(mask)
    n = coords.shape[0]
    sx, sy = coords.sum(axis=0)
    # squared distance to the centroid scaled by n^2 stays integral, so the
    # farthest-point seed tie-break is exact
    seed_d = (n * pts[:, 0] - sx) ** 2 + (n * pts[:, 1] - sy) ** 2
    seed = int(np.argmax(seed_d))
    order = farthest_point_order(pts, seed, 4)
    chosen = tuple(boundary[i] for i in order)
    return KeypointSet(boundary_points=chosen, centroid_point=compute_centroid(mask))


# -- push lines -------------------------------------------------------------

_MARCH_STEP = 0.1


def _runs_along(mask: BinaryMask, anchor: np.ndarray, direction: np.ndarray):
    """Object runs met when marching from ``anchor`` along ``direction``.

    Returns a list of ``(t_first, t_last)`` pairs where each ``t`` is the
    projection of a traversed pixel centre on the ray.
    """
    h, w = mask.height, mask.width
    # distance until the ray leaves the pixel-area rectangle
    tmax = np.inf
    for k, (lo, hi) in enumerate(((-0.5, w - 0.5), (-0.5, h - 0.5))):
        dk = direction[k]
        if abs(dk) > 1e-12:
            t_hi = ((hi if dk > 0 else lo) - anchor[k]) / dk
            tmax = min(tmax, t_hi)
    tmax = max(tmax, 0.0)
    ts = np.arange(0.0, tmax + _MARCH_STEP, _MARCH_STEP)
    pts = anchor[None, :] + ts[:, None] * direction[None, :]
    cells = np.floor(pts + 0.5).astype(np.int64)
    ok = (cells[:, 0] >= 0) & (cells[:, 0] < w) & (cells[:, 1] >= 0) & (cells[:, 1] < h)
    cells = cells[ok]
    if cells.shape[0] == 0:
        return []
    keep = np.ones(cells.shape[0], dtype=bool)
    keep[1:] = np.any(cells[1:] != cells[:-1], axis=1)
    cells = cells[keep]
    inside = mask.data[cells[:, 1], cells[:, 0]]
    tproj = (cells - anchor[None, :]) @ direction
    runs = []
    start = None
    for i, flag in enumerate(inside):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((float(max(tproj[start], 0.0)), float(max(tproj[i - 1], 0.0))))
            start = None
    if start is not None:
        runs.append((float(max(tproj[start], 0.0)), float(max(tproj[len(inside) - 1], 0.0))))
    return runs


def _outside_distance(mask, anchor, direction, runs, offset):
    """Distance along ``direction`` of the first exit plus ``offset``.

    If that point falls back inside the mask (concave shapes), skip to the
    exit of the run it landed in and retry.
    """
    t = (runs[0][1] if runs else 0.0) + offset
    for _ in range(len(runs) + 2):
        p = anchor + t * direction
        if not mask.contains(PixelPoint(p[0], p[1])):
            return t
        nxt = next((r for r in runs if r[1] + 0.75 >= t), None)
        if nxt is None:
            return t
        t = max(nxt[1], t) + offset
    return t


def _in_image(p: np.ndarray, width: int, height: int) -> bool:
    eps = 1e-9
    return -eps <= p[0] <= width - 1 + eps and -eps <= p[1] <= height - 1 + eps


def _orient_line(mask, anchor, axis, clearance, displacement):
    direction = np.asarray(axis, dtype=np.float64)
    runs_pos = _runs_along(mask, anchor, direction)
    runs_neg = _runs_along(mask, anchor, -direction)
    if not runs_pos and not runs_neg:
        return None
    e_pos = runs_pos[0][1] if runs_pos else 0.0
    e_neg = runs_neg[0][1] if runs_neg else 0.0
    disp = displacement if displacement is not None else max(e_pos + e_neg, 1.0)
    center = np.array([(mask.width - 1) / 2.0, (mask.height - 1) / 2.0])

    candidates = []
    for sign in (1.0, -1.0):
        d = sign * direction
        fwd_runs, back_runs = (runs_pos, runs_neg) if sign > 0 else (runs_neg, runs_pos)
        e_fwd = fwd_runs[0][1] if fwd_runs else 0.0
        post = anchor + (e_fwd + disp) * d
        t_pre = _outside_distance(mask, anchor, -d, back_runs, clearance)
        pre = anchor - t_pre * d
        score = np.linalg.norm(post - center) - np.linalg.norm(pre - center)
        prefer = d[0] > 0 or (d[0] == 0 and d[1] > 0)
        candidates.append((score, 0 if prefer else 1, pre, post))
    candidates.sort(key=lambda c: (round(c[0], 9), c[1]))
    _, _, pre, post = candidates[0]
    return pre, post


def _boundary_normal(mask: BinaryMask, kp: PixelPoint, centroid: PixelPoint) -> np.ndarray:
    x0, y0 = int(kp.x), int(kp.y)
    acc = np.zeros(2)
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            x, y = x0 + dx, y0 + dy
            if 0 <= x < mask.width and 0 <= y < mask.height and mask.data[y, x]:
                acc += (dx, dy)
    n = -acc
    if np.hypot(*n) < 1e-12:
        n = np.array([kp.x - centroid.x, kp.y - centroid.y])
    if np.hypot(*n) < 1e-12:
        n = np.array([1.0, 0.0])
    return n / np.hypot(*n)


def generate_push_lines(
    mask: BinaryMask,
    clearance: float = 10.0,
    displacement: float | None = None,
) -> list[PushLine]:
    """Two principal push lines through the centroid and four edge lines.

    ``displacement=None`` uses the object's extent along each line. Lines whose
    pre- or post-contact point leaves the image are dropped and the survivors
    re-indexed from 1.

    Raises
    ------
    EmptyMask
    NoFeasiblePush
        Fewer than two lines survive.
    """
    if clearance <= 0 or (displacement is not None and displacement <= 0):
        raise ValueError("clearance and displacement must be positive")
    centroid = compute_centroid(mask)
    try:
        axes = compute_principal_axes(mask)
        a1, a2 = axes.axis1, axes.axis2
    except DegenerateMask:
        a1, a2 = (1.0, 0.0), (0.0, 1.0)

    specs: list[tuple[PixelPoint, tuple[float, float], LineKind]] = [
        (centroid, a1, LineKind.PRINCIPAL),
        (centroid, a2, LineKind.PRINCIPAL),
    ]
    try:
        kps = generate_grasp_keypoints(mask)
    except TooFewBoundaryPixels:
        kps = None
    if kps is not None:
        for kp in kps.boundary_points:
            n = _boundary_normal(mask, kp, centroid)
            d1 = abs(a1[0] * n[0] + a1[1] * n[1])
            d2 = abs(a2[0] * n[0] + a2[1] * n[1])
            if abs(d1 - d2) <= 1e-9:
                # corner-like normals: fall back to the radial direction
                r = np.array([kp.x - centroid.x, kp.y - centroid.y])
                d1 = abs(a1[0] * r[0] + a1[1] * r[1])
                d2 = abs(a2[0] * r[0] + a2[1] * r[1])
            axis = a2 if d2 < d1 - 1e-9 else a1
            specs.append((kp, axis, LineKind.EDGE))

    lines: list[PushLine] = []
    for anchor, axis, kind in specs:
        res = _orient_line(mask, np.array(anchor, dtype=np.float64), axis, clearance, displacement)
        if res is None:
            continue
        pre, post = res
        if not (_in_image(pre, mask.width, mask.height) and _in_image(post, mask.width, mask.height)):
            continue
        lines.append(
            PushLine(
                label_index=len(lines) + 1,
                pre_contact=PixelPoint(float(pre[0]), float(pre[1])),
                post_contact=PixelPoint(float(post[0]), float(post[1])),
                kind=kind,
            )
        )
    if len(lines) < 2:
        raise NoFeasiblePush(f"only {len(lines)} push line(s) fit inside the image")
    return lines


def segment_hits_mask(mask: BinaryMask, a: PixelPoint, b: PixelPoint) -> bool:
    """True when the segment a-b touches the unit square of any object pixel.

    Exact Liang-Barsky clipping against every object pixel in the segment's
    bounding box, so grazing a pixel corner still counts.
    """
    x_lo = max(math.floor(min(a.x, b.x) - 0.5), 0)
    x_hi = min(math.ceil(max(a.x, b.x) + 0.5), mask.width - 1)
    y_lo = max(math.floor(min(a.y, b.y) - 0.5), 0)
    y_hi = min(math.ceil(max(a.y, b.y) + 0.5), mask.height - 1)
    if x_lo > x_hi or y_lo > y_hi:
        return False
    ys, xs = np.nonzero(mask.data[y_lo : y_hi + 1, x_lo : x_hi + 1])
    if xs.size == 0:
        return False
    px, py = xs + x_lo, ys + y_lo
    t0 = np.zeros(px.shape)
    t1 = np.ones(px.shape)
    ok = np.ones(px.shape, dtype=bool)
    for start, delta, centre in ((a.x, b.x - a.x, px), (a.y, b.y - a.y, py)):
        lo, hi = centre - 0.5 - start, centre + 0.5 - start
        if delta == 0.0:
            ok &= (lo <= 0.0) & (hi >= 0.0)
            continue
        ta, tb = lo / delta, hi / delta
        t0 = np.maximum(t0, np.minimum(ta, tb))
        t1 = np.minimum(t1, np.maximum(ta, tb))
    return bool(np.any(ok & (t0 <= t1)))


# -- file formats -----------------------------------------------------------


def load_mask(path: str | Path) -> BinaryMask:
    """Read a PNG (nonzero = object) or a ``.mask`` text grid."""
    path = Path(path)
    if path.suffix == ".mask":
        lines = path.read_text(encoding="utf-8").splitlines()
        w, h = (int(v) for v in lines[0].split())
        rows = [ln.strip() for ln in lines[1 : 1 + h]]
        if len(rows) != h or any(len(r) != w for r in rows):
            raise ValueError(f"{path}: grid does not match header {w}x{h}")
        return BinaryMask(np.array([[ch == "1" for ch in r] for r in rows], dtype=bool))
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return BinaryMask(arr > 0)


def save_mask(mask: BinaryMask, path: str | Path) -> None:
    path = Path(path)
    if path.suffix == ".mask":
        rows = ["".join("1" if v else "0" for v in row) for row in mask.data]
        path.write_text(f"{mask.width} {mask.height}\n" + "\n".join(rows) + "\n", encoding="utf-8")
        return
    from PIL import Image

    Image.fromarray((mask.data * 255).astype(np.uint8), mode="L").save(path)
