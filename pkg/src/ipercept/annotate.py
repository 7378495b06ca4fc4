"""Enhanced-observation rendering: grid, push-line and keypoint overlays."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import IPerceptError
from .geometry import KeypointSet, PixelPoint, PushLine
from .imaging import RgbImage, text_bitmap
from .projection import CameraIntrinsics, VirtualGrid

GRID_COLOR = (255, 255, 255)
PUSH_COLOR = (0, 255, 255)
KEYPOINT_COLOR = (255, 0, 255)
LAYER_COLORS = ((0, 0, 255), (0, 0, 0), (0, 160, 0))
LINE_WIDTH = 2
LABEL_HEIGHT = 12
LABEL_PAD = 2
COLLISION_STEP = 14


class AnnotationError(IPerceptError):
    pass


class GridNotVisible(AnnotationError):
    pass


class NoLines(AnnotationError):
    pass


class BadScale(AnnotationError):
    pass


class OverlayKind(enum.Enum):
    GRID = "Grid"
    PUSH_LINES = "PushLines"
    KEYPOINTS = "Keypoints"
    COMPOSITE = "Composite"


@dataclass(frozen=True)
class LegendEntry:
    label: str
    position: PixelPoint  # top-left of the drawn label chip
    target: PixelPoint  # the annotated point


@dataclass(frozen=True, eq=False)
class AnnotatedImage:
    image: RgbImage
    base: RgbImage
    overlay_kind: OverlayKind
    legend: tuple[LegendEntry, ...]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnotatedImage):
            return NotImplemented
        return (self.image, self.base, self.overlay_kind, self.legend) == (
            other.image,
            other.base,
            other.overlay_kind,
            other.legend,
        )

    __hash__ = None

    def labels(self) -> list[str]:
        return [e.label for e in self.legend]

    def target(self, label: str) -> PixelPoint:
        for e in self.legend:
            if e.label == label:
                return e.target
        raise KeyError(label)


class _Canvas:
    def __init__(self, src: RgbImage | AnnotatedImage, kind: OverlayKind):
        if isinstance(src, AnnotatedImage):
            self.base = src.base
            self.legend = list(src.legend)
            self.kind = OverlayKind.COMPOSITE
            start = src.image
        else:
            self.base = src
            self.legend = []
            self.kind = kind
            start = src
        self.im = Image.fromarray(np.array(start.pixels), mode="RGB")
        self.draw = ImageDraw.Draw(self.im)
        self.w, self.h = start.width, start.height
        self._boxes = [self._box_of(e) for e in self.legend]

    def _box_of(self, e: LegendEntry):
        return (e.position.x, e.position.y, e.position.x + self._chip_w(e.label), e.position.y + LABEL_HEIGHT)

    @staticmethod
    def _chip_w(text: str) -> int:
        return text_bitmap(text).shape[1] + 2 * LABEL_PAD - 1

    def _overlaps(self, box) -> bool:
        x0, y0, x1, y1 = box
        return any(x0 < b[2] and b[0] < x1 and y0 < b[3] and b[1] < y1 for b in self._boxes)

    def _clamp(self, x: int, y: int, cw: int) -> tuple[int, int]:
        return min(max(x, 0), max(self.w - cw, 0)), min(max(y, 0), max(self.h - LABEL_HEIGHT, 0))

    def label(self, text: str, target: PixelPoint) -> None:
        if any(e.label == text for e in self.legend):
            raise AnnotationError(f"duplicate label {text!r}")
        cw = self._chip_w(text)
        x, y = self._clamp(math.floor(target.x + 0.5) + 3, math.floor(target.y + 0.5) + 3, cw)
        placed = None
        for sign in (1, -1):
            for k in range(0, max(self.h // COLLISION_STEP, 1) + 1):
                cx, cy = self._clamp(x, y + sign * k * COLLISION_STEP, cw)
                if not self._overlaps((cx, cy, cx + cw, cy + LABEL_HEIGHT)):
                    placed = (cx, cy)
                    break
            if placed:
                break
        if placed is None:
            placed = (x, y)
        cx, cy = placed
        self.draw.rectangle([cx, cy, cx + cw - 1, cy + LABEL_HEIGHT - 1], fill=(255, 255, 255))
        bmp = text_bitmap(text)
        arr = np.asarray(self.im).copy()
        ty, tx = cy + LABEL_PAD, cx + LABEL_PAD
        sub = arr[ty : ty + bmp.shape[0], tx : tx + bmp.shape[1]]
        sub[bmp[: sub.shape[0], : sub.shape[1]]] = (0, 0, 0)
        self.im = Image.fromarray(arr, mode="RGB")
        self.draw = ImageDraw.Draw(self.im)
        self._boxes.append((cx, cy, cx + cw, cy + LABEL_HEIGHT))
        self.legend.append(LegendEntry(text, PixelPoint(float(cx), float(cy)), target))

    def line(self, a: PixelPoint, b: PixelPoint, color, width: int = LINE_WIDTH) -> None:
        self.draw.line([(a.x, a.y), (b.x, b.y)], fill=color, width=width)

    def arrow(self, a: PixelPoint, b: PixelPoint, color) -> None:
        self.line(a, b, color)
        dx, dy = b.x - a.x, b.y - a.y
        n = math.hypot(dx, dy)
        if n < 1e-9:
            return
        ux, uy = dx / n, dy / n
        size = 7.0
        left = (b.x - size * ux - 0.5 * size * uy, b.y - size * uy + 0.5 * size * ux)
        right = (b.x - size * ux + 0.5 * size * uy, b.y - size * uy - 0.5 * size * ux)
        self.draw.polygon([(b.x, b.y), left, right], fill=color)

    def dot(self, p: PixelPoint, color, r: int = 3) -> None:
        self.draw.ellipse([p.x - r, p.y - r, p.x + r, p.y + r], fill=color)

    def finish(self) -> AnnotatedImage:
        return AnnotatedImage(RgbImage(np.asarray(self.im)), self.base, self.kind, tuple(self.legend))


def _fmt(v: float) -> str:
    return f"{v + 0.0:.1f}"


def overlay_grid(
    img: RgbImage | AnnotatedImage,
    grid: VirtualGrid,
    intr: CameraIntrinsics,
    layers: Sequence[float] | None = None,
) -> AnnotatedImage:
    """Project the grid (anchored in the camera frame) and label vertices ``[x; y]``.

    ``layers`` draws extra copies of the grid lifted along the marker normal,
    colour-coded per layer, for the camera-cube prompt; labels go on the
    lowest layer.
    """
    canvas = _Canvas(img, OverlayKind.GRID)
    heights = list(layers) if layers else [0.0]
    idx = grid.vertex_indices()
    visible_total = 0
    projected_layers = []
    for h in heights:
        pts = {}
        for ij in idx:
            v = grid.vertex_marker(ij) + np.array([0.0, 0.0, h])
            pc = grid.anchor.apply(v)
            if pc[2] <= 1e-6:
                continue
            u = intr.fx * pc[0] / pc[2] + intr.cx
            w = intr.fy * pc[1] / pc[2] + intr.cy
            if abs(u) > 1e5 or abs(w) > 1e5:
                continue
            pts[ij] = PixelPoint(float(u), float(w))
        projected_layers.append(pts)
    base_pts = projected_layers[0]
    visible_total = sum(1 for p in base_pts.values() if 0 <= p.x <= intr.width - 1 and 0 <= p.y <= intr.height - 1)
    if visible_total < 4:
        raise GridNotVisible(f"only {visible_total} grid vertices project inside the image")
    for li, pts in enumerate(projected_layers):
        color = GRID_COLOR if layers is None else LAYER_COLORS[li % len(LAYER_COLORS)]
        for (i, j), p in pts.items():
            for nb in ((i + 1, j), (i, j + 1)):
                if nb in pts:
                    canvas.line(p, pts[nb], color)
    for ij in idx:
        p = base_pts.get(ij)
        if p is None or not (0 <= p.x <= intr.width - 1 and 0 <= p.y <= intr.height - 1):
            continue
        gx, gy = grid.vertex_label(ij)
        canvas.label(f"[{_fmt(gx)}; {_fmt(gy)}]", p)
    return canvas.finish()


def overlay_push_lines(img: RgbImage | AnnotatedImage, lines: Iterable[PushLine]) -> AnnotatedImage:
    lines = list(lines)
    if not lines:
        raise NoLines("no push lines to draw")
    canvas = _Canvas(img, OverlayKind.PUSH_LINES)
    for ln in lines:
        canvas.arrow(ln.pre_contact, ln.post_contact, PUSH_COLOR)
    for ln in lines:
        canvas.label(f"P{ln.label_index}", ln.pre_contact)
        canvas.label(f"D{ln.label_index}", ln.post_contact)
    return canvas.finish()


def overlay_keypoints(img: RgbImage | AnnotatedImage, kps: KeypointSet) -> AnnotatedImage:
    canvas = _Canvas(img, OverlayKind.KEYPOINTS)
    for _, p in kps.labelled:
        canvas.dot(p, KEYPOINT_COLOR)
    for name, p in kps.labelled:
        canvas.label(name, p)
    return canvas.finish()


@dataclass(frozen=True)
class CropWindow:
    """Source-frame window of a zoom crop; ``left``/``top`` are pixel-edge coordinates."""

    left: float
    top: float
    width: float
    height: float
    scale: float

    def to_source(self, p: PixelPoint) -> PixelPoint:
        return PixelPoint(self.left + (p.x + 0.5) / self.scale, self.top + (p.y + 0.5) / self.scale)

    def from_source(self, p: PixelPoint) -> PixelPoint:
        return PixelPoint((p.x - self.left) * self.scale - 0.5, (p.y - self.top) * self.scale - 0.5)


def zoom_crop(img: RgbImage, center: PixelPoint, scale: float) -> tuple[RgbImage, CropWindow]:
    """Crop ``1/scale`` of the frame around ``center`` and upscale it back (nearest)."""
    if not scale >= 1:
        raise BadScale(f"zoom scale must be >= 1, got {scale}")
    w, h = img.width, img.height
    if not (0 <= center.x <= w - 1 and 0 <= center.y <= h - 1):
        raise AnnotationError(f"zoom centre {tuple(center)} outside the image")
    cw, ch = w / scale, h / scale
    left = min(max(center.x - cw / 2, -0.5), w - 0.5 - cw)
    top = min(max(center.y - ch / 2, -0.5), h - 0.5 - ch)
    window = CropWindow(left, top, cw, ch, scale)
    us = np.arange(w)
    vs = np.arange(h)
    sx = np.clip(np.floor(left + (us + 0.5) / scale + 0.5).astype(np.int64), 0, w - 1)
    sy = np.clip(np.floor(top + (vs + 0.5) / scale + 0.5).astype(np.int64), 0, h - 1)
    out = img.pixels[sy[:, None], sx[None, :]]
    return RgbImage(out), window
