"""Convex polygon helpers for footprints in the table plane (metres, CCW)."""

from __future__ import annotations

import math

import numpy as np


def as_ccw(poly) -> np.ndarray:
    p = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if signed_area(p) < 0:
        p = p[::-1].copy()
    return p


def signed_area(p: np.ndarray) -> float:
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def area(p: np.ndarray) -> float:
    return abs(signed_area(p))


def is_convex(p: np.ndarray, tol: float = 1e-12) -> bool:
    n = len(p)
    if n < 3:
        return False
    e = np.roll(p, -1, axis=0) - p
    cross = e[:, 0] * np.roll(e[:, 1], -1) - e[:, 1] * np.roll(e[:, 0], -1)
    return bool(np.all(cross >= -tol) or np.all(cross <= tol))


def centroid(p: np.ndarray) -> np.ndarray:
    x, y = p[:, 0], p[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cr = x * yn - xn * y
    a = cr.sum() / 2.0
    if abs(a) < 1e-15:
        return p.mean(axis=0)
    cx = ((x + xn) * cr).sum() / (6.0 * a)
    cy = ((y + yn) * cr).sum() / (6.0 * a)
    return np.array([cx, cy])


def halfspaces(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Outward unit normals ``n_i`` and offsets ``c_i`` with interior ``n_i . x <= c_i``."""
    e = np.roll(p, -1, axis=0) - p
    n = np.column_stack([e[:, 1], -e[:, 0]])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    c = (n * p).sum(axis=1)
    return n, c


def inset(p: np.ndarray, d: float) -> np.ndarray:
    """Shrink a convex polygon by moving every edge inward by ``d``."""
    n, c = halfspaces(p)
    c2 = c - d
    k = len(p)
    out = []
    for i in range(k):
        j = (i - 1) % k
        a = np.array([n[j], n[i]])
        out.append(np.linalg.solve(a, np.array([c2[j], c2[i]])))
    return np.array(out)


def contains(p: np.ndarray, xy, tol: float = 0.0) -> bool:
    n, c = halfspaces(p)
    return bool(np.all(n @ np.asarray(xy, dtype=np.float64) <= c + tol))


def translate(p: np.ndarray, d) -> np.ndarray:
    return p + np.asarray(d, dtype=np.float64)[None, :2]


def rotate(p: np.ndarray, deg: float, about) -> np.ndarray:
    a = math.radians(deg)
    r = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    o = np.asarray(about, dtype=np.float64)
    return (p - o) @ r.T + o


def _project(p: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    v = p @ axis
    return float(v.min()), float(v.max())


def overlaps(a: np.ndarray, b: np.ndarray, tol: float = 1e-9) -> bool:
    """Separating-axis test; touching polygons do not count as overlapping."""
    for poly in (a, b):
        n, _ = halfspaces(poly)
        for axis in n:
            a0, a1 = _project(a, axis)
            b0, b1 = _project(b, axis)
            if a1 <= b0 + tol or b1 <= a0 + tol:
                return False
    return True


def segment_clip(p: np.ndarray, s0, s1) -> tuple[float, float] | None:
    """Parameter interval of segment ``s0 -> s1`` inside the polygon, or None."""
    s0 = np.asarray(s0, dtype=np.float64)[:2]
    d = np.asarray(s1, dtype=np.float64)[:2] - s0
    n, c = halfspaces(p)
    t0, t1 = -np.inf, np.inf
    for ni, ci in zip(n, c):
        num = ci - ni @ s0
        den = ni @ d
        if abs(den) < 1e-15:
            if num < 0:
                return None
            continue
        t = num / den
        if den < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
    if t0 > t1 or t1 < 0 or t0 > 1:
        return None
    return max(t0, 0.0), min(t1, 1.0)


def _point_segment_distance(q, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(max(float((q - a) @ ab) / denom, 0.0), 1.0)
    return float(np.linalg.norm(q - (a + t * ab)))


def distance(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean gap between two convex polygons (0 when they overlap)."""
    if overlaps(a, b, tol=0.0):
        return 0.0
    best = math.inf
    for p, q in ((a, b), (b, a)):
        for v in p:
            for i in range(len(q)):
                best = min(best, _point_segment_distance(v, q[i], q[(i + 1) % len(q)]))
    return best


def box(center, size, angle_deg: float = 0.0) -> np.ndarray:
    cx, cy = center
    w, h = size
    p = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]]) + [cx, cy]
    return rotate(p, angle_deg, (cx, cy)) if angle_deg else p


def ngon(center, radius: float, sides: int, angle_deg: float = 0.0) -> np.ndarray:
    k = np.arange(sides)
    a = np.radians(angle_deg) + 2 * np.pi * k / sides
    return np.column_stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)])
