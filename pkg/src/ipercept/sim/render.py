"""Ray-cast rendering of a tabletop scene: RGB, z-depth, object ids, shadows."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..imaging import RgbImage, text_bitmap
from ..projection import CameraIntrinsics, RigidTransform, RobotPose
from . import polygon as poly
from .scene import SceneObject, TabletopScene

TABLE_COLOR = (196, 170, 132)
SKY_COLOR = (40, 40, 48)
UNDERSIDE_BACKGROUND = (235, 235, 235)
SIDE_SHADE = 0.78
INTERIOR_SHADE = 0.62
SHADOW_SHADE = 0.55

ID_TABLE = -1
ID_NONE = -2

FACE_NONE, FACE_TOP, FACE_SIDE, FACE_BOTTOM, FACE_INTERIOR = 0, 1, 2, 3, 4

_EPS = 1e-7


@dataclass(frozen=True, eq=False)
class SimObservation:
    rgb: RgbImage
    depth: np.ndarray
    camera_pose: RigidTransform
    secondary_rgb: RgbImage | None = None
    ids: np.ndarray | None = None

    def with_secondary(self, img: RgbImage | None) -> SimObservation:
        return SimObservation(self.rgb, self.depth, self.camera_pose, img, self.ids)


@dataclass(frozen=True)
class _Prism:
    normals: np.ndarray  # (m, 3) outward
    offsets: np.ndarray  # (m,)
    sides: int


def _prism(fp: np.ndarray, zb: float, zt: float) -> _Prism:
    n2, c2 = poly.halfspaces(fp)
    k = len(fp)
    normals = np.zeros((k + 2, 3))
    normals[:k, :2] = n2
    normals[k] = (0.0, 0.0, 1.0)
    normals[k + 1] = (0.0, 0.0, -1.0)
    offsets = np.concatenate([c2, [zt, -zb]])
    return _Prism(normals, offsets, k)


def _interval(pr: _Prism, origins: np.ndarray, dirs: np.ndarray):
    """Clip rays ``origins + t dirs`` against a convex prism.

    Returns ``(t_enter, t_exit, entry_plane, valid)``; ``origins`` may be a
    single point or one point per ray.
    """
    num = pr.offsets[None, :] - np.atleast_2d(origins) @ pr.normals.T
    den = dirs @ pr.normals.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / den
    entering = den < -1e-15
    exiting = den > 1e-15
    miss = (~entering & ~exiting & (num < 0)).any(axis=1)
    te_all = np.where(entering, t, -np.inf)
    tx_all = np.where(exiting, t, np.inf)
    plane = te_all.argmax(axis=1)
    te = te_all[np.arange(len(te_all)), plane]
    tx = tx_all.min(axis=1)
    valid = ~miss & (te <= tx)
    return te, tx, plane, valid


@dataclass(frozen=True)
class _Solid:
    index: int
    obj: SceneObject
    outer: _Prism
    cavity: _Prism | None
    zb: float
    zt: float


def _solids(scene: TabletopScene) -> list[_Solid]:
    out = []
    for o in scene.on_table():
        zb = scene.base_z(o.id)
        zt = zb + o.height
        cav = None
        if o.hollow_wall:
            w = float(o.hollow_wall)
            cav = _prism(poly.inset(o.footprint, w), zb + w, zt + 1e-9)
        out.append(_Solid(scene.index(o.id), o, _prism(o.footprint, zb, zt), cav, zb, zt))
    return out


def _first_hit(s: _Solid, origins: np.ndarray, dirs: np.ndarray, t_min: float):
    """Nearest surface hit with ``t > t_min``; returns ``(t, face, hit)``."""
    te, tx, plane, valid = _interval(s.outer, origins, dirs)
    k = s.outer.sides
    face = np.where(plane < k, FACE_SIDE, np.where(plane == k, FACE_TOP, FACE_BOTTOM))
    t = np.where(te > t_min, te, tx)
    hit = valid & (tx > t_min)
    # a ray starting inside the solid registers its own exit; only count
    # genuine entries as hits from inside (used for shadow rays)
    from_inside = valid & (te <= t_min) & (tx > t_min)
    if s.cavity is not None:
        ce, cx, _, cvalid = _interval(s.cavity, origins, dirs)
        start = np.maximum(te, t_min)
        in_cavity = cvalid & (ce <= start + 1e-9) & (cx >= start - 1e-9)
        through_top = in_cavity & (cx >= tx - 1e-9)
        t = np.where(in_cavity, cx, t)
        face = np.where(in_cavity, FACE_INTERIOR, face)
        hit = hit & ~through_top
        from_inside = from_inside & ~in_cavity
    hit = hit & ~from_inside
    return t, face, hit


def _box_corners(s: _Solid) -> np.ndarray:
    fp = s.obj.footprint
    x0, y0 = fp.min(axis=0)
    x1, y1 = fp.max(axis=0)
    return np.array([[x, y, z] for x in (x0, x1) for y in (y0, y1) for z in (s.zb, s.zt)])


def _screen_candidates(s: _Solid, cam: RigidTransform, intr: CameraIntrinsics) -> np.ndarray:
    """Flat pixel indices whose rays may hit the solid (projected bounding box)."""
    pc = cam.inverse().apply_many(_box_corners(s))
    n = intr.width * intr.height
    if (pc[:, 2] <= 1e-6).any():
        return np.arange(n)
    u = intr.fx * pc[:, 0] / pc[:, 2] + intr.cx
    v = intr.fy * pc[:, 1] / pc[:, 2] + intr.cy
    u0, u1 = max(int(np.floor(u.min())) - 1, 0), min(int(np.ceil(u.max())) + 1, intr.width - 1)
    v0, v1 = max(int(np.floor(v.min())) - 1, 0), min(int(np.ceil(v.max())) + 1, intr.height - 1)
    if u0 > u1 or v0 > v1:
        return np.zeros(0, dtype=np.int64)
    vv, uu = np.mgrid[v0 : v1 + 1, u0 : u1 + 1]
    return (vv * intr.width + uu).ravel()


def _shadow_candidates(s: _Solid, pts: np.ndarray, lit: np.ndarray) -> np.ndarray:
    """Surface points whose ray towards the light can reach the solid's box."""
    fp = s.obj.footprint
    x0, y0 = fp.min(axis=0)
    x1, y1 = fp.max(axis=0)
    reach = np.maximum(s.zt - pts[:, 2], 0.0) / max(lit[2], 1e-9)
    sx, sy = lit[0] * reach, lit[1] * reach
    ok = (pts[:, 2] < s.zt + 1e-9)
    ok &= (pts[:, 0] >= x0 - np.maximum(sx, 0) - 1e-6) & (pts[:, 0] <= x1 - np.minimum(sx, 0) + 1e-6)
    ok &= (pts[:, 1] >= y0 - np.maximum(sy, 0) - 1e-6) & (pts[:, 1] <= y1 - np.minimum(sy, 0) + 1e-6)
    return np.flatnonzero(ok)


def pixel_rays(intr: CameraIntrinsics, pose: RigidTransform) -> np.ndarray:
    """Base-frame ray directions (unit camera-z) for every pixel, row-major."""
    us, vs = np.meshgrid(np.arange(intr.width, dtype=np.float64), np.arange(intr.height, dtype=np.float64))
    d_cam = np.stack([(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1).reshape(-1, 3)
    return d_cam @ pose.rotation.T


def _light_vector(scene: TabletopScene) -> np.ndarray:
    e = math.radians(scene.light_elevation_deg)
    dx, dy = scene.light_direction
    return np.array([-dx * math.cos(e), -dy * math.cos(e), math.sin(e)])


def _text_mask(o: SceneObject, xy: np.ndarray, text: str) -> np.ndarray:
    """Which top-face points fall on a glyph texel of ``text``."""
    bmp = text_bitmap(text)
    # trim the trailing inter-character column so the text is centred
    bmp = bmp[:, : max(bmp.shape[1] - 1, 1)]
    fp = o.footprint
    ex = fp[1] - fp[0]
    ex = ex / np.linalg.norm(ex)
    ey = np.array([-ex[1], ex[0]])
    c = o.centroid
    u_all = (fp - c) @ ex
    v_all = (fp - c) @ ey
    su = 0.8 * (u_all.max() - u_all.min()) / bmp.shape[1]
    sv = 0.8 * (v_all.max() - v_all.min()) / bmp.shape[0]
    s = min(su, sv)
    uc = 0.5 * (u_all.max() + u_all.min())
    vc = 0.5 * (v_all.max() + v_all.min())
    u = (xy - c) @ ex
    v = (xy - c) @ ey
    col = np.floor((u - uc) / s + bmp.shape[1] / 2).astype(np.int64)
    row = np.floor(-(v - vc) / s + bmp.shape[0] / 2).astype(np.int64)
    ok = (col >= 0) & (col < bmp.shape[1]) & (row >= 0) & (row < bmp.shape[0])
    out = np.zeros(len(xy), dtype=bool)
    out[ok] = bmp[row[ok], col[ok]]
    return out


def render(scene: TabletopScene, pose: RobotPose | RigidTransform, intr: CameraIntrinsics) -> SimObservation:
    """Ray-cast the scene from a camera pose (camera-to-base transform)."""
    cam = pose.transform if isinstance(pose, RobotPose) else pose
    origin = cam.translation
    dirs = pixel_rays(intr, cam)
    n = len(dirs)

    t_best = np.full(n, np.inf)
    ids = np.full(n, ID_NONE, dtype=np.int64)
    face = np.full(n, FACE_NONE, dtype=np.int64)

    down = dirs[:, 2] < -1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        t_table = np.where(down, -origin[2] / dirs[:, 2], np.inf)
    ok = down & (t_table > 0)
    t_best[ok] = t_table[ok]
    ids[ok] = ID_TABLE
    face[ok] = FACE_TOP

    solids = _solids(scene)
    for s in solids:
        cand = _screen_candidates(s, cam, intr)
        t, f, hit = _first_hit(s, origin, dirs[cand], _EPS)
        better = hit & (t < t_best[cand])
        sel = cand[better]
        t_best[sel] = t[better]
        ids[sel] = s.index
        face[sel] = f[better]

    rgb = np.empty((n, 3), dtype=np.float64)
    rgb[:] = SKY_COLOR
    rgb[ids == ID_TABLE] = TABLE_COLOR
    points = origin[None, :] + np.where(np.isfinite(t_best), t_best, 0.0)[:, None] * dirs
    for s in solids:
        sel = ids == s.index
        if not sel.any():
            continue
        col = np.asarray(s.obj.color, dtype=np.float64)
        shade = np.where(face[sel] == FACE_SIDE, SIDE_SHADE, np.where(face[sel] == FACE_INTERIOR, INTERIOR_SHADE, 1.0))
        rgb[sel] = col[None, :] * shade[:, None]
        if s.obj.top_text:
            idx = np.flatnonzero(sel & (face == FACE_TOP))
            if len(idx):
                ink = _text_mask(s.obj, points[idx, :2], s.obj.top_text)
                rgb[idx[ink]] = (250, 250, 250) if sum(s.obj.color) < 240 else (10, 10, 10)

    lit = _light_vector(scene)
    surf = ids != ID_NONE
    if solids and surf.any():
        idx = np.flatnonzero(surf)
        pts = points[idx]
        ldirs = np.broadcast_to(lit, pts.shape)
        shadow = np.zeros(len(idx), dtype=bool)
        for s in solids:
            cand = _shadow_candidates(s, pts, lit)
            _, _, hit = _first_hit(s, pts[cand], ldirs[cand], 1e-6)
            shadow[cand[hit]] = True
        rgb[idx[shadow]] *= SHADOW_SHADE

    depth = np.where(np.isfinite(t_best), t_best, 0.0)
    h, w = intr.height, intr.width
    img = RgbImage(np.clip(np.round(rgb), 0, 255).astype(np.uint8).reshape(h, w, 3))
    return SimObservation(img, depth.reshape(h, w), cam, None, ids.reshape(h, w))


def render_underside(o: SceneObject, width: int = 160, height: int = 120) -> RgbImage:
    """Secondary-camera view of an object's underside on a plain background."""
    arr = np.empty((height, width, 3), dtype=np.uint8)
    arr[:] = UNDERSIDE_BACKGROUND
    fp = o.footprint - o.centroid
    span = max(fp[:, 0].max() - fp[:, 0].min(), fp[:, 1].max() - fp[:, 1].min(), 1e-6)
    s = 0.8 * min(width, height) / span
    vs, us = np.mgrid[0:height, 0:width]
    x = (us - (width - 1) / 2) / s
    y = -(vs - (height - 1) / 2) / s
    n, c = poly.halfspaces(fp)
    inside = (np.stack([x, y], axis=-1) @ n.T <= c).all(axis=-1)
    arr[inside] = o.color
    if o.bottom_text:
        bmp = text_bitmap(o.bottom_text)
        bmp = bmp[:, : max(bmp.shape[1] - 1, 1)]
        k = max(1, min((width - 8) // bmp.shape[1], (height - 8) // bmp.shape[0], 4))
        big = np.kron(bmp, np.ones((k, k), dtype=bool))
        bh, bw = big.shape
        y0, x0 = (height - bh) // 2, (width - bw) // 2
        ink = (250, 250, 250) if sum(o.color) < 240 else (10, 10, 10)
        region = arr[y0 : y0 + bh, x0 : x0 + bw]
        region[big] = ink
    return RgbImage(arr)
