"""Rigid transforms, the marker-anchored virtual grid and pinhole projection.

Frames: ``B`` robot base (z up, table plane z = 0), ``C`` camera optical frame
(z forward, x right, y down in the image), ``M`` marker frame whose z = 0
plane is the grid plane.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import IPerceptError
from .geometry import BinaryMask, PixelPoint


class ProjectionError(IPerceptError):
    pass


class BehindCamera(ProjectionError):
    pass


class RayParallelToPlane(ProjectionError):
    pass


class NoValidDepth(ProjectionError):
    pass


class OutOfRange(ProjectionError):
    pass


class IndexOutOfRange(ProjectionError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def ray(self, pixel: PixelPoint) -> np.ndarray:
        """Camera-frame ray through ``pixel`` scaled to unit z."""
        return np.array([(pixel[0] - self.cx) / self.fx, (pixel[1] - self.cy) / self.fy, 1.0])

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}


def _check_rotation(r: np.ndarray) -> None:
    if r.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0) or abs(np.linalg.det(r) - 1) > 1e-9:
        raise ValueError("rotation is not orthonormal with det +1")


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Maps points from a child frame into a parent frame: ``p' = R p + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_translation(cls, t: Sequence[float]) -> RigidTransform:
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_quaternion(cls, wxyz: Sequence[float], t: Sequence[float] = (0, 0, 0)) -> RigidTransform:
        w, x, y, z = wxyz
        return cls(Rotation.from_quat([x, y, z, w]).as_matrix(), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def quaternion(self) -> tuple[float, float, float, float]:
        """(w, x, y, z) with w >= 0."""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        q = np.array([w, x, y, z])
        if q[0] < 0 or (q[0] == 0 and next(v for v in q if v != 0) < 0):
            q = -q
        return tuple(float(v) + 0.0 for v in q)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, point: Sequence[float]) -> np.ndarray:
        return self.rotation @ np.asarray(point, dtype=np.float64) + self.translation

    def apply_many(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def to_dict(self) -> dict:
        return {
            "position": [float(v) + 0.0 for v in self.translation],
            "quaternion": list(self.quaternion()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> RigidTransform:
        return cls.from_quaternion(d.get("quaternion", (1, 0, 0, 0)), d.get("position", (0, 0, 0)))

    def close_to(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0)
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a o b``: apply ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rot_x(deg: float) -> np.ndarray:
    return Rotation.from_euler("x", deg, degrees=True).as_matrix()


def rot_z(deg: float) -> np.ndarray:
    return Rotation.from_euler("z", deg, degrees=True).as_matrix()


# camera x along base +x, image down along base -y, optical axis straight down
NADIR_ROTATION = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])


@dataclass(frozen=True, eq=False)
class RobotPose:
    """End-effector (camera) pose in the base frame."""

    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: NADIR_ROTATION.copy())
    frame_tag: str = "Base"

    def __post_init__(self) -> None:
        p = np.array(self.position, dtype=np.float64).reshape(3)
        r = np.array(self.orientation, dtype=np.float64)
        _check_rotation(r)
        p.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", r)

    @property
    def transform(self) -> RigidTransform:
        return RigidTransform(self.orientation, self.position)

    def to_dict(self) -> dict:
        d = self.transform.to_dict()
        d["frame"] = self.frame_tag
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RobotPose:
        t = RigidTransform.from_dict(d)
        return cls(t.translation, t.rotation, d.get("frame", "Base"))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RobotPose):
            return NotImplemented
        return (
            np.array_equal(self.position, other.position)
            and np.array_equal(self.orientation, other.orientation)
            and self.frame_tag == other.frame_tag
        )


@dataclass(frozen=True)
class VirtualGrid:
    """Planar grid on the marker's z = 0 plane.

    ``unit`` is the size of one labelled grid unit in metres, so a vertex at
    marker-frame ``(u * unit, v * unit, 0)`` is labelled ``[u; v]``. The
    coarse grid has ``unit == cell_size``; a fine grid keeps the coarse unit
    and shrinks ``cell_size``.
    """

    anchor: RigidTransform
    cells_x: int = 5
    cells_y: int = 5
    cell_size: float = 0.10
    unit: float = 0.10
    origin: tuple[float, float] = (0.0, 0.0)

    @property
    def vertex_count(self) -> int:
        return (self.cells_x + 1) * (self.cells_y + 1)

    def vertex_indices(self) -> list[tuple[int, int]]:
        return [(i, j) for j in range(self.cells_y + 1) for i in range(self.cells_x + 1)]

    def vertex_marker(self, index: tuple[int, int] | int) -> np.ndarray:
        if isinstance(index, (int, np.integer)):
            if not 0 <= index < self.vertex_count:
                raise IndexOutOfRange(f"vertex {index} outside 0..{self.vertex_count - 1}")
            index = self.vertex_indices()[index]
        i, j = index
        if not (0 <= i <= self.cells_x and 0 <= j <= self.cells_y):
            raise IndexOutOfRange(f"vertex {index} outside the {self.cells_x}x{self.cells_y} grid")
        return np.array(
            [self.origin[0] * self.unit + i * self.cell_size, self.origin[1] * self.unit + j * self.cell_size, 0.0]
        )

    @property
    def vertices_marker(self) -> np.ndarray:
        return np.array([self.vertex_marker(ix) for ix in self.vertex_indices()])

    def vertex_label(self, index: tuple[int, int]) -> tuple[float, float]:
        v = self.vertex_marker(index)
        return (v[0] / self.unit, v[1] / self.unit)

    def grid_to_marker(self, gx: float, gy: float) -> np.ndarray:
        return np.array([gx * self.unit, gy * self.unit, 0.0])

    def with_anchor(self, anchor: RigidTransform) -> VirtualGrid:
        return VirtualGrid(anchor, self.cells_x, self.cells_y, self.cell_size, self.unit, self.origin)

    def fine(self, center: tuple[float, float], factor: int = 5) -> VirtualGrid:
        """Grid of ``cell_size / factor`` spanning one coarse cell around ``center``."""
        half = 0.5 * self.cell_size / self.unit
        ox = min(max(center[0] - half, self.origin[0]), self.origin[0] + self.cells_x * self.cell_size / self.unit - 2 * half)
        oy = min(max(center[1] - half, self.origin[1]), self.origin[1] + self.cells_y * self.cell_size / self.unit - 2 * half)
        return VirtualGrid(self.anchor, factor, factor, self.cell_size / factor, self.unit, (ox, oy))


def grid_vertex_to_base(grid: VirtualGrid, cam_to_base: RigidTransform, index) -> np.ndarray:
    """Base-frame position of a grid vertex: ``T_C^B T_M^C V^M``."""
    return compose(cam_to_base, grid.anchor).apply(grid.vertex_marker(index))


def project_to_image(intr: CameraIntrinsics, point_camera: Sequence[float]) -> PixelPoint:
    x, y, z = (float(v) for v in point_camera)
    if z <= 1e-6:
        raise BehindCamera(f"point at z={z:.3g} is not in front of the camera")
    return PixelPoint(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def image_to_workspace(
    intr: CameraIntrinsics,
    pixel: PixelPoint,
    anchor: RigidTransform,
    cam_to_base: RigidTransform,
    plane_offset: float = 0.0,
) -> np.ndarray:
    """Intersect the pixel ray with the marker plane, returned in the base frame.

    ``plane_offset`` lifts the plane along the marker normal (e.g. to an
    object's top surface).
    """
    d = intr.ray(pixel)
    n = anchor.rotation[:, 2]
    p0 = anchor.translation + plane_offset * n
    denom = float(n @ d)
    if abs(denom) <= 1e-9:
        raise RayParallelToPlane(f"ray through {tuple(pixel)} is parallel to the grid plane")
    t = float(n @ p0) / denom
    if t <= 0:
        raise BehindCamera(f"grid plane is behind the camera at pixel {tuple(pixel)}")
    return cam_to_base.apply(t * d)


def backproject(intr: CameraIntrinsics, pixel: PixelPoint, depth: float) -> np.ndarray:
    """Camera-frame point at z-depth ``depth`` along the pixel ray."""
    return depth * intr.ray(pixel)


def depth_at_centroid(
    depth_image: np.ndarray,
    centroid: PixelPoint,
    window: int = 5,
    mask: BinaryMask | None = None,
) -> float:
    """Median of valid depths (finite, > 0) in a window around the rounded point.

    When ``mask`` is given only object pixels contribute.
    """
    h, w = depth_image.shape
    x = math.floor(centroid[0] + 0.5)
    y = math.floor(centroid[1] + 0.5)
    if not (0 <= x < w and 0 <= y < h):
        raise OutOfRange(f"point {tuple(centroid)} outside the {w}x{h} depth image")
    r = window // 2
    y0, y1 = max(y - r, 0), min(y + r + 1, h)
    x0, x1 = max(x - r, 0), min(x + r + 1, w)
    vals = np.asarray(depth_image[y0:y1, x0:x1], dtype=np.float64)
    ok = np.isfinite(vals) & (vals > 0)
    if mask is not None:
        ok &= mask.data[y0:y1, x0:x1]
    if not ok.any():
        raise NoValidDepth(f"no valid depth around {tuple(centroid)}")
    return float(np.median(vals[ok]))


@dataclass(frozen=True)
class CubeLayerSpec:
    layer_heights: tuple[float, float, float] = (0.0, 0.10, 0.20)
    camera_standoff: float = 0.35
    roll_options: tuple[float, float, float] = (0.0, 35.0, -35.0)

    def __post_init__(self) -> None:
        if len(self.layer_heights) != 3 or len(self.roll_options) != 3:
            raise ValueError("cube spec needs exactly three layers and three rolls")
        if self.camera_standoff <= 0:
            raise ValueError("camera standoff must be positive")


def camera_pose_for_cube_vertex(
    spec: CubeLayerSpec,
    vertex_x: float,
    vertex_y: float,
    vertex_z: int,
    orient_x: int,
    marker_to_base: RigidTransform,
    grid: VirtualGrid | None = None,
) -> RobotPose:
    """Camera pose above a cube vertex, rolled about the base x-axis.

    ``vertex_x``/``vertex_y`` are grid units rounded to one decimal;
    ``vertex_z`` selects the layer height and ``orient_x`` the roll.
    """
    grid = grid or VirtualGrid(RigidTransform.identity())
    gx, gy = round(float(vertex_x), 1), round(float(vertex_y), 1)
    xmax = grid.origin[0] + grid.cells_x * grid.cell_size / grid.unit
    ymax = grid.origin[1] + grid.cells_y * grid.cell_size / grid.unit
    if not (grid.origin[0] <= gx <= xmax and grid.origin[1] <= gy <= ymax):
        raise OutOfRange(f"cube vertex ({gx}, {gy}) outside the grid")
    if vertex_z not in (0, 1, 2):
        raise OutOfRange(f"vertex_z must be 0, 1 or 2, got {vertex_z}")
    if orient_x not in (0, 1, 2):
        raise OutOfRange(f"orient_x must be 0, 1 or 2, got {orient_x}")
    on_plane = marker_to_base.apply(grid.grid_to_marker(gx, gy))
    # rounding keeps decimal layer heights exact (0.10 + 0.35 is not 0.45 in binary)
    height = round(spec.layer_heights[vertex_z] + spec.camera_standoff, 9)
    position = np.array([on_plane[0], on_plane[1], height])
    orientation = rot_x(spec.roll_options[orient_x]) @ NADIR_ROTATION
    return RobotPose(position, orientation)


# -- configuration and depth files ------------------------------------------


@dataclass(frozen=True)
class WorkspaceConfig:
    intrinsics: CameraIntrinsics = CameraIntrinsics(220.0, 220.0, 160.0, 120.0, 320, 240)
    cells_x: int = 5
    cells_y: int = 5
    cell_size: float = 0.10
    marker_pose: RigidTransform = field(
        default_factory=lambda: RigidTransform.from_translation((0.25, -0.25, 0.0))
    )
    cube: CubeLayerSpec = CubeLayerSpec()
    home: RobotPose = field(default_factory=lambda: RobotPose((0.5, 0.0, 0.55)))
    presentation: RobotPose = field(
        default_factory=lambda: RobotPose((0.45, -0.45, 0.30), rot_x(90.0) @ NADIR_ROTATION)
    )

    def grid(self, cam_to_base: RigidTransform) -> VirtualGrid:
        """Grid anchored in the camera frame of ``cam_to_base``."""
        anchor = compose(cam_to_base.inverse(), self.marker_pose)
        return VirtualGrid(anchor, self.cells_x, self.cells_y, self.cell_size, self.cell_size)

    def to_dict(self) -> dict:
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "grid": {"cells_x": self.cells_x, "cells_y": self.cells_y, "cell_size": self.cell_size},
            "marker_pose": self.marker_pose.to_dict(),
            "cube": {
                "layer_heights": list(self.cube.layer_heights),
                "camera_standoff": self.cube.camera_standoff,
                "roll_options": list(self.cube.roll_options),
            },
            "home": self.home.to_dict(),
            "presentation": self.presentation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> WorkspaceConfig:
        base = cls()
        kw = {}
        if "intrinsics" in d:
            kw["intrinsics"] = CameraIntrinsics(**d["intrinsics"])
        g = d.get("grid", {})
        for k in ("cells_x", "cells_y", "cell_size"):
            if k in g:
                kw[k] = g[k]
        if "marker_pose" in d:
            kw["marker_pose"] = RigidTransform.from_dict(d["marker_pose"])
        if "cube" in d:
            c = d["cube"]
            kw["cube"] = CubeLayerSpec(
                tuple(c.get("layer_heights", base.cube.layer_heights)),
                c.get("camera_standoff", base.cube.camera_standoff),
                tuple(c.get("roll_options", base.cube.roll_options)),
            )
        if "home" in d:
            kw["home"] = RobotPose.from_dict(d["home"])
        if "presentation" in d:
            kw["presentation"] = RobotPose.from_dict(d["presentation"])
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> WorkspaceConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


_ZDPT_MAGIC = b"ZDPT"


def save_depth(depth: np.ndarray, path: str | Path) -> None:
    """Write a depth raster: ``.png`` as 16-bit millimetres, else ZDPT float32."""
    path = Path(path)
    depth = np.asarray(depth, dtype=np.float64)
    if path.suffix.lower() == ".png":
        from PIL import Image

        mm = np.clip(np.nan_to_num(depth * 1000.0, nan=0.0), 0, 65535).round().astype(np.uint16)
        Image.fromarray(mm).save(path)
        return
    h, w = depth.shape
    path.write_bytes(_ZDPT_MAGIC + struct.pack("<II", w, h) + depth.astype("<f4").tobytes())


def load_depth(path: str | Path) -> np.ndarray:
    """Read a depth raster in metres (see :func:`save_depth`)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == _ZDPT_MAGIC:
        w, h = struct.unpack("<II", raw[4:12])
        body = np.frombuffer(raw[12:], dtype="<f4")
        if body.size != w * h:
            raise ValueError(f"{path}: expected {w * h} floats, found {body.size}")
        return body.reshape(h, w).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 1000.0
