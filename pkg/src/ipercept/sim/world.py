"""Quasi-static action rules and the stateful world wrapper used by episodes."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import IPerceptError
from ..geometry import BinaryMask
from ..imaging import RgbImage
from ..projection import CameraIntrinsics, RigidTransform, RobotPose, WorkspaceConfig
from . import polygon as poly
from .render import SimObservation, render, render_underside
from .scene import SceneObject, TabletopScene


class WorldError(IPerceptError):
    pass


class NoContact(WorldError):
    pass


class NoObjectAtGrasp(WorldError):
    pass


class ObjectBuried(WorldError):
    pass


class ObjectBlocked(WorldError):
    pass


class IllegalState(WorldError):
    pass


class UnknownObject(WorldError):
    pass


class AmbiguousName(WorldError):
    pass


class NotVisible(WorldError):
    pass


_GRASP_TOL = 0.002
_Z_TOL = 1e-6


# -- segmentation ---------------------------------------------------------------


def find_object(scene: TabletopScene, name: str) -> SceneObject:
    """Resolve a free-text descriptor to one scene object.

    An object matches when its name is a case-insensitive substring of the
    descriptor or vice versa. Hidden payloads are not yet part of the scene.
    """
    q = " ".join(name.lower().split())
    if not q:
        raise UnknownObject("empty object descriptor")
    pool = [o for o in scene.objects if not o.hidden]
    exact = [o for o in pool if o.name.lower() == q]
    if len(exact) == 1:
        return exact[0]
    hits = [o for o in pool if o.name.lower() in q or q in o.name.lower()]
    if not hits:
        raise UnknownObject(f"no object matches {name!r}")
    if len(hits) > 1:
        # prefer the most specific name contained in the descriptor
        contained = [o for o in hits if o.name.lower() in q]
        if contained:
            longest = max(len(o.name) for o in contained)
            best = [o for o in contained if len(o.name) == longest]
            if len(best) == 1:
                return best[0]
        raise AmbiguousName(f"{name!r} matches {sorted(o.name for o in hits)}")
    return hits[0]


def segmentation_oracle(scene: TabletopScene, pose, intr: CameraIntrinsics, name: str, obs: SimObservation | None = None) -> BinaryMask:
    """Ground-truth visible-pixel mask for the named object."""
    o = find_object(scene, name)
    if o.id == scene.held:
        raise NotVisible(f"{o.name!r} is held by the gripper")
    obs = obs if obs is not None and obs.ids is not None else render(scene, pose, intr)
    m = obs.ids == scene.index(o.id)
    if not m.any():
        raise NotVisible(f"{o.name!r} has no visible pixels")
    return BinaryMask(m)


def visible_fraction(scene: TabletopScene, pose, intr: CameraIntrinsics, oid: str) -> float:
    """Visible pixels of ``oid`` relative to its unoccluded silhouette."""
    full = render(scene, pose, intr)
    alone = scene.replace_objects(
        [o if o.id == oid else replace(o, hidden=True) for o in scene.objects], held=None
    )
    solo = render(alone, pose, intr)
    k = scene.index(oid)
    denom = int((solo.ids == k).sum())
    return 0.0 if denom == 0 else float((full.ids == k).sum()) / denom


# -- helpers --------------------------------------------------------------------


def _z_range(scene: TabletopScene, oid: str) -> tuple[float, float]:
    return scene.base_z(oid), scene.top_z(oid)


def _max_travel(scene: TabletopScene, fp: np.ndarray, u: np.ndarray) -> float:
    """Largest ``s >= 0`` keeping ``fp + s u`` inside the table bounds."""
    x0, y0, x1, y1 = scene.table_bounds
    s = np.inf
    for k, (lo, hi) in enumerate(((x0, x1), (y0, y1))):
        if u[k] > 1e-15:
            s = min(s, (hi - fp[:, k].max()) / u[k])
        elif u[k] < -1e-15:
            s = min(s, (lo - fp[:, k].min()) / u[k])
    return max(float(s), 0.0)


def _reveal(objs: dict[str, SceneObject], mover: SceneObject, vacated: np.ndarray) -> None:
    pid = mover.hidden_payload
    if pid is None or not objs[pid].hidden:
        return
    p = objs[pid]
    objs[pid] = replace(p, hidden=False, footprint=poly.translate(p.footprint, vacated - p.centroid))
    objs[mover.id] = replace(objs[mover.id], hidden_payload=None)


def _topmost_at(scene: TabletopScene, xy) -> SceneObject:
    cands = [o for o in scene.on_table() if poly.contains(o.footprint, xy, tol=_GRASP_TOL)]
    if not cands:
        raise NoObjectAtGrasp(f"nothing to grasp at ({xy[0]:.3f}, {xy[1]:.3f})")
    return max(cands, key=lambda o: (scene.top_z(o.id), -scene.index(o.id)))


def _check_graspable(scene: TabletopScene, o: SceneObject) -> None:
    above = scene.supported_by(o.id)
    if above:
        raise ObjectBuried(f"{o.name!r} has {[a.name for a in above]} resting on it")
    if scene.grasp_clearance > 0:
        closure = set(scene.stack_closure(o.id))
        z0, z1 = _z_range(scene, o.id)
        for other in scene.on_table():
            if other.id in closure or other.id == o.resting_on:
                continue
            b0, b1 = _z_range(scene, other.id)
            if b1 <= z0 + _Z_TOL or b0 >= z1 - _Z_TOL:
                continue
            if poly.distance(o.footprint, other.footprint) < scene.grasp_clearance:
                raise ObjectBlocked(f"{o.name!r} is too close to {other.name!r} for the gripper fingers")


# -- actions --------------------------------------------------------------------


def apply_push(scene: TabletopScene, pre, post) -> TabletopScene:
    """Straight push from ``pre`` to ``post`` at the contact height ``pre[2]``."""
    pre = np.asarray(pre, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    seg = post[:2] - pre[:2]
    length = float(np.linalg.norm(seg))
    if length < 1e-12:
        raise NoContact("zero-length push")
    u = seg / length
    zc = float(pre[2])
    first, t_first = None, np.inf
    for o in scene.on_table():
        z0, z1 = _z_range(scene, o.id)
        if not (z0 - _Z_TOL <= zc <= z1 + _Z_TOL):
            continue
        clip = poly.segment_clip(o.footprint, pre, post)
        if clip is not None and clip[0] < t_first:
            first, t_first = o, clip[0]
    if first is None:
        raise NoContact("push segment touches no object")
    entry = pre[:2] + t_first * seg
    travel = float((post[:2] - entry) @ u)

    objs = {o.id: o for o in scene.objects}
    vacated: dict[str, np.ndarray] = {}
    offsets: dict[str, float] = {}

    def move_group(oid: str, s: float) -> float:
        s = min(s, _max_travel(scene, objs[oid].footprint, u))
        if s <= 1e-12:
            return 0.0
        for gid in scene.stack_closure(oid):
            vacated.setdefault(gid, objs[gid].centroid.copy())
            objs[gid] = objs[gid].moved(s * u)
        offsets[oid] = offsets.get(oid, 0.0) + s
        return s

    move_group(first.id, travel)
    queue = [first.id]
    guard = 0
    while queue and guard < 200:
        guard += 1
        aid = queue.pop(0)
        a = objs[aid]
        az0, az1 = _z_range(scene, aid)
        closure = set(scene.stack_closure(aid))
        for b in scene.on_table():
            if b.id in closure or b.id == a.resting_on or aid in scene.stack_closure(b.id):
                continue
            bz0, bz1 = _z_range(scene, b.id)
            if bz1 <= az0 + _Z_TOL or bz0 >= az1 - _Z_TOL:
                continue
            bfp = objs[b.id].footprint
            if not poly.overlaps(a.footprint, bfp):
                continue
            lo, hi = 0.0, travel + 1.0
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if poly.overlaps(a.footprint, poly.translate(bfp, mid * u)):
                    lo = mid
                else:
                    hi = mid
            if move_group(b.id, hi) > 0:
                queue.append(b.id)

    for oid in list(vacated):
        _reveal(objs, objs[oid], vacated[oid])
    return scene.replace_objects(objs[o.id] for o in scene.objects)


def _place_footprint(scene: TabletopScene, o: SceneObject, place) -> np.ndarray:
    target = np.asarray(place, dtype=np.float64)[:2]
    fp = poly.translate(o.footprint, target - o.centroid)
    x0, y0, x1, y1 = scene.table_bounds
    dx = max(x0 - fp[:, 0].min(), 0.0) - max(fp[:, 0].max() - x1, 0.0)
    dy = max(y0 - fp[:, 1].min(), 0.0) - max(fp[:, 1].max() - y1, 0.0)
    return poly.translate(fp, (dx, dy))


def _support_at(scene: TabletopScene, exclude: set[str], fp: np.ndarray) -> str | None:
    """Highest object whose footprint contains the placed centroid."""
    c = poly.centroid(fp)
    best, best_z = None, 0.0
    for other in scene.on_table():
        if other.id in exclude or other.hollow_wall:
            continue
        if poly.contains(other.footprint, c) and scene.top_z(other.id) > best_z:
            best, best_z = other.id, scene.top_z(other.id)
    return best


def apply_grasp_place(scene: TabletopScene, grasp, place) -> TabletopScene:
    """Pick the topmost object under ``grasp`` and drop it centred on ``place``."""
    o = _topmost_at(scene, np.asarray(grasp, dtype=np.float64)[:2])
    _check_graspable(scene, o)
    objs = {x.id: x for x in scene.objects}
    vacated = o.centroid.copy()
    fp = _place_footprint(scene, o, place)
    support = _support_at(scene, {o.id}, fp)
    objs[o.id] = replace(o, footprint=fp, resting_on=support, elevation=None)
    _reveal(objs, objs[o.id], vacated)
    return scene.replace_objects(objs[x.id] for x in scene.objects)


def apply_lift_to_camera(scene: TabletopScene, grasp) -> tuple[TabletopScene, RgbImage]:
    """Lift the grasped object off the table and image its underside."""
    if scene.held is not None:
        raise IllegalState(f"gripper already holds {scene.held!r}")
    o = _topmost_at(scene, np.asarray(grasp, dtype=np.float64)[:2])
    _check_graspable(scene, o)
    objs = {x.id: x for x in scene.objects}
    _reveal(objs, o, o.centroid.copy())
    lifted = scene.replace_objects((objs[x.id] for x in scene.objects), held=o.id)
    return lifted, render_underside(o)


def place_held(scene: TabletopScene, place) -> TabletopScene:
    if scene.held is None:
        raise IllegalState("gripper is empty")
    o = scene.get(scene.held)
    fp = _place_footprint(scene, o, place)
    released = scene.replace_objects(scene.objects, held=None)
    support = _support_at(released, {o.id}, fp)
    return released.with_object(replace(o, footprint=fp, resting_on=support, elevation=None))


def apply_camera_move(scene: TabletopScene, pose, intr: CameraIntrinsics) -> SimObservation:
    return render(scene, pose, intr)


# -- stateful wrapper -----------------------------------------------------------


@dataclass
class TabletopWorld:
    """Owns the evolving scene of one episode and caches renders per pose."""

    scene: TabletopScene
    workspace: WorkspaceConfig = field(default_factory=WorkspaceConfig)
    events: list[str] = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.workspace.intrinsics

    def _key(self, cam: RigidTransform):
        return (cam.rotation.tobytes(), cam.translation.tobytes())

    def observe(self, pose: RobotPose | RigidTransform) -> SimObservation:
        cam = pose.transform if isinstance(pose, RobotPose) else pose
        key = self._key(cam)
        obs = self._cache.get(key)
        if obs is None:
            obs = render(self.scene, cam, self.intrinsics)
            self._cache = {key: obs}
        return obs

    def segment(self, pose: RobotPose | RigidTransform, name: str) -> BinaryMask:
        return segmentation_oracle(self.scene, pose, self.intrinsics, name, self.observe(pose))

    def _set(self, scene: TabletopScene) -> None:
        self.scene = scene
        self._cache = {}

    def push(self, pre, post) -> None:
        self._set(apply_push(self.scene, pre, post))
        self.events.append("push")

    def grasp_place(self, grasp, place) -> None:
        self._set(apply_grasp_place(self.scene, grasp, place))
        self.events.append("grasp_place")

    def lift(self, grasp) -> RgbImage:
        scene, img = apply_lift_to_camera(self.scene, grasp)
        self._set(scene)
        self.events.append("lift")
        return img

    def place_held(self, place) -> None:
        self._set(place_held(self.scene, place))
        self.events.append("place_held")
