"""Tabletop scene model and its JSON file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import IPerceptError
from ..projection import RigidTransform
from . import polygon as poly


class SceneError(IPerceptError):
    pass


class SceneFileError(SceneError):
    pass


@dataclass(frozen=True, eq=False)
class SceneObject:
    """One rigid prism on the table.

    ``elevation`` overrides the base height derived from ``resting_on``; it is
    used for slabs propped above the table (an inclined book is approximated
    by a raised slab). ``hollow_wall`` makes the prism an open-topped
    container with walls of that thickness.
    """

    id: str
    name: str
    footprint: np.ndarray
    height: float
    color: tuple[int, int, int]
    top_text: str = ""
    bottom_text: str = ""
    resting_on: str | None = None
    hidden_payload: str | None = None
    hidden: bool = False
    elevation: float | None = None
    hollow_wall: float | None = None

    def __post_init__(self) -> None:
        fp = poly.as_ccw(self.footprint)
        if len(fp) < 3 or not poly.is_convex(fp):
            raise SceneError(f"object {self.id!r}: footprint must be a convex polygon")
        if poly.area(fp) <= 1e-8:
            raise SceneError(f"object {self.id!r}: degenerate footprint")
        if not self.height > 0:
            raise SceneError(f"object {self.id!r}: height must be positive")
        fp.setflags(write=False)
        object.__setattr__(self, "footprint", fp)
        object.__setattr__(self, "color", tuple(int(c) for c in self.color))

    @property
    def centroid(self) -> np.ndarray:
        return poly.centroid(self.footprint)

    def moved(self, delta) -> SceneObject:
        return replace(self, footprint=poly.translate(self.footprint, delta))

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "name": self.name,
            "footprint": [[round(float(x), 12), round(float(y), 12)] for x, y in self.footprint],
            "height": self.height,
            "color": list(self.color),
        }
        for k in ("top_text", "bottom_text"):
            if getattr(self, k):
                d[k] = getattr(self, k)
        for k in ("resting_on", "hidden_payload", "elevation", "hollow_wall"):
            if getattr(self, k) is not None:
                d[k] = getattr(self, k)
        if self.hidden:
            d["hidden"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SceneObject:
        try:
            if "footprint" in d:
                fp = np.asarray(d["footprint"], dtype=np.float64)
            elif "box" in d:
                b = d["box"]
                fp = poly.box(b["center"], b["size"], b.get("angle_deg", 0.0))
            elif "ngon" in d:
                g = d["ngon"]
                fp = poly.ngon(g["center"], g["radius"], g.get("sides", 12), g.get("angle_deg", 0.0))
            else:
                raise SceneFileError(f"object {d.get('id')!r} has no footprint")
            return cls(
                id=str(d["id"]),
                name=str(d.get("name", d["id"])),
                footprint=fp,
                height=float(d["height"]),
                color=tuple(d.get("color", (128, 128, 128))),
                top_text=d.get("top_text", ""),
                bottom_text=d.get("bottom_text", ""),
                resting_on=d.get("resting_on"),
                hidden_payload=d.get("hidden_payload"),
                hidden=bool(d.get("hidden", False)),
                elevation=d.get("elevation"),
                hollow_wall=d.get("hollow_wall"),
            )
        except KeyError as e:
            raise SceneFileError(f"object entry missing field {e}") from None


@dataclass(frozen=True, eq=False)
class TabletopScene:
    objects: tuple[SceneObject, ...]
    table_bounds: tuple[float, float, float, float] = (0.15, -0.35, 0.85, 0.35)
    light_direction: tuple[float, float] = (0.6, -0.8)
    light_elevation_deg: float = 45.0
    marker_pose: RigidTransform = field(default_factory=lambda: RigidTransform.from_translation((0.25, -0.25, 0.0)))
    seed: int = 0
    grasp_clearance: float = 0.0
    held: str | None = None
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise SceneError("object ids must be unique")
        known = set(ids)
        for o in self.objects:
            for ref in (o.resting_on, o.hidden_payload):
                if ref is not None and ref not in known:
                    raise SceneError(f"object {o.id!r} references unknown id {ref!r}")
        for o in self.objects:
            seen = {o.id}
            cur = o
            while cur.resting_on is not None:
                if cur.resting_on in seen:
                    raise SceneError(f"stacking cycle through {o.id!r}")
                seen.add(cur.resting_on)
                cur = self.get(cur.resting_on)
        d = np.asarray(self.light_direction, dtype=np.float64)
        n = float(np.linalg.norm(d))
        if n < 1e-12:
            raise SceneError("light direction must be non-zero")
        object.__setattr__(self, "light_direction", tuple(float(v) for v in d / n))
        if self.held is not None and self.held not in known:
            raise SceneError(f"held object {self.held!r} not in scene")

    # -- lookup ---------------------------------------------------------------

    def get(self, oid: str) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def index(self, oid: str) -> int:
        for i, o in enumerate(self.objects):
            if o.id == oid:
                return i
        raise KeyError(oid)

    def on_table(self) -> list[SceneObject]:
        """Objects that take part in rendering and contact: not hidden, not held."""
        return [o for o in self.objects if not o.hidden and o.id != self.held]

    def base_z(self, oid: str) -> float:
        o = self.get(oid)
        if o.elevation is not None:
            return float(o.elevation)
        if o.resting_on is not None:
            return self.top_z(o.resting_on)
        return 0.0

    def top_z(self, oid: str) -> float:
        return self.base_z(oid) + self.get(oid).height

    def supported_by(self, oid: str) -> list[SceneObject]:
        return [o for o in self.on_table() if o.resting_on == oid]

    def stack_closure(self, oid: str) -> list[str]:
        """``oid`` plus everything transitively resting on it."""
        out = [oid]
        k = 0
        while k < len(out):
            out.extend(o.id for o in self.objects if o.resting_on == out[k] and o.id not in out)
            k += 1
        return out

    def within_bounds(self, fp: np.ndarray, tol: float = 1e-9) -> bool:
        x0, y0, x1, y1 = self.table_bounds
        return bool(
            fp[:, 0].min() >= x0 - tol and fp[:, 0].max() <= x1 + tol and fp[:, 1].min() >= y0 - tol and fp[:, 1].max() <= y1 + tol
        )

    def visible_count(self) -> int:
        return len(self.on_table())

    # -- functional updates ---------------------------------------------------

    def replace_objects(self, objs: Iterable[SceneObject], **kw) -> TabletopScene:
        return replace(self, objects=tuple(objs), **kw)

    def with_object(self, new: SceneObject) -> TabletopScene:
        return self.replace_objects(new if o.id == new.id else o for o in self.objects)

    # -- serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "table": {"bounds": list(self.table_bounds)},
            "light": {"direction": list(self.light_direction), "elevation_deg": self.light_elevation_deg},
            "marker_pose": self.marker_pose.to_dict(),
            "seed": self.seed,
            "objects": [o.to_dict() for o in self.objects],
        }
        if self.grasp_clearance:
            d["grasp_clearance"] = self.grasp_clearance
        if self.held is not None:
            d["held"] = self.held
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TabletopScene:
        try:
            objs = tuple(SceneObject.from_dict(o) for o in d["objects"])
        except (TypeError, ValueError) as e:
            raise SceneFileError(f"bad object entry: {e}") from None
        except KeyError as e:
            raise SceneFileError(f"scene missing field {e}") from None
        kw = {}
        if "table" in d:
            kw["table_bounds"] = tuple(float(v) for v in d["table"]["bounds"])
        if "light" in d:
            kw["light_direction"] = tuple(d["light"].get("direction", (0.6, -0.8)))
            kw["light_elevation_deg"] = float(d["light"].get("elevation_deg", 45.0))
        if "marker_pose" in d:
            kw["marker_pose"] = RigidTransform.from_dict(d["marker_pose"])
        scene = cls(
            objs,
            seed=int(d.get("seed", 0)),
            grasp_clearance=float(d.get("grasp_clearance", 0.0)),
            held=d.get("held"),
            name=d.get("name", ""),
            **kw,
        )
        for o in scene.objects:
            if not scene.within_bounds(o.footprint):
                raise SceneFileError(f"object {o.id!r} lies outside the table bounds")
        return scene

    @classmethod
    def load(cls, path: str | Path) -> TabletopScene:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise SceneFileError(f"scene file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise SceneFileError(f"scene file {path} is not valid JSON: {e}") from None
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _shift_inside(scene: TabletopScene, fp: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = scene.table_bounds
    dx = max(x0 - fp[:, 0].min(), 0.0) - max(fp[:, 0].max() - x1, 0.0)
    dy = max(y0 - fp[:, 1].min(), 0.0) - max(fp[:, 1].max() - y1, 0.0)
    return np.array([dx, dy])


def jitter_scene(scene: TabletopScene, rng: np.random.Generator, position: float, rotation_deg: float = 0.0) -> TabletopScene:
    """Uniformly perturb every free-standing stack as a rigid group.

    Each root object (nothing beneath it) draws ``dx, dy ~ U(-position, position)``
    and ``theta ~ U(-rotation_deg, rotation_deg)``; everything resting on it
    follows. Hidden payloads are re-placed when revealed, so they stay put.
    Groups are nudged back inside the table bounds.
    """
    if position <= 0 and rotation_deg <= 0:
        return scene
    objs = {o.id: o for o in scene.objects}
    for root in scene.objects:
        if root.resting_on is not None or root.hidden:
            continue
        dx, dy = rng.uniform(-position, position, size=2) if position > 0 else (0.0, 0.0)
        th = float(rng.uniform(-rotation_deg, rotation_deg)) if rotation_deg > 0 else 0.0
        group = scene.stack_closure(root.id)
        pivot = root.centroid
        moved = {}
        for gid in group:
            fp = objs[gid].footprint
            if th:
                fp = poly.rotate(fp, th, pivot)
            moved[gid] = poly.translate(fp, (dx, dy))
        corr = _shift_inside(scene, moved[root.id])
        for gid in group:
            objs[gid] = replace(objs[gid], footprint=poly.translate(moved[gid], corr))
    return scene.replace_objects(objs[o.id] for o in scene.objects)
