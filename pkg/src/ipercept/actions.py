"""Executable robot actions in the base frame (move camera, push, grasp-place, lift)."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .projection import RobotPose


class ActionKind(enum.Enum):
    CAMERA_MOVE = "CameraMove"  # a1
    PUSH = "Push"  # a2
    GRASP_PLACE = "GraspPlace"  # a3
    LIFT_TO_CAMERA = "LiftToCamera"  # a4


CATEGORY = {
    ActionKind.CAMERA_MOVE: "a1",
    ActionKind.PUSH: "a2",
    ActionKind.GRASP_PLACE: "a3",
    ActionKind.LIFT_TO_CAMERA: "a4",
}

_POINTS = {
    ActionKind.CAMERA_MOVE: (),
    ActionKind.PUSH: ("pre", "post"),
    ActionKind.GRASP_PLACE: ("grasp", "place"),
    ActionKind.LIFT_TO_CAMERA: ("grasp",),
}
_POSES = {
    ActionKind.CAMERA_MOVE: ("target_pose",),
    ActionKind.PUSH: (),
    ActionKind.GRASP_PLACE: (),
    ActionKind.LIFT_TO_CAMERA: ("presentation",),
}
_ALL_POINTS = ("pre", "post", "grasp", "place")
_ALL_POSES = ("target_pose", "presentation")


def _vec(v) -> tuple[float, float, float] | None:
    if v is None:
        return None
    a = tuple(float(x) + 0.0 for x in np.asarray(v, dtype=np.float64).reshape(3))
    return a


@dataclass(frozen=True, eq=False)
class Action:
    kind: ActionKind
    pre: tuple[float, float, float] | None = None
    post: tuple[float, float, float] | None = None
    grasp: tuple[float, float, float] | None = None
    place: tuple[float, float, float] | None = None
    target_pose: RobotPose | None = None
    presentation: RobotPose | None = None
    label: str = ""
    target_object: str | None = None

    def __post_init__(self) -> None:
        for name in _ALL_POINTS:
            object.__setattr__(self, name, _vec(getattr(self, name)))
            v = getattr(self, name)
            wanted = name in _POINTS[self.kind]
            if wanted != (v is not None):
                raise ValueError(f"{self.kind.value} action {'needs' if wanted else 'must not have'} {name!r}")
            if v is not None and (not all(math.isfinite(c) for c in v) or v[2] < -1e-9):
                raise ValueError(f"{name} must be finite and on or above the table, got {v}")
        for name in _ALL_POSES:
            wanted = name in _POSES[self.kind]
            if wanted != (getattr(self, name) is not None):
                raise ValueError(f"{self.kind.value} action {'needs' if wanted else 'must not have'} {name!r}")
        if self.target_pose is not None and self.target_pose.position[2] < 0:
            raise ValueError("camera target must be above the table")

    @property
    def category(self) -> str:
        return CATEGORY[self.kind]

    def describe(self) -> str:
        verb = {
            ActionKind.CAMERA_MOVE: "observe (move camera)",
            ActionKind.PUSH: "push",
            ActionKind.GRASP_PLACE: "grasp and place",
            ActionKind.LIFT_TO_CAMERA: "lift to the second camera",
        }[self.kind]
        return f"{verb} {self.label}".strip()

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value}
        for name in _ALL_POINTS:
            v = getattr(self, name)
            if v is not None:
                d[name] = list(v)
        for name in _ALL_POSES:
            v = getattr(self, name)
            if v is not None:
                d[name] = v.to_dict()
        if self.label:
            d["label"] = self.label
        if self.target_object is not None:
            d["target_object"] = self.target_object
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Action:
        kw = {n: d.get(n) for n in _ALL_POINTS}
        for n in _ALL_POSES:
            kw[n] = RobotPose.from_dict(d[n]) if n in d else None
        return cls(ActionKind(d["kind"]), label=d.get("label", ""), target_object=d.get("target_object"), **kw)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Action):
            return NotImplemented
        if (self.kind, self.label, self.target_object) != (other.kind, other.label, other.target_object):
            return False
        if any(getattr(self, n) != getattr(other, n) for n in _ALL_POINTS):
            return False
        for n in _ALL_POSES:
            a, b = getattr(self, n), getattr(other, n)
            if (a is None) != (b is None) or (a is not None and not a.transform.close_to(b.transform, 1e-12)):
                return False
        return True

    __hash__ = None
