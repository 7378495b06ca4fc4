"""Records produced by the model gateway and the errors it raises."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from ..errors import IPerceptError


class GatewayError(IPerceptError):
    pass


class ParseError(GatewayError):
    """A reply did not follow the requested grammar; ``missing`` names the absent keys."""

    def __init__(self, missing, detail: str = ""):
        self.missing = tuple(missing)
        self.detail = detail
        msg = f"missing: {', '.join(self.missing)}" if self.missing else "unparseable reply"
        super().__init__(f"{msg}{'; ' + detail if detail else ''}")


class InvalidLabel(GatewayError):
    pass


class NoViableAction(GatewayError):
    pass


class WireError(GatewayError):
    pass


class Refusal(GatewayError):
    pass


class ScriptMissing(GatewayError):
    pass


@dataclass(frozen=True)
class PerceptionVerdict:
    resolved: bool
    answer: str | None = None
    objects: tuple[str, ...] = ()
    thought: str = ""
    target_object: str | None = None
    action_analysis: str = ""
    suggested_action: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.resolved != (self.answer is not None) or self.resolved == (self.suggested_action is not None):
            raise ValueError("a verdict is resolved exactly when it has an answer and no suggested action")

    @property
    def scene_summary(self) -> str:
        objs = ", ".join(self.objects)
        return f"{self.thought} Objects: {objs}".strip() if objs else self.thought

    def to_dict(self) -> dict:
        return {
            "resolved": self.resolved,
            "answer": self.answer,
            "objects": list(self.objects),
            "thought": self.thought,
            "target_object": self.target_object,
            "action_analysis": self.action_analysis,
            "suggested_action": self.suggested_action,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PerceptionVerdict:
        return cls(
            d["resolved"],
            d.get("answer"),
            tuple(d.get("objects", ())),
            d.get("thought", ""),
            d.get("target_object"),
            d.get("action_analysis", ""),
            d.get("suggested_action"),
        )


class ProposalKind(enum.Enum):
    GRASP_PLACE = "GraspPlace"
    PUSH = "Push"
    CAMERA_MOVE = "CameraMove"
    LIFT = "Lift"


_REQUIRED = {
    ProposalKind.GRASP_PLACE: {"contact_keypoint", "place_cell"},
    ProposalKind.LIFT: {"contact_keypoint"},
    ProposalKind.PUSH: {"push_line"},
    ProposalKind.CAMERA_MOVE: {"cube_vertex"},
}
_FIELDS = ("contact_keypoint", "place_cell", "push_line", "cube_vertex")


@dataclass(frozen=True)
class ActionProposal:
    kind: ProposalKind
    contact_keypoint: str | None = None
    place_cell: tuple[float, float] | None = None
    push_line: int | None = None
    cube_vertex: tuple[float, float, int, int] | None = None
    rationale: str = ""
    flags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        present = {f for f in _FIELDS if getattr(self, f) is not None}
        if present != _REQUIRED[self.kind]:
            raise ValueError(f"{self.kind.value} proposal needs exactly {sorted(_REQUIRED[self.kind])}, got {sorted(present)}")
        object.__setattr__(self, "flags", tuple(self.flags))

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value}
        for f in _FIELDS:
            v = getattr(self, f)
            if v is not None:
                d[f] = list(v) if isinstance(v, tuple) else v
        if self.rationale:
            d["rationale"] = self.rationale
        if self.flags:
            d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ActionProposal:
        cube = d.get("cube_vertex")
        place = d.get("place_cell")
        return cls(
            ProposalKind(d["kind"]),
            d.get("contact_keypoint"),
            tuple(place) if place is not None else None,
            d.get("push_line"),
            (float(cube[0]), float(cube[1]), int(cube[2]), int(cube[3])) if cube is not None else None,
            d.get("rationale", ""),
            tuple(d.get("flags", ())),
        )
