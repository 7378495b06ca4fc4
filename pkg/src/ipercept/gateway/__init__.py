"""Model gateway: prompt assembly, transport and reply parsing for each query kind."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

from ..imaging import RgbImage
from .client import ChatTurn, Responder, ScriptedResponder, VlmConfig, WireClient, build_request
from .parser import (
    Grammar,
    format_proposal,
    format_verdict,
    parse_camera,
    parse_grasp,
    parse_push,
    parse_structured_output,
    parse_verdict,
)
from .records import (
    ActionProposal,
    GatewayError,
    InvalidLabel,
    NoViableAction,
    ParseError,
    PerceptionVerdict,
    ProposalKind,
    Refusal,
    ScriptMissing,
    WireError,
)
from .templates import fill, load_template

RETRY_SUFFIX = load_template("retry")[1]
DEFAULT_ACTIONS = "push, grasp, lift, observe"


@dataclass
class Exchange:
    step: int
    op: str
    attempts: int
    reply: str


@dataclass
class VlmGateway:
    """Issues one structured query per call and parses the answer.

    A reply that fails to parse is re-asked up to ``reasks`` times with a
    reminder appended; the last :class:`ParseError` is raised after that.
    """

    responder: Responder
    cfg: VlmConfig = field(default_factory=VlmConfig)
    image_budget: int = 4
    reasks: int = 2
    exchanges: list[Exchange] = field(default_factory=list)

    def ask(self, op: str, step: int, text: str, images: Sequence[RgbImage], parse: Callable[[str], object]):
        turns = [ChatTurn("user", text, tuple(img.to_base64_png() for img in images))]
        err: ParseError | None = None
        for attempt in range(self.reasks + 1):
            reply = self.responder.complete(turns, op, step, attempt)
            try:
                result = parse(reply)
            except ParseError as e:
                err = e
                turns = turns + [ChatTurn("assistant", reply), ChatTurn("user", RETRY_SUFFIX)]
                continue
            self.exchanges.append(Exchange(step, op, attempt + 1, reply))
            return result
        assert err is not None
        raise err

    def _memory_images(self, memory_images: Sequence[RgbImage]) -> list[RgbImage]:
        return list(memory_images)[-self.image_budget :] if self.image_budget > 0 else []

    def analyse_scene(
        self,
        query: str,
        observation: RgbImage,
        memory_text: str,
        memory_images: Sequence[RgbImage] = (),
        step: int = 0,
        secondary: RgbImage | None = None,
        actions: str = DEFAULT_ACTIONS,
    ) -> PerceptionVerdict:
        if not query.strip():
            raise GatewayError("query must not be empty")
        text = fill("analyser", query=query, actions=actions, history=memory_text, output_format=load_template("output_format")[1])
        images = self._memory_images(memory_images) + [observation] + ([secondary] if secondary is not None else [])
        return self.ask("analyse", step, text, images, parse_verdict)

    def propose_grasp(
        self,
        query: str,
        target: str,
        observation: RgbImage,
        grid_image: RgbImage,
        keypoint_image: RgbImage,
        history_text: str,
        step: int = 0,
        secondary: RgbImage | None = None,
    ) -> ActionProposal:
        text = fill("grasp", query=query, target=target, history=history_text)
        images = [observation, grid_image, keypoint_image] + ([secondary] if secondary is not None else [])
        return self.ask("grasp", step, text, images, parse_grasp)

    def propose_lift(self, query: str, target: str, observation: RgbImage, keypoint_image: RgbImage, history_text: str, step: int = 0) -> ActionProposal:
        text = fill("lift", query=query, target=target, history=history_text)
        return self.ask("lift", step, text, [observation, keypoint_image], lambda r: parse_grasp(r, require_place=False))

    def propose_push(
        self,
        query: str,
        target: str,
        observation: RgbImage,
        push_image: RgbImage,
        offered: Sequence[int],
        history_text: str,
        step: int = 0,
    ) -> ActionProposal:
        offered = tuple(offered)
        if not 1 <= len(offered) <= 6:
            raise GatewayError(f"between 1 and 6 strokes must be offered, got {len(offered)}")
        labels = ", ".join(f"P{k}→D{k}" for k in offered)
        text = fill("push", query=query, target=target, offered=labels, history=history_text)
        return self.ask("push", step, text, [observation, push_image], lambda r: parse_push(r, offered))

    def propose_camera_pose(
        self,
        query: str,
        cube_image: RgbImage,
        visited: Sequence[tuple[float, float, int, int]],
        history_text: str,
        step: int = 0,
    ) -> ActionProposal:
        shown = "; ".join(f"({x:.1f}, {y:.1f}, {z}, {o})" for x, y, z, o in visited) or "none yet"
        text = fill("camera", query=query, visited=shown, history=history_text)
        prop = self.ask("camera", step, text, [cube_image], parse_camera)
        if any(tuple(v) == prop.cube_vertex for v in visited):
            prop = replace(prop, flags=prop.flags + ("revisit",))
        return prop
