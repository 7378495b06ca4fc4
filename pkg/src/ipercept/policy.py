"""The perception-action loop: analyse, enhance, propose, dispatch, observe."""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .actions import Action, ActionKind
from .annotate import AnnotatedImage, overlay_grid, overlay_keypoints, overlay_push_lines, zoom_crop
from .errors import IPerceptError
from .gateway import ActionProposal, NoViableAction, PerceptionVerdict, ProposalKind, VlmGateway
from .geometry import BinaryMask, KeypointSet, PushLine, compute_centroid, generate_grasp_keypoints, generate_push_lines
from .imaging import RgbImage
from .memory import EpisodeState, MemoryLog, append_state, render_history_prompt
from .projection import (
    RigidTransform,
    RobotPose,
    VirtualGrid,
    WorkspaceConfig,
    backproject,
    camera_pose_for_cube_vertex,
    depth_at_centroid,
    image_to_workspace,
)


class PolicyError(IPerceptError):
    pass


class UnknownActionToken(PolicyError):
    pass


class LabelNotOffered(PolicyError):
    pass


class MissingTarget(PolicyError):
    pass


ALL_CATEGORIES = frozenset({"a1", "a2", "a3", "a4"})

ACTION_TOKENS = {
    "observe": "a1",
    "move": "a1",
    "camera": "a1",
    "look": "a1",
    "view": "a1",
    "go_to": "a1",
    "reach": "a1",
    "push": "a2",
    "pull": "a2",
    "slide": "a2",
    "grasp": "a3",
    "pick": "a3",
    "pick_up": "a3",
    "place": "a3",
    "lift": "a4",
}


class EoKind(enum.Enum):
    PUSHLINES = "Pushlines"
    KEYPOINTS = "Keypoints"
    CUBE = "Cube"


_EO_FOR = {"a1": EoKind.CUBE, "a2": EoKind.PUSHLINES, "a3": EoKind.KEYPOINTS, "a4": EoKind.KEYPOINTS}


@dataclass(frozen=True)
class EpisodeConfig:
    max_iterations: int = 5
    action_whitelist: frozenset[str] = ALL_CATEGORIES
    clearance: float = 10.0
    displacement: float | None = None
    zoom: float = 1.0
    image_budget: int = 4
    use_raig: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "action_whitelist", frozenset(self.action_whitelist))
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.action_whitelist or not self.action_whitelist <= ALL_CATEGORIES:
            raise ValueError(f"whitelist must be a non-empty subset of {sorted(ALL_CATEGORIES)}")

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "action_whitelist": sorted(self.action_whitelist),
            "clearance": self.clearance,
            "displacement": self.displacement,
            "zoom": self.zoom,
            "image_budget": self.image_budget,
            "use_raig": self.use_raig,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EpisodeConfig:
        kw = dict(d)
        if "action_whitelist" in kw:
            kw["action_whitelist"] = frozenset(kw["action_whitelist"])
        return cls(**kw)


class OutcomeKind(enum.Enum):
    RESOLVED = "Resolved"
    ITERATION_LIMIT = "IterationLimit"
    NO_VIABLE_ACTION = "NoViableAction"
    ERROR = "Error"


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    answer: str | None = None
    error_kind: str | None = None
    message: str = ""

    def __post_init__(self) -> None:
        if (self.kind is OutcomeKind.RESOLVED) != bool(self.answer):
            raise ValueError("an outcome is Resolved exactly when it carries a non-empty answer")

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value}
        if self.answer is not None:
            d["answer"] = self.answer
        if self.error_kind is not None:
            d["error_kind"] = self.error_kind
        if self.message:
            d["message"] = self.message
        return d


@dataclass(frozen=True)
class Continue:
    pass


@dataclass(frozen=True)
class Stop:
    outcome: Outcome


def check_termination(step: int, verdict: PerceptionVerdict, cfg: EpisodeConfig) -> Continue | Stop:
    if verdict.resolved:
        return Stop(Outcome(OutcomeKind.RESOLVED, answer=verdict.answer))
    if step >= cfg.max_iterations:
        return Stop(Outcome(OutcomeKind.ITERATION_LIMIT))
    return Continue()


def action_category(token_text: str | None, whitelist=ALL_CATEGORIES) -> str:
    """Category a1..a4 for the first recognised action word, limited to ``whitelist``.

    When the requested category is not allowed the lowest allowed category
    is used instead (the single-action ablations have exactly one).
    """
    words = re.findall(r"[a-z_]+", (token_text or "").lower())
    cat = next((ACTION_TOKENS[w] for w in words if w in ACTION_TOKENS), None)
    if cat is None:
        raise UnknownActionToken(f"no known action in {token_text!r}")
    allowed = frozenset(whitelist)
    if cat in allowed:
        return cat
    return min(allowed)


def select_eo_kind(verdict: PerceptionVerdict, whitelist=ALL_CATEGORIES) -> EoKind:
    return _EO_FOR[action_category(verdict.suggested_action, whitelist)]


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    outcome: Outcome
    steps: int
    trajectory: tuple[tuple[float, float, float], ...]
    final_pose: RobotPose
    log: MemoryLog

    def __post_init__(self) -> None:
        if not self.trajectory:
            raise ValueError("trajectory starts at the home pose and is never empty")

    @property
    def path_length(self) -> float:
        t = np.asarray(self.trajectory, dtype=np.float64)
        return float(np.linalg.norm(np.diff(t, axis=0), axis=1).sum()) if len(t) > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome.to_dict(),
            "steps": self.steps,
            "trajectory": [list(p) for p in self.trajectory],
            "path_length": self.path_length,
            "final_pose": self.final_pose.to_dict(),
        }


class World(Protocol):
    workspace: WorkspaceConfig

    def observe(self, pose): ...
    def segment(self, pose, name: str) -> BinaryMask: ...
    def push(self, pre, post) -> None: ...
    def grasp_place(self, grasp, place) -> None: ...
    def lift(self, grasp) -> RgbImage: ...
    def place_held(self, place) -> None: ...


# -- dispatch --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DispatchContext:
    """What the dispatcher needs from the current observation."""

    workspace: WorkspaceConfig
    camera: RigidTransform
    depth: np.ndarray
    mask: BinaryMask | None = None
    push_lines: tuple[PushLine, ...] = ()
    keypoints: KeypointSet | None = None
    target_object: str | None = None

    @property
    def grid(self) -> VirtualGrid:
        return self.workspace.grid(self.camera)


def _object_top(ctx: DispatchContext) -> float:
    """Base-frame height of the target's visible top from the masked depth."""
    c = compute_centroid(ctx.mask)
    d = depth_at_centroid(ctx.depth, c, mask=ctx.mask)
    p = ctx.camera.apply(backproject(ctx.workspace.intrinsics, c, d))
    return max(float(p[2]), 0.0)


def _surface_point(ctx: DispatchContext, pixel) -> np.ndarray:
    d = depth_at_centroid(ctx.depth, pixel, mask=ctx.mask)
    return ctx.camera.apply(backproject(ctx.workspace.intrinsics, pixel, d))


def dispatch_action(proposal: ActionProposal, ctx: DispatchContext) -> Action:
    ws = ctx.workspace
    if proposal.kind is ProposalKind.PUSH:
        line = next((ln for ln in ctx.push_lines if ln.label_index == proposal.push_line), None)
        if line is None:
            raise LabelNotOffered(f"push line {proposal.push_line} was not offered")
        top = _object_top(ctx)
        grid = ctx.grid
        pre = image_to_workspace(ws.intrinsics, line.pre_contact, grid.anchor, ctx.camera, plane_offset=top)
        post = image_to_workspace(ws.intrinsics, line.post_contact, grid.anchor, ctx.camera, plane_offset=top)
        z = 0.5 * top
        return Action(
            ActionKind.PUSH,
            pre=(pre[0], pre[1], z),
            post=(post[0], post[1], z),
            label=f"P{line.label_index}→D{line.label_index}",
            target_object=ctx.target_object,
        )
    if proposal.kind in (ProposalKind.GRASP_PLACE, ProposalKind.LIFT):
        if ctx.keypoints is None:
            raise LabelNotOffered("no keypoints were offered")
        try:
            px = ctx.keypoints.point(proposal.contact_keypoint)
        except KeyError:
            raise LabelNotOffered(f"keypoint {proposal.contact_keypoint} was not offered") from None
        grasp = _surface_point(ctx, px)
        grasp[2] = max(grasp[2], 0.0)
        if proposal.kind is ProposalKind.LIFT:
            return Action(
                ActionKind.LIFT_TO_CAMERA,
                grasp=grasp,
                presentation=ws.presentation,
                label=proposal.contact_keypoint,
                target_object=ctx.target_object,
            )
        gx, gy = proposal.place_cell
        on_plane = ws.marker_pose.apply(ctx.grid.grid_to_marker(gx, gy))
        place = (on_plane[0], on_plane[1], _object_top(ctx))
        return Action(
            ActionKind.GRASP_PLACE,
            grasp=grasp,
            place=place,
            label=f"{proposal.contact_keypoint} to [{gx:.1f}; {gy:.1f}]",
            target_object=ctx.target_object,
        )
    x, y, z, o = proposal.cube_vertex
    grid = VirtualGrid(RigidTransform.identity(), ws.cells_x, ws.cells_y, ws.cell_size, ws.cell_size)
    pose = camera_pose_for_cube_vertex(ws.cube, x, y, z, o, ws.marker_pose, grid)
    return Action(ActionKind.CAMERA_MOVE, target_pose=pose, label=f"({x:.1f}, {y:.1f}, {z}, {o})", target_object=ctx.target_object)


# -- the loop --------------------------------------------------------------------


class _Selector(Protocol):
    def choose(self, query: str, image: RgbImage, verdict: PerceptionVerdict, step: int) -> tuple[str, str | None]: ...


@dataclass
class _Iteration:
    """Mutable scratch for one pass of the loop."""

    enhanced: list[AnnotatedImage] = field(default_factory=list)
    proposal: ActionProposal | None = None
    action: Action | None = None
    secondary: RgbImage | None = None
    target: str | None = None


def _present(img: RgbImage, ann_fn, mask: BinaryMask, zoom: float):
    """Annotate, optionally on a zoomed crop centred on the mask."""
    if zoom <= 1.0:
        return ann_fn(img, lambda p: p)
    crop, win = zoom_crop(img, compute_centroid(mask), zoom)
    return ann_fn(crop, win.from_source)


def _remap_lines(lines, f):
    return [PushLine(ln.label_index, f(ln.pre_contact), f(ln.post_contact), ln.kind) for ln in lines]


def _remap_keypoints(kps: KeypointSet, f) -> KeypointSet:
    return KeypointSet(tuple(f(p) for p in kps.boundary_points), f(kps.centroid_point))


def run_episode(
    cfg: EpisodeConfig,
    query: str,
    world: World,
    gateway: VlmGateway,
    selector: _Selector | None = None,
) -> EpisodeResult:
    """Run the loop until the query is answered, the cap is hit or a step fails."""
    ws = world.workspace
    pose = ws.home
    trajectory = [tuple(float(v) for v in pose.position)]
    log = MemoryLog(query)
    prior_pose: RobotPose | None = None
    secondary: RgbImage | None = None
    visited: list[tuple[float, float, int, int]] = []
    actions_done = 0
    outcome: Outcome | None = None
    step = 0
    while outcome is None:
        obs = world.observe(pose)
        it = _Iteration()
        verdict = None
        note = ""
        try:
            history = render_history_prompt(log, step, cfg.image_budget)
            verdict = gateway.analyse_scene(query, obs.rgb, history, log.images(step), step, secondary)
            term = check_termination(step, verdict, cfg)
            if isinstance(term, Stop):
                outcome = term.outcome
            else:
                it.target = verdict.target_object
                token = verdict.suggested_action
                if cfg.use_raig and selector is not None:
                    token, chosen_target = selector.choose(query, obs.rgb, verdict, step)
                    it.target = chosen_target or it.target
                cat = action_category(token, cfg.action_whitelist)
                _propose_and_act(cat, cfg, query, world, gateway, obs, pose, history, step, visited, it)
        except NoViableAction as e:
            outcome = Outcome(OutcomeKind.NO_VIABLE_ACTION, message=str(e))
            note = "no viable action"
        except IPerceptError as e:
            outcome = Outcome(OutcomeKind.ERROR, error_kind=type(e).__name__, message=str(e))
            note = f"{type(e).__name__}: {e}"

        if it.action is not None:
            actions_done += 1
            trajectory.extend(_waypoints(it.action, pose))
        log = append_state(
            log,
            EpisodeState(
                step=step,
                scene_summary=verdict.scene_summary if verdict else "",
                observation=obs.rgb,
                enhanced=tuple(it.enhanced),
                prior_pose=prior_pose,
                action_taken=it.action,
                thought=verdict.thought if verdict else "",
                target_object=it.target or (verdict.target_object if verdict else None),
                action_analysis=verdict.action_analysis if verdict else "",
                verdict=verdict,
                proposal=it.proposal,
                secondary_observation=it.secondary,
                note=note,
            ),
        )
        if outcome is not None:
            break
        prior_pose = pose
        if it.action is not None and it.action.kind is ActionKind.CAMERA_MOVE:
            pose = it.action.target_pose
        secondary = it.secondary
        step += 1
    return EpisodeResult(outcome, actions_done, tuple(trajectory), pose, log)


def _waypoints(action: Action, pose: RobotPose) -> list[tuple[float, float, float]]:
    """End-effector positions visited by ``action``, ending back at the observation pose."""
    if action.kind is ActionKind.CAMERA_MOVE:
        pts = [action.target_pose.position]
    elif action.kind is ActionKind.PUSH:
        pts = [action.pre, action.post, pose.position]
    elif action.kind is ActionKind.GRASP_PLACE:
        pts = [action.grasp, action.place, pose.position]
    else:
        pts = [action.grasp, action.presentation.position, action.grasp, pose.position]
    return [tuple(float(v) for v in p) for p in pts]


def _propose_and_act(cat, cfg, query, world, gateway: VlmGateway, obs, pose, history, step, visited, it: _Iteration) -> None:
    ws = world.workspace
    cam = obs.camera_pose
    if cat == "a1":
        cube = overlay_grid(obs.rgb, ws.grid(cam), ws.intrinsics, layers=ws.cube.layer_heights)
        it.enhanced.append(cube)
        prop = gateway.propose_camera_pose(query, cube.image, visited, history, step)
        it.proposal = prop
        ctx = DispatchContext(ws, cam, obs.depth, target_object=it.target)
        it.action = dispatch_action(prop, ctx)
        visited.append(prop.cube_vertex)
        return
    if not it.target:
        raise MissingTarget("the verdict names no target object to act on")
    mask = world.segment(pose, it.target)
    if cat == "a2":
        lines = generate_push_lines(mask, cfg.clearance, cfg.displacement)
        ann = _present(obs.rgb, lambda im, f: overlay_push_lines(im, _remap_lines(lines, f)), mask, cfg.zoom)
        it.enhanced.append(ann)
        prop = gateway.propose_push(query, it.target, obs.rgb, ann.image, [ln.label_index for ln in lines], history, step)
        it.proposal = prop
        ctx = DispatchContext(ws, cam, obs.depth, mask, tuple(lines), target_object=it.target)
        it.action = dispatch_action(prop, ctx)
        world.push(it.action.pre, it.action.post)
        return
    kps = generate_grasp_keypoints(mask)
    ann = _present(obs.rgb, lambda im, f: overlay_keypoints(im, _remap_keypoints(kps, f)), mask, cfg.zoom)
    ctx = DispatchContext(ws, cam, obs.depth, mask, keypoints=kps, target_object=it.target)
    if cat == "a3":
        grid = overlay_grid(obs.rgb, ws.grid(cam), ws.intrinsics)
        it.enhanced.extend([grid, ann])
        prop = gateway.propose_grasp(query, it.target, obs.rgb, grid.image, ann.image, history, step)
        it.proposal = prop
        it.action = dispatch_action(prop, ctx)
        world.grasp_place(it.action.grasp, it.action.place)
        return
    it.enhanced.append(ann)
    prop = gateway.propose_lift(query, it.target, obs.rgb, ann.image, history, step)
    it.proposal = prop
    it.action = dispatch_action(prop, ctx)
    it.secondary = world.lift(it.action.grasp)
    # the object goes back where it was picked up
    world.place_held(it.action.grasp)
