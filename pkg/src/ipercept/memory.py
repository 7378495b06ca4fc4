"""Per-episode memory: step records, history prompt rendering and persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .actions import Action
from .annotate import AnnotatedImage, LegendEntry, OverlayKind
from .errors import IPerceptError
from .gateway.records import ActionProposal, PerceptionVerdict
from .gateway.templates import fill, load_template
from .geometry import PixelPoint
from .imaging import RgbImage
from .projection import RobotPose

SCHEMA_VERSION = "ipercept-episode/1"


class MemoryLogError(IPerceptError):
    pass


class NonContiguousStep(MemoryLogError):
    pass


class SchemaVersionMismatch(MemoryLogError):
    pass


class PersistError(MemoryLogError):
    pass


@dataclass(frozen=True, eq=False)
class EpisodeState:
    """Record of one loop iteration.

    ``observation`` is the image the verdict was made on, ``prior_pose`` the
    camera pose of the previous iteration (absent at step 0) and
    ``action_taken`` what was executed in response (absent on the final,
    terminating step or when the step failed).
    """

    step: int
    scene_summary: str
    observation: RgbImage
    enhanced: tuple[AnnotatedImage, ...] = ()
    prior_pose: RobotPose | None = None
    action_taken: Action | None = None
    thought: str = ""
    target_object: str | None = None
    action_analysis: str = ""
    verdict: PerceptionVerdict | None = None
    proposal: ActionProposal | None = None
    secondary_observation: RgbImage | None = None
    note: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "enhanced", tuple(self.enhanced))
        if self.step < 0:
            raise ValueError("step must be non-negative")
        if self.step == 0 and self.prior_pose is not None:
            raise ValueError("step 0 has no prior pose")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EpisodeState):
            return NotImplemented
        plain = (
            "step",
            "scene_summary",
            "observation",
            "enhanced",
            "action_taken",
            "thought",
            "target_object",
            "action_analysis",
            "verdict",
            "proposal",
            "secondary_observation",
            "note",
        )
        if any(getattr(self, k) != getattr(other, k) for k in plain):
            return False
        a, b = self.prior_pose, other.prior_pose
        if (a is None) != (b is None):
            return False
        return a is None or a.transform.close_to(b.transform, 1e-12)

    __hash__ = None


@dataclass(frozen=True)
class MemoryLog:
    query: str
    states: tuple[EpisodeState, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.states)

    def images(self, before: int | None = None) -> list[RgbImage]:
        return [s.observation for s in self.states if before is None or s.step < before]


def append_state(log: MemoryLog, state: EpisodeState) -> MemoryLog:
    if state.step != len(log.states):
        raise NonContiguousStep(f"expected step {len(log.states)}, got {state.step}")
    return MemoryLog(log.query, log.states + (state,))


def render_history_prompt(log: MemoryLog, current_step: int, image_count: int | None = None) -> str:
    """History text for step ``current_step``; reads only states before it."""
    prior = [s for s in log.states if s.step < current_step]
    acted = [s for s in prior if s.action_taken is not None]
    if current_step == 0 or not acted:
        if current_step == 0:
            return load_template("memory_empty")[1]
        return fill("memory_header", time_step=current_step) + "\n(no actions recorded)"
    parts = [fill("memory_header", time_step=current_step)]
    for s in acted:
        parts.append(
            fill(
                "memory_block",
                step=s.step,
                action=s.action_taken.describe(),
                analysis=s.action_analysis or "-",
                thought=s.thought or "-",
                target=s.target_object or s.action_taken.target_object or "-",
            )
        )
    shown = len(prior) if image_count is None else min(image_count, len(prior))
    parts.append(fill("memory_footer", image_count=shown))
    return "\n".join(parts)


# -- persistence -----------------------------------------------------------------


class _ImageStore:
    def __init__(self, root: Path, write: bool):
        self.root = root
        self.write = write

    def put(self, img: RgbImage | None) -> str | None:
        if img is None:
            return None
        name = f"img-{img.digest()[:20]}.png"
        target = self.root / name
        if not target.exists():
            img.save(target)
        return name

    def get(self, name: str | None) -> RgbImage | None:
        if name is None:
            return None
        try:
            return RgbImage.load(self.root / name)
        except FileNotFoundError:
            raise PersistError(f"missing image sidecar {name}") from None


def _annotated_to_dict(a: AnnotatedImage, store: _ImageStore) -> dict:
    return {
        "image": store.put(a.image),
        "base": store.put(a.base),
        "overlay_kind": a.overlay_kind.value,
        "legend": [[e.label, [e.position.x, e.position.y], [e.target.x, e.target.y]] for e in a.legend],
    }


def _annotated_from_dict(d: dict, store: _ImageStore) -> AnnotatedImage:
    legend = tuple(LegendEntry(lbl, PixelPoint(*pos), PixelPoint(*tgt)) for lbl, pos, tgt in d["legend"])
    return AnnotatedImage(store.get(d["image"]), store.get(d["base"]), OverlayKind(d["overlay_kind"]), legend)


def _state_to_dict(s: EpisodeState, store: _ImageStore) -> dict:
    return {
        "step": s.step,
        "scene_summary": s.scene_summary,
        "observation": store.put(s.observation),
        "enhanced": [_annotated_to_dict(a, store) for a in s.enhanced],
        "prior_pose": s.prior_pose.to_dict() if s.prior_pose is not None else None,
        "action_taken": s.action_taken.to_dict() if s.action_taken is not None else None,
        "thought": s.thought,
        "target_object": s.target_object,
        "action_analysis": s.action_analysis,
        "verdict": s.verdict.to_dict() if s.verdict is not None else None,
        "proposal": s.proposal.to_dict() if s.proposal is not None else None,
        "secondary_observation": store.put(s.secondary_observation),
        "note": s.note,
    }


def _state_from_dict(d: dict, store: _ImageStore) -> EpisodeState:
    return EpisodeState(
        step=int(d["step"]),
        scene_summary=d["scene_summary"],
        observation=store.get(d["observation"]),
        enhanced=tuple(_annotated_from_dict(a, store) for a in d.get("enhanced", [])),
        prior_pose=RobotPose.from_dict(d["prior_pose"]) if d.get("prior_pose") else None,
        action_taken=Action.from_dict(d["action_taken"]) if d.get("action_taken") else None,
        thought=d.get("thought", ""),
        target_object=d.get("target_object"),
        action_analysis=d.get("action_analysis", ""),
        verdict=PerceptionVerdict.from_dict(d["verdict"]) if d.get("verdict") else None,
        proposal=ActionProposal.from_dict(d["proposal"]) if d.get("proposal") else None,
        secondary_observation=store.get(d.get("secondary_observation")),
        note=d.get("note", ""),
    )


def manifest_dict(log: MemoryLog, path: str | Path, result: dict | None = None) -> dict:
    """Build the manifest and write image sidecars next to ``path``."""
    root = Path(path).parent
    store = _ImageStore(root, True)
    out = {"version": SCHEMA_VERSION, "query": log.query, "states": [_state_to_dict(s, store) for s in log.states]}
    if result is not None:
        out["result"] = result
    return out


def persist(log: MemoryLog, path: str | Path, result: dict | None = None) -> Path:
    """Write ``path`` (JSON manifest) plus content-addressed PNG sidecars beside it."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        data = manifest_dict(log, path, result)
        path.write_text(json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise PersistError(f"cannot write episode log {path}: {e}") from None
    return path


def load_manifest(path: str | Path) -> tuple[MemoryLog, dict | None]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise PersistError(f"cannot read episode log {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise PersistError(f"episode log {path} is not valid JSON: {e}") from None
    if data.get("version") != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"expected {SCHEMA_VERSION!r}, found {data.get('version')!r}")
    store = _ImageStore(path.parent, False)
    log = MemoryLog(data["query"])
    for sd in data["states"]:
        log = append_state(log, _state_from_dict(sd, store))
    return log, data.get("result")


def load(path: str | Path) -> MemoryLog:
    return load_manifest(path)[0]
