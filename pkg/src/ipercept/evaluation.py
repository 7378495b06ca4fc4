"""Trial runner, task metrics and report formatting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import IPerceptError
from .gateway import VlmGateway
from .gateway.client import Responder, ScriptedResponder
from .memory import persist
from .policy import EpisodeConfig, EpisodeResult, OutcomeKind, run_episode
from .projection import WorkspaceConfig
from .sim import polygon as poly
from .sim import TabletopScene, TabletopWorld, jitter_scene, visible_fraction

OSR_MARGIN = 0.1


class EvalError(IPerceptError):
    pass


class NoTrials(EvalError):
    pass


class FixtureError(EvalError):
    pass


@dataclass(frozen=True)
class TrialRecord:
    task_id: str
    trial: int
    outcome: str
    success: bool
    trajectory: tuple[tuple[float, float, float], ...]
    final_position: tuple[float, float, float]
    target_position: tuple[float, float, float]
    steps: int
    answer: str | None = None

    def __post_init__(self) -> None:
        traj = tuple(tuple(float(v) for v in p) for p in self.trajectory)
        if not traj:
            raise ValueError("trajectory must contain at least the home position")
        pts = list(traj) + [tuple(self.final_position), tuple(self.target_position)]
        if any(len(p) != 3 or not all(math.isfinite(float(v)) for v in p) for p in pts):
            raise ValueError("positions must be finite 3-vectors")
        object.__setattr__(self, "trajectory", traj)
        object.__setattr__(self, "final_position", tuple(float(v) for v in self.final_position))
        object.__setattr__(self, "target_position", tuple(float(v) for v in self.target_position))

    @property
    def path_length(self) -> float:
        t = np.asarray(self.trajectory)
        return float(np.linalg.norm(np.diff(t, axis=0), axis=1).sum()) if len(t) > 1 else 0.0

    @property
    def position_error(self) -> float:
        return float(np.linalg.norm(np.subtract(self.final_position, self.target_position)))

    @property
    def closest_approach(self) -> float:
        d = np.linalg.norm(np.asarray(self.trajectory) - np.asarray(self.target_position), axis=1)
        return float(d.min())

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "trial": self.trial,
            "outcome": self.outcome,
            "success": self.success,
            "answer": self.answer,
            "steps": self.steps,
            "trajectory": [list(p) for p in self.trajectory],
            "final_position": list(self.final_position),
            "target_position": list(self.target_position),
        }

    @classmethod
    def from_dict(cls, d: dict) -> TrialRecord:
        return cls(
            d["task_id"],
            int(d["trial"]),
            d["outcome"],
            bool(d["success"]),
            tuple(tuple(p) for p in d["trajectory"]),
            tuple(d["final_position"]),
            tuple(d["target_position"]),
            int(d["steps"]),
            d.get("answer"),
        )


@dataclass(frozen=True)
class MetricsReport:
    sr: float
    tl: float
    tls: float | None
    pe: float
    osr: int
    n_trials: int
    osr_final: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.sr <= 1.0:
            raise ValueError("sr must lie in [0, 1]")
        if self.osr > self.n_trials or self.osr_final > self.n_trials:
            raise ValueError("osr cannot exceed the number of trials")
        if (self.tls is None) != (self.sr == 0.0):
            raise ValueError("tls is present exactly when some trial succeeded")

    def to_dict(self) -> dict:
        return {
            "sr": self.sr,
            "tl": self.tl,
            "tls": self.tls,
            "pe": self.pe,
            "osr": self.osr,
            "osr_final": self.osr_final,
            "n_trials": self.n_trials,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(d["sr"], d["tl"], d["tls"], d["pe"], d["osr"], d["n_trials"], d.get("osr_final", 0))


def compute_metrics(trials: Sequence[TrialRecord], margin: float = OSR_MARGIN) -> MetricsReport:
    """Success rate, trajectory lengths, position error and oracle success count.

    OSR counts trials whose trajectory passes within ``margin`` of the target
    at any point; ``osr_final`` only looks at the final position.
    """
    trials = list(trials)
    if not trials:
        raise NoTrials("metrics need at least one trial")
    n = len(trials)
    wins = [t for t in trials if t.success]
    tls = float(np.mean([t.path_length for t in wins])) if wins else None
    return MetricsReport(
        sr=len(wins) / n,
        tl=float(np.mean([t.path_length for t in trials])),
        tls=tls,
        pe=float(np.mean([t.position_error for t in trials])),
        osr=sum(1 for t in trials if t.closest_approach <= margin),
        n_trials=n,
        osr_final=sum(1 for t in trials if t.position_error <= margin),
    )


# -- report formatting ----------------------------------------------------------


def _m(v: float | None) -> str:
    return "-" if v is None else f"{v:.2f}"


def format_row(r: MetricsReport) -> str:
    return f"{r.sr:.1f}  {{{_m(r.tl)}, {_m(r.tls)}}}  {_m(r.pe)}  {r.osr}"


_CSV_FIELDS = ("task", "sr", "tl", "tls", "pe", "osr", "osr_final", "n_trials")


def emit_report(reports: dict[str, MetricsReport], fmt: str = "table") -> str:
    if fmt == "table":
        width = max([4] + [len(k) for k in reports])
        lines = [f"{'task':<{width}}  SR  {{TL, TLS}}  PE  OSR  (OSR final-only)"]
        for task, r in reports.items():
            lines.append(f"{task:<{width}}  {format_row(r)}  ({r.osr_final})")
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_CSV_FIELDS)
        for task, r in reports.items():
            w.writerow([task, f"{r.sr:.1f}", _m(r.tl), _m(r.tls), _m(r.pe), r.osr, r.osr_final, r.n_trials])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def load_report(text: str) -> dict[str, MetricsReport]:
    return {k: MetricsReport.from_dict(v) for k, v in json.loads(text).items()}


# -- suites -------------------------------------------------------------------------


def bundled_suite() -> Path:
    return Path(str(resources.files("ipercept") / "fixtures" / "suite.json"))


def resolve_suite(name: str | Path) -> Path:
    """``fixtures`` names the bundled suite; anything else is a path."""
    return bundled_suite() if str(name) == "fixtures" else Path(name)


@dataclass(frozen=True)
class TaskSpec:
    id: str
    scene: TabletopScene
    query: str
    script: Path | None
    expected_answer: tuple[str, ...]
    evidence: tuple[dict, ...]
    target_position: tuple[float, float, float]
    config: EpisodeConfig


@dataclass(frozen=True)
class Suite:
    name: str
    workspace: WorkspaceConfig
    tasks: tuple[TaskSpec, ...]
    root: Path = field(default=Path("."))

    def task(self, task_id: str) -> TaskSpec:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise FixtureError(f"no task {task_id!r} in suite {self.name!r}")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FixtureError(f"missing fixture file {path}") from None
    except (OSError, json.JSONDecodeError) as e:
        raise FixtureError(f"unreadable fixture file {path}: {e}") from None


def load_scene_file(path: str | Path) -> TabletopScene:
    d = _read_json(Path(path))
    try:
        return TabletopScene.from_dict(d)
    except Exception as e:
        raise FixtureError(f"invalid scene {path}: {e}") from None


def load_suite(path: str | Path) -> Suite:
    path = resolve_suite(path)
    d = _read_json(path)
    root = path.parent
    try:
        ws = WorkspaceConfig.from_dict(_read_json(root / d["workspace"])) if d.get("workspace") else WorkspaceConfig()
        tasks = []
        for t in d["tasks"]:
            cfg = EpisodeConfig(
                max_iterations=int(t.get("max_iterations", 5)),
                action_whitelist=frozenset(t.get("whitelist", ["a1", "a2", "a3", "a4"])),
            )
            tasks.append(
                TaskSpec(
                    id=t["id"],
                    scene=load_scene_file(root / t["scene"]),
                    query=t["query"],
                    script=root / t["script"] if t.get("script") else None,
                    expected_answer=tuple(t.get("expected_answer", [])),
                    evidence=tuple(t.get("evidence", [])),
                    target_position=tuple(float(v) for v in t["target_position"]),
                    config=cfg,
                )
            )
    except FixtureError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FixtureError(f"invalid suite {path}: {e}") from None
    return Suite(d.get("name", path.stem), ws, tuple(tasks), root)


def load_script(path: Path) -> ScriptedResponder:
    if not path.exists():
        raise FixtureError(f"missing script {path}")
    try:
        return ScriptedResponder.load(path)
    except Exception as e:
        raise FixtureError(f"invalid script {path}: {e}") from None


# -- evidence -------------------------------------------------------------------------


def answer_matches(answer: str | None, expected: Sequence[str]) -> bool:
    if not expected:
        return answer is not None
    a = (answer or "").casefold()
    return any(e.casefold() in a for e in expected)


def check_evidence(ev: dict, world: TabletopWorld, result: EpisodeResult) -> bool:
    """Whether the simulator state backs the answer up."""
    kind = ev.get("type")
    scene = world.scene
    if kind == "visible":
        if scene.get(ev["object"]).hidden:
            return False
        frac = visible_fraction(scene, result.final_pose.transform, world.intrinsics, ev["object"])
        return frac >= float(ev.get("min_fraction", 0.5))
    if kind == "event":
        return ev["event"] in world.events
    if kind == "relative_offset":
        a = scene.get(ev["object"]).centroid
        b = scene.get(ev["reference"]).centroid
        return float(np.linalg.norm((a - b) - np.asarray(ev["offset"], dtype=np.float64))) <= float(ev.get("tol", 0.05))
    if kind == "inside":
        return poly.contains(scene.get(ev["container"]).footprint, scene.get(ev["object"]).centroid)
    if kind == "resting_on":
        return scene.get(ev["object"]).resting_on == ev["support"]
    raise FixtureError(f"unknown evidence type {kind!r}")


# -- running -------------------------------------------------------------------------


def run_task(
    task: TaskSpec,
    workspace: WorkspaceConfig,
    trial: int,
    responder: Responder,
    rng: np.random.Generator | None = None,
    jitter: float = 0.0,
    rotation_jitter: float = 0.0,
    out_dir: Path | None = None,
) -> tuple[TrialRecord, EpisodeResult, TabletopWorld]:
    scene = task.scene
    if rng is not None and (jitter > 0 or rotation_jitter > 0):
        scene = jitter_scene(scene, rng, jitter, rotation_jitter)
    ws = WorkspaceConfig(
        workspace.intrinsics,
        workspace.cells_x,
        workspace.cells_y,
        workspace.cell_size,
        scene.marker_pose,
        workspace.cube,
        workspace.home,
        workspace.presentation,
    )
    world = TabletopWorld(scene, ws)
    result = run_episode(task.config, task.query, world, VlmGateway(responder))
    resolved = result.outcome.kind is OutcomeKind.RESOLVED
    success = (
        resolved
        and answer_matches(result.outcome.answer, task.expected_answer)
        and all(check_evidence(ev, world, result) for ev in task.evidence)
    )
    kind = result.outcome.kind.value
    if result.outcome.error_kind:
        kind = f"{kind}:{result.outcome.error_kind}"
    rec = TrialRecord(
        task.id,
        trial,
        kind,
        success,
        result.trajectory,
        result.trajectory[-1],
        task.target_position,
        result.steps,
        result.outcome.answer,
    )
    if out_dir is not None:
        payload = result.to_dict()
        payload["trial"] = rec.to_dict()
        persist(result.log, Path(out_dir) / task.id / f"trial-{trial:02d}" / "episode.json", payload)
    return rec, result, world


def run_trials(
    suite: Suite | str | Path,
    n: int = 10,
    jitter: float = 0.0,
    rotation_jitter: float = 0.0,
    seed: int = 0,
    out_dir: str | Path | None = None,
    responder_factory: Callable[[TaskSpec], Responder] | None = None,
    tasks: Sequence[str] | None = None,
) -> list[TrialRecord]:
    """Run ``n`` seeded, independently jittered episodes per task."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not isinstance(suite, Suite):
        suite = load_suite(suite)
    chosen = [t for t in suite.tasks if tasks is None or t.id in tasks]
    if tasks is not None and len(chosen) != len(set(tasks)):
        missing = sorted(set(tasks) - {t.id for t in chosen})
        raise FixtureError(f"unknown tasks {missing}")
    records = []
    for ti, task in enumerate(chosen):
        if responder_factory is None and task.script is None:
            raise FixtureError(f"task {task.id!r} has no script and no live responder was given")
        for k in range(n):
            responder = responder_factory(task) if responder_factory else load_script(task.script)
            rng = np.random.default_rng([seed, ti, k])
            rec, _, _ = run_task(task, suite.workspace, k, responder, rng, jitter, rotation_jitter, Path(out_dir) if out_dir else None)
            records.append(rec)
    return records


def per_task_reports(records: Sequence[TrialRecord]) -> dict[str, MetricsReport]:
    by_task: dict[str, list[TrialRecord]] = {}
    for r in records:
        by_task.setdefault(r.task_id, []).append(r)
    return {k: compute_metrics(v) for k, v in by_task.items()}
