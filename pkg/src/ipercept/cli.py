"""Command-line entry point: ``ipercept annotate|episode|trials|raig``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .annotate import overlay_grid, overlay_keypoints, overlay_push_lines
from .errors import IPerceptError
from .evaluation import (
    FixtureError,
    emit_report,
    load_scene_file,
    load_script,
    per_task_reports,
    run_trials,
)
from .gateway import VlmGateway
from .gateway.client import VlmConfig, WireClient
from .gateway.records import InvalidLabel, ParseError, Refusal, ScriptMissing, WireError
from .geometry import generate_grasp_keypoints, generate_push_lines, load_mask
from .imaging import RgbImage
from .memory import PersistError, persist
from .policy import ALL_CATEGORIES, EpisodeConfig, OutcomeKind, run_episode
from .projection import RobotPose, WorkspaceConfig
from .raig import HashedBagOfWords, HttpEmbedder, RaigSelector, StoreError, ingest, load_store
from .sim import SceneFileError, TabletopWorld

log = logging.getLogger("ipercept")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_FIXTURE = 2
EXIT_WIRE = 3
EXIT_PARSE = 4

_CODE_BY_ERROR = {
    "FixtureError": EXIT_FIXTURE,
    "SceneFileError": EXIT_FIXTURE,
    "StoreError": EXIT_FIXTURE,
    "ScriptMissing": EXIT_FIXTURE,
    "PersistError": EXIT_FIXTURE,
    "WireError": EXIT_WIRE,
    "Refusal": EXIT_WIRE,
    "ParseError": EXIT_PARSE,
    "InvalidLabel": EXIT_PARSE,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (FixtureError, SceneFileError, StoreError, ScriptMissing, PersistError, FileNotFoundError)):
        return EXIT_FIXTURE
    if isinstance(exc, (WireError, Refusal)):
        return EXIT_WIRE
    if isinstance(exc, (ParseError, InvalidLabel)):
        return EXIT_PARSE
    return EXIT_FAILURE


def _workspace(path: str | None) -> WorkspaceConfig:
    if not path:
        return WorkspaceConfig()
    try:
        return WorkspaceConfig.load(path)
    except (OSError, ValueError, KeyError) as e:
        raise FixtureError(f"cannot read workspace {path}: {e}") from None


def _responder(spec: str, fallback: Path | None = None):
    if spec == "live":
        return WireClient(VlmConfig.from_env())
    if spec == "scripted":
        if fallback is None:
            raise FixtureError("'scripted' needs a script path: use scripted:FILE")
        return load_script(fallback)
    if spec.startswith("scripted:"):
        return load_script(Path(spec.split(":", 1)[1]))
    raise FixtureError(f"unknown responder {spec!r}; expected scripted:FILE or live")


def _whitelist(text: str | None) -> frozenset[str]:
    if not text:
        return ALL_CATEGORIES
    return frozenset(w.strip() for w in text.split(",") if w.strip())


def cmd_annotate(args) -> int:
    img = RgbImage.load(args.image)
    if args.mode == "grid":
        ws = _workspace(args.workspace)
        pose = RobotPose.from_dict(json.loads(Path(args.camera).read_text())) if args.camera else ws.home
        ann = overlay_grid(img, ws.grid(pose.transform), ws.intrinsics)
    else:
        mask = load_mask(args.mask)
        if args.mode == "push":
            ann = overlay_push_lines(img, generate_push_lines(mask, args.clearance))
        else:
            ann = overlay_keypoints(img, generate_grasp_keypoints(mask))
    out = Path(args.out or Path(args.image).with_name(Path(args.image).stem + f"-{args.mode}.png"))
    ann.image.save(out)
    legend = [{"label": e.label, "target": [e.target.x, e.target.y]} for e in ann.legend]
    print(json.dumps({"out": str(out), "legend": legend}, ensure_ascii=False))
    return EXIT_OK


def cmd_episode(args) -> int:
    scene = load_scene_file(args.scene)
    ws = _workspace(args.workspace)
    world = TabletopWorld(scene, ws)
    gateway = VlmGateway(_responder(args.responder))
    cfg = EpisodeConfig(max_iterations=args.max_iters, action_whitelist=_whitelist(args.whitelist), use_raig=bool(args.raig))
    selector = None
    if args.raig:
        selector = RaigSelector(load_store(args.raig), HashedBagOfWords(), gateway, k=args.k, naive=args.naive_raig)
    result = run_episode(cfg, args.query, world, gateway, selector)
    if args.out:
        persist(result.log, Path(args.out) / "episode.json", result.to_dict())
    print(json.dumps(result.to_dict(), indent=2, ensure_ascii=False))
    if result.outcome.kind is OutcomeKind.ERROR:
        return _CODE_BY_ERROR.get(result.outcome.error_kind, EXIT_FAILURE)
    return EXIT_OK


def cmd_trials(args) -> int:
    factory = None
    if args.responder != "scripted":
        factory = lambda task: _responder(args.responder)  # noqa: E731
    records = run_trials(
        args.suite,
        n=args.n,
        jitter=args.jitter,
        rotation_jitter=args.rot_jitter,
        seed=args.seed,
        out_dir=args.out,
        responder_factory=factory,
        tasks=args.tasks.split(",") if args.tasks else None,
    )
    text = emit_report(per_task_reports(records), args.report)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        ext = "txt" if args.report == "table" else args.report
        (Path(args.out) / f"report.{ext}").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _embedder(args):
    if args.embedder == "http":
        cfg = VlmConfig.from_env()
        return HttpEmbedder(cfg.endpoint, args.embed_model or cfg.model, cfg.api_key)
    return HashedBagOfWords()


def cmd_raig(args) -> int:
    if args.raig_cmd == "ingest":
        store = ingest(args.store, _embedder(args))
        print(json.dumps({"examples": len(store), "provider": store.provider, "dim": int(store.vectors.shape[1])}))
        return EXIT_OK
    store = load_store(args.store)
    hits = store.retrieve(_embedder(args).embed(args.text), args.k)
    print(json.dumps([{"id": ex.id, "similarity": s, "action_type": ex.action_type} for ex, s in hits], indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ipercept", description="Interactive perception loop on a simulated tabletop.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    a = sub.add_parser("annotate", help="draw push lines, grasp keypoints or the workspace grid on an image")
    a.add_argument("--image", required=True)
    a.add_argument("--mask", help="mask file (PNG or .mask text); required for push and grasp")
    a.add_argument("--mode", choices=("push", "grasp", "grid"), required=True)
    a.add_argument("--out")
    a.add_argument("--workspace")
    a.add_argument("--camera", help="JSON camera pose for grid mode (default: home pose)")
    a.add_argument("--clearance", type=float, default=10.0)
    a.set_defaults(func=cmd_annotate)

    e = sub.add_parser("episode", help="run one episode on a scene file")
    e.add_argument("--scene", required=True)
    e.add_argument("--query", required=True)
    e.add_argument("--responder", required=True, help="scripted:FILE or live")
    e.add_argument("--whitelist", help="comma-separated subset of a1,a2,a3,a4")
    e.add_argument("--max-iters", type=int, default=5)
    e.add_argument("--workspace")
    e.add_argument("--out", help="directory for the episode manifest")
    e.add_argument("--raig", metavar="STORE", help="enable example retrieval from this store")
    e.add_argument("--naive-raig", action="store_true", help="use the top retrieved example without arbitration")
    e.add_argument("--k", type=int, default=3)
    e.set_defaults(func=cmd_episode)

    t = sub.add_parser("trials", help="run a task suite repeatedly and report metrics")
    t.add_argument("--suite", default="fixtures", help="suite JSON, or 'fixtures' for the bundled one")
    t.add_argument("--n", type=int, default=10)
    t.add_argument("--jitter", type=float, default=0.0, help="position noise bound in metres")
    t.add_argument("--rot-jitter", type=float, default=0.0, help="rotation noise bound in degrees")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--responder", default="scripted", help="scripted (per-task scripts), scripted:FILE or live")
    t.add_argument("--report", choices=("table", "csv", "json"), default="table")
    t.add_argument("--tasks", help="comma-separated task ids")
    t.add_argument("--out", help="directory for episode manifests and the report")
    t.set_defaults(func=cmd_trials)

    r = sub.add_parser("raig", help="build or query an example store")
    rs = r.add_subparsers(dest="raig_cmd", required=True)
    ri = rs.add_parser("ingest")
    ri.add_argument("--store", required=True)
    rr = rs.add_parser("retrieve")
    rr.add_argument("--store", required=True)
    rr.add_argument("--text", required=True)
    rr.add_argument("--k", type=int, default=3)
    for q in (ri, rr):
        q.add_argument("--embedder", choices=("hashed", "http"), default="hashed")
        q.add_argument("--embed-model")
    r.set_defaults(func=cmd_raig)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (IPerceptError, FileNotFoundError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
