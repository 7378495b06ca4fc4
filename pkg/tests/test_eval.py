import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES, rect_mask
from oracles import path_length_fold

from ipercept import cli
from ipercept.evaluation import (
    FixtureError,
    MetricsReport,
    NoTrials,
    TrialRecord,
    bundled_suite,
    compute_metrics,
    emit_report,
    format_row,
    load_report,
    load_suite,
    per_task_reports,
    run_trials,
)
from ipercept.geometry import save_mask
from ipercept.imaging import RgbImage


def rec(success, traj, target=(0.0, 0.0, 0.0), task="T", trial=0):
    traj = tuple(tuple(map(float, p)) for p in traj)
    return TrialRecord(task, trial, "Resolved" if success else "IterationLimit", success, traj, traj[-1], target, len(traj) - 1)


# -- metric arithmetic -------------------------------------------------------------


def test_nine_of_ten_is_point_nine():
    trials = [rec(i < 9, [(0, 0, 0), (1, 0, 0)]) for i in range(10)]
    r = compute_metrics(trials)
    assert r.sr == 0.9 and r.n_trials == 10
    assert format_row(r).startswith("0.9  {1.00, 1.00}")


def test_position_error_example():
    r = compute_metrics([rec(True, [(0.5, 0.2, 0.1)], target=(0.5, 0.2, 0.5))])
    assert r.pe == pytest.approx(0.4, abs=1e-12)
    assert format_row(r) == "1.0  {0.00, 0.00}  0.40  0"


def test_osr_margin_boundary():
    near = rec(False, [(0, 0, 0.5), (0.09, 0, 0), (0, 0, 0.5)])
    far = rec(False, [(0, 0, 0.5), (0.11, 0, 0), (0, 0, 0.5)])
    assert compute_metrics([near]).osr == 1
    assert compute_metrics([far]).osr == 0
    # the final position alone is 0.5 m away, so the final-only count misses both
    assert compute_metrics([near, far]).osr_final == 0


def test_zero_successes_shows_dash():
    trials = [rec(False, [(0, 0, 0), (3.88, 0, 0)]) for _ in range(3)]
    r = compute_metrics(trials)
    assert r.tls is None and r.sr == 0.0
    assert "{3.88, -}" in format_row(r)


def test_table_row_layout():
    r = MetricsReport(0.5, 1.96, 1.34, 0.60, 4, 10)
    assert format_row(r) == "0.5  {1.96, 1.34}  0.60  4"


def test_no_trials():
    with pytest.raises(NoTrials):
        compute_metrics([])


def test_report_invariants():
    with pytest.raises(ValueError):
        MetricsReport(1.2, 0, 0, 0, 0, 1)
    with pytest.raises(ValueError):
        MetricsReport(0.5, 0, None, 0, 0, 2)
    with pytest.raises(ValueError):
        MetricsReport(0.0, 0, None, 0, 3, 2)
    with pytest.raises(ValueError):
        TrialRecord("T", 0, "x", False, (), (0, 0, 0), (0, 0, 0), 0)
    with pytest.raises(ValueError):
        TrialRecord("T", 0, "x", False, ((0, 0, math.nan),), (0, 0, 0), (0, 0, 0), 0)


def _fold_metrics(trials, margin=0.1):
    n = len(trials)
    wins = [t for t in trials if t.success]
    lengths = [path_length_fold(t.trajectory) for t in trials]
    win_lengths = [path_length_fold(t.trajectory) for t in wins]
    pe = [math.dist(t.final_position, t.target_position) for t in trials]
    osr = sum(1 for t in trials if min(math.dist(p, t.target_position) for p in t.trajectory) <= margin)
    return (
        len(wins) / n,
        sum(lengths) / n,
        sum(win_lengths) / len(wins) if wins else None,
        sum(pe) / n,
        osr,
    )


def _random_trials(rng):
    out = []
    for i in range(int(rng.integers(1, 12))):
        traj = rng.uniform(-1, 1, (int(rng.integers(1, 8)), 3))
        out.append(rec(bool(rng.random() < 0.5), traj, tuple(rng.uniform(-1, 1, 3)), trial=i))
    return out


def test_metrics_equal_fold_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        trials = _random_trials(rng)
        r = compute_metrics(trials)
        sr, tl, tls, pe, osr = _fold_metrics(trials)
        assert r.sr == sr and r.osr == osr
        assert r.tl == pytest.approx(tl, abs=1e-12)
        assert r.pe == pytest.approx(pe, abs=1e-12)
        assert (r.tls is None) == (tls is None)
        if tls is not None:
            assert r.tls == pytest.approx(tls, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_metrics_are_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    trials = _random_trials(rng)
    a = compute_metrics(trials)
    b = compute_metrics([trials[i] for i in rng.permutation(len(trials))])
    assert (a.sr, a.osr, a.osr_final, a.n_trials) == (b.sr, b.osr, b.osr_final, b.n_trials)
    assert a.tl == pytest.approx(b.tl, abs=1e-12) and a.pe == pytest.approx(b.pe, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_adding_a_failure(seed):
    rng = np.random.default_rng(seed)
    trials = _random_trials(rng)
    extra = rec(False, rng.uniform(-1, 1, (3, 3)), tuple(rng.uniform(-1, 1, 3)))
    a, b = compute_metrics(trials), compute_metrics(trials + [extra])
    assert b.sr <= a.sr
    assert b.osr / b.n_trials <= a.osr / a.n_trials or extra.closest_approach <= 0.1
    assert b.osr - a.osr <= 1
    assert b.tls == a.tls


def test_report_formats_round_trip():
    reports = {"I": MetricsReport(0.9, 1.234, 1.1, 0.05, 9, 10, 8), "VII": MetricsReport(0.0, 3.88, None, 0.3, 0, 10)}
    table = emit_report(reports, "table")
    assert "{3.88, -}" in table and table.splitlines()[0].startswith("task")
    csv_text = emit_report(reports, "csv")
    assert csv_text.splitlines()[0] == "task,sr,tl,tls,pe,osr,osr_final,n_trials"
    assert csv_text.splitlines()[2].startswith("VII,0.0,3.88,-,")
    back = load_report(emit_report(reports, "json"))
    assert back == reports
    with pytest.raises(ValueError):
        emit_report(reports, "xml")


def test_trial_record_round_trip():
    r = rec(True, [(0, 0, 0), (0.1, 0.2, 0.3)], target=(1, 1, 1))
    assert TrialRecord.from_dict(json.loads(json.dumps(r.to_dict()))) == r


# -- suites and trials ---------------------------------------------------------------


def test_bundled_suite_loads():
    suite = load_suite(bundled_suite())
    assert [t.id for t in suite.tasks] == ["I", "II", "III", "IV", "V", "VI", "VII", "VIII", "loop"]
    assert all(t.script is not None and t.script.exists() for t in suite.tasks)


def test_zero_jitter_gives_identical_outcomes():
    records = run_trials(bundled_suite(), n=3, jitter=0.0, tasks=["I", "loop"])
    by = {}
    for r in records:
        by.setdefault(r.task_id, []).append((r.outcome, r.success, r.trajectory, r.answer))
    assert all(len(set(v)) == 1 for v in by.values())
    reports = per_task_reports(records)
    assert reports["I"].sr == 1.0 and reports["loop"].sr == 0.0


@pytest.mark.parametrize("task", ["I", "II", "IV", "VI"])
def test_jittered_task_succeeds(task):
    records = run_trials(bundled_suite(), n=10, jitter=0.02, seed=0, tasks=[task])
    assert compute_metrics(records).sr == 1.0


def _suite_copy(tmp_path, mutate):
    d = json.loads(bundled_suite().read_text())
    for t in d["tasks"]:
        for k in ("scene", "script"):
            t[k] = str(FIXTURES / t[k])
    d["workspace"] = str(FIXTURES / d["workspace"])
    mutate(d)
    p = tmp_path / "suite.json"
    p.write_text(json.dumps(d))
    return p


def test_missing_scene_is_fixture_error(tmp_path):
    def drop_scene(d):
        d["tasks"][0]["scene"] = str(tmp_path / "gone.json")

    with pytest.raises(FixtureError):
        load_suite(_suite_copy(tmp_path, drop_scene))
    with pytest.raises(FixtureError):
        load_suite(tmp_path / "no_suite.json")
    with pytest.raises(FixtureError):
        run_trials(bundled_suite(), n=1, tasks=["XX"])


def test_trials_persist_manifests(tmp_path):
    run_trials(bundled_suite(), n=2, tasks=["I"], out_dir=tmp_path)
    for k in range(2):
        data = json.loads((tmp_path / "I" / f"trial-{k:02d}" / "episode.json").read_text())
        assert data["result"]["outcome"]["kind"] == "Resolved"
        assert data["result"]["trial"]["success"] is True


# -- command line ----------------------------------------------------------------------


def test_cli_annotate_modes(tmp_path, capsys):
    img = tmp_path / "img.png"
    RgbImage.blank(320, 240, (90, 90, 90)).save(img)
    save_mask(rect_mask(), tmp_path / "m.png")
    for mode, count in (("push", 12), ("grasp", 5), ("grid", 36)):
        out = tmp_path / f"{mode}.png"
        assert cli.main(["annotate", "--image", str(img), "--mask", str(tmp_path / "m.png"), "--mode", mode, "--out", str(out)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert len(payload["legend"]) == count and out.exists()


def test_cli_episode_and_exit_codes(tmp_path, capsys, monkeypatch):
    scene = str(FIXTURES / "scenes" / "task1_eraser_clips.json")
    script = FIXTURES / "scripts" / "task1.json"
    ws = str(FIXTURES / "workspace.json")
    q = "What is under the white eraser?"
    code = cli.main(["episode", "--scene", scene, "--query", q, "--responder", f"scripted:{script}", "--workspace", ws, "--out", str(tmp_path / "ep")])
    assert code == 0
    assert json.loads(capsys.readouterr().out)["outcome"]["kind"] == "Resolved"
    assert (tmp_path / "ep" / "episode.json").exists()

    assert cli.main(["episode", "--scene", str(tmp_path / "nope.json"), "--query", q, "--responder", f"scripted:{script}"]) == 2
    assert "error:" in capsys.readouterr().err

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps([{"step": "*", "op": "analyse", "reply": "no idea"}]))
    assert cli.main(["episode", "--scene", scene, "--query", q, "--responder", f"scripted:{bad}"]) == 4
    capsys.readouterr()

    monkeypatch.delenv("IPERCEPT_VLM_ENDPOINT", raising=False)
    assert cli.main(["episode", "--scene", scene, "--query", q, "--responder", "live"]) == 3
    capsys.readouterr()

    assert cli.main(["episode", "--scene", scene, "--query", q, "--responder", "carrier-pigeon"]) == 2


def test_cli_trials_writes_reports(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["trials", "--suite", "fixtures", "--n", "1", "--tasks", "I,loop", "--report", "csv", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert (out / "report.csv").read_text() == text
    assert text.splitlines()[1].startswith("I,1.0,")


def test_cli_raig(tmp_path, capsys):
    import shutil

    store = tmp_path / "store"
    shutil.copytree(FIXTURES / "raig_store", store)
    assert cli.main(["raig", "ingest", "--store", str(store)]) == 0
    assert json.loads(capsys.readouterr().out)["examples"] == 8
    assert cli.main(["raig", "retrieve", "--store", str(store), "--text", "push the eraser", "--k", "2"]) == 0
    hits = json.loads(capsys.readouterr().out)
    assert len(hits) == 2 and hits[0]["similarity"] >= hits[1]["similarity"]
    assert cli.main(["raig", "retrieve", "--store", str(tmp_path / "none"), "--text", "x"]) == 2
