import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES

from ipercept.imaging import text_bitmap
from ipercept.projection import NADIR_ROTATION, RigidTransform, WorkspaceConfig, camera_pose_for_cube_vertex, project_to_image
from ipercept.sim import (
    AmbiguousName,
    IllegalState,
    NoContact,
    NoObjectAtGrasp,
    NotVisible,
    ObjectBuried,
    SceneError,
    SceneFileError,
    SceneObject,
    TabletopScene,
    UnknownObject,
    apply_camera_move,
    apply_grasp_place,
    apply_lift_to_camera,
    apply_push,
    find_object,
    jitter_scene,
    place_held,
    render,
    render_underside,
    segmentation_oracle,
    visible_fraction,
)
from ipercept.sim import polygon as poly
from ipercept.sim.render import TABLE_COLOR, UNDERSIDE_BACKGROUND

WS = WorkspaceConfig()
INTR = WS.intrinsics
SCENES = sorted((FIXTURES / "scenes").glob("*.json"))


def load(name):
    return TabletopScene.load(FIXTURES / "scenes" / f"{name}.json")


def box(oid, center, size, height, **kw):
    return SceneObject(oid, kw.pop("name", oid), poly.box(center, size), height, kw.pop("color", (200, 30, 30)), **kw)


def nadir(x=0.5, y=0.0, z=0.55):
    return RigidTransform(NADIR_ROTATION, (x, y, z))


def shadowless(objs):
    # light straight down so that shadows fall under the objects
    return TabletopScene(tuple(objs), light_direction=(1.0, 0.0), light_elevation_deg=89.999)


# -- rendering -------------------------------------------------------------------


def test_empty_scene_is_uniform_table():
    obs = render(TabletopScene(()), nadir(), INTR)
    assert (obs.rgb.pixels == TABLE_COLOR).all()
    # z-depth of the table plane under a nadir camera is the camera height
    assert np.allclose(obs.depth, 0.55)
    assert obs.depth.shape == (INTR.height, INTR.width)


def test_depth_over_a_box():
    obs = render(shadowless([box("b", (0.5, 0.0), (0.1, 0.1), 0.05)]), nadir(), INTR)
    c = project_to_image(INTR, nadir().inverse().apply((0.5, 0.0, 0.05)))
    assert obs.depth[int(round(c.y)), int(round(c.x))] == pytest.approx(0.50, abs=1e-9)


def test_covered_object_contributes_no_pixels():
    small = box("s", (0.5, 0.0), (0.02, 0.02), 0.01)
    big = box("b", (0.5, 0.0), (0.1, 0.1), 0.03, resting_on=None)
    scene = shadowless([small, replace(big, elevation=0.01)])
    obs = render(scene, nadir(), INTR)
    assert not (obs.ids == 0).any()
    with pytest.raises(NotVisible):
        segmentation_oracle(scene, nadir(), INTR, "s")


def test_render_is_deterministic():
    for path in SCENES:
        sc = TabletopScene.load(path)
        a, b = render(sc, WS.home, INTR), render(sc, WS.home, INTR)
        assert a.rgb == b.rgb and np.array_equal(a.depth, b.depth)


def test_shadow_darkens_the_table():
    scene = TabletopScene((box("b", (0.5, 0.0), (0.06, 0.06), 0.08),), light_direction=(1.0, 0.0), light_elevation_deg=30.0)
    obs = render(scene, nadir(), INTR)
    table = obs.ids == -1
    assert (obs.rgb.pixels[table] != TABLE_COLOR).any(axis=1).sum() > 100


def test_camera_move_is_stateless():
    sc = load("task1_eraser_clips")
    other = camera_pose_for_cube_vertex(WS.cube, 1.0, 4.0, 1, 1, sc.marker_pose)
    a = apply_camera_move(sc, WS.home, INTR)
    apply_camera_move(sc, other, INTR)
    c = apply_camera_move(sc, WS.home, INTR)
    assert a.rgb.to_png() == c.rgb.to_png()


def test_high_nadir_view_sees_whole_table():
    sc = load("task1_eraser_clips")
    cam = nadir(z=0.8)
    x0, y0, x1, y1 = sc.table_bounds
    for corner in ((x0, y0, 0), (x0, y1, 0), (x1, y0, 0), (x1, y1, 0)):
        p = project_to_image(INTR, cam.inverse().apply(corner))
        assert 0 <= p.x <= INTR.width - 1 and 0 <= p.y <= INTR.height - 1
    assert not (render(sc, cam, INTR).ids == -2).any()


def test_rolled_view_sees_into_the_cup():
    sc = load("task8_cup_book")
    ws = WorkspaceConfig(marker_pose=sc.marker_pose)
    assert visible_fraction(sc, ws.home, INTR, "strawberry") < 0.5
    rolled = camera_pose_for_cube_vertex(ws.cube, 3.7, 4.5, 1, 2, sc.marker_pose)
    assert rolled.position[2] == 0.45
    assert visible_fraction(sc, rolled, INTR, "strawberry") > 0.9


# -- segmentation ------------------------------------------------------------------


def test_segmentation_and_name_matching():
    sc = load("task1_eraser_clips")
    m = segmentation_oracle(sc, WS.home, INTR, "White Eraser")
    assert m.count() > 100
    assert find_object(sc, "the white eraser on the left").id == "eraser"
    two = TabletopScene((box("a", (0.4, 0.0), (0.04, 0.04), 0.02, name="red block"), box("b", (0.6, 0.0), (0.04, 0.04), 0.02, name="blue block")))
    with pytest.raises(AmbiguousName):
        find_object(two, "block")
    assert find_object(two, "blue block").id == "b"
    with pytest.raises(UnknownObject):
        find_object(sc, "unicorn")
    # hidden payloads are not part of the visible scene
    with pytest.raises(UnknownObject):
        find_object(sc, "paper clips")


# -- push --------------------------------------------------------------------------


def test_push_translation_rule():
    sc = TabletopScene((box("o", (0.40, 0.30), (0.04, 0.04), 0.03),), table_bounds=(0.0, -0.5, 1.0, 0.5))
    # contact at x = 0.38, so the object moves by post - entry = 0.10
    out = apply_push(sc, (0.30, 0.30, 0.015), (0.48, 0.30, 0.015))
    assert out.get("o").centroid == pytest.approx((0.50, 0.30), abs=1e-12)


def test_push_in_empty_space():
    sc = load("task1_eraser_clips")
    with pytest.raises(NoContact):
        apply_push(sc, (0.2, -0.3, 0.01), (0.25, -0.3, 0.01))


def test_push_reveals_payload():
    sc = load("task1_eraser_clips")
    assert sc.get("clips").hidden
    before = sc.visible_count()
    out = apply_push(sc, (0.40, 0.0, 0.0125), (0.56, 0.0, 0.0125))
    assert not out.get("clips").hidden
    assert out.visible_count() == before + 1
    assert out.get("clips").centroid == pytest.approx(sc.get("eraser").centroid, abs=1e-12)
    assert visible_fraction(out, WS.home, INTR, "clips") > 0.5


def test_push_is_transitive_and_clamped():
    a = box("a", (0.40, 0.0), (0.04, 0.04), 0.03)
    b = box("b", (0.46, 0.0), (0.04, 0.04), 0.03)
    far = box("c", (0.40, 0.25), (0.04, 0.04), 0.03)
    sc = TabletopScene((a, b, far), table_bounds=(0.0, -0.5, 0.6, 0.5))
    out = apply_push(sc, (0.30, 0.0, 0.015), (0.70, 0.0, 0.015))
    assert out.get("b").footprint[:, 0].max() <= 0.6 + 1e-9
    assert not poly.overlaps(out.get("a").footprint, out.get("b").footprint)
    assert np.array_equal(out.get("c").footprint, far.footprint)


# -- grasp and lift ------------------------------------------------------------------


def test_grasp_reveals_screw():
    sc = load("task2_tin_screw")
    assert visible_fraction(sc, WS.home, INTR, "screw") == 0.0
    out = apply_grasp_place(sc, (0.52, 0.02, 0.05), (0.70, -0.20, 0.0))
    assert out.get("tin").centroid == pytest.approx((0.70, -0.20), abs=1e-9)
    assert visible_fraction(out, WS.home, INTR, "screw") > 0.5


def test_grasp_errors():
    sc = load("task2_tin_screw")
    with pytest.raises(NoObjectAtGrasp):
        apply_grasp_place(sc, (0.2, 0.3, 0.0), (0.5, 0.0, 0.0))
    base = box("base", (0.5, 0.0), (0.08, 0.08), 0.03)
    top = box("top", (0.5, 0.0), (0.04, 0.04), 0.03, resting_on="base")
    stacked = TabletopScene((base, top))
    # the gripper reaches the topmost object; forcing the base reports it buried
    assert apply_grasp_place(stacked, (0.5, 0.0, 0.06), (0.3, 0.2, 0)).get("top").resting_on is None
    with pytest.raises(ObjectBuried):
        apply_grasp_place(stacked, (0.535, 0.035, 0.03), (0.3, 0.2, 0))


def test_place_is_clamped_to_the_table():
    sc = load("task2_tin_screw")
    out = apply_grasp_place(sc, (0.52, 0.02, 0.05), (5.0, 5.0, 0.0))
    assert out.within_bounds(out.get("tin").footprint)


def _trim(b):
    rows, cols = np.flatnonzero(b.any(axis=1)), np.flatnonzero(b.any(axis=0))
    return b[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def test_underside_text_raster():
    eraser = box("e", (0.5, 0.0), (0.09, 0.04), 0.025, color=(30, 30, 32), bottom_text="中文")
    sc = TabletopScene((eraser,))
    lifted, img = apply_lift_to_camera(sc, (0.5, 0.0, 0.025))
    assert lifted.held == "e"
    ink = np.all(img.pixels == (250, 250, 250), axis=2)
    got = _trim(ink)
    want = _trim(text_bitmap("中文"))
    k = got.shape[0] // want.shape[0]
    assert k >= 1 and got.shape == (want.shape[0] * k, want.shape[1] * k)
    assert np.array_equal(got[::k, ::k], want)
    assert render_underside(replace(eraser, bottom_text="KEEP")) != img


def test_blank_underside_and_single_gripper():
    plain = box("p", (0.5, 0.0), (0.09, 0.04), 0.025, color=(30, 30, 32))
    sc = TabletopScene((plain, box("q", (0.3, 0.2), (0.04, 0.04), 0.02)))
    lifted, img = apply_lift_to_camera(sc, (0.5, 0.0, 0.025))
    assert not np.all(img.pixels == (250, 250, 250), axis=2).any()
    assert set(map(tuple, img.pixels.reshape(-1, 3))) == {UNDERSIDE_BACKGROUND, (30, 30, 32)}
    with pytest.raises(IllegalState):
        apply_lift_to_camera(lifted, (0.3, 0.2, 0.02))
    with pytest.raises(NotVisible):
        segmentation_oracle(lifted, WS.home, INTR, "p")
    back = place_held(lifted, (0.5, 0.0, 0.0))
    assert back.held is None and back.get("p").centroid == pytest.approx((0.5, 0.0))
    with pytest.raises(IllegalState):
        place_held(back, (0.5, 0.0, 0.0))


# -- scene files -------------------------------------------------------------------


def test_every_fixture_loads_and_round_trips(tmp_path):
    assert len(SCENES) == 8
    for path in SCENES:
        sc = TabletopScene.load(path)
        sc.save(tmp_path / "s.json")
        again = TabletopScene.load(tmp_path / "s.json")
        assert json.dumps(again.to_dict(), sort_keys=True) == json.dumps(sc.to_dict(), sort_keys=True)


def test_scene_file_errors(tmp_path):
    with pytest.raises(SceneFileError):
        TabletopScene.load(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(SceneFileError):
        TabletopScene.load(tmp_path / "bad.json")
    d = {"objects": [{"id": "a", "box": {"center": [5, 5], "size": [0.1, 0.1]}, "height": 0.1}]}
    (tmp_path / "out.json").write_text(json.dumps(d))
    with pytest.raises(SceneFileError):
        TabletopScene.load(tmp_path / "out.json")
    (tmp_path / "nofield.json").write_text(json.dumps({"objects": [{"id": "a", "height": 0.1}]}))
    with pytest.raises(SceneFileError):
        TabletopScene.load(tmp_path / "nofield.json")


def test_scene_invariants():
    with pytest.raises(SceneError):
        SceneObject("a", "a", np.array([[0, 0], [1, 0], [2, 0]]), 0.1, (0, 0, 0))
    with pytest.raises(SceneError):
        box("a", (0.5, 0), (0.1, 0.1), 0.0)
    a = box("a", (0.5, 0), (0.1, 0.1), 0.01, resting_on="b")
    b = box("b", (0.5, 0), (0.1, 0.1), 0.01, resting_on="a")
    with pytest.raises(SceneError):
        TabletopScene((a, b))
    with pytest.raises(SceneError):
        TabletopScene((box("a", (0.5, 0), (0.1, 0.1), 0.01), box("a", (0.3, 0), (0.1, 0.1), 0.01)))


@given(st.integers(0, 2**31), st.floats(0.0, 0.05), st.floats(0.0, 20.0))
def test_jitter_stays_on_table(seed, pos, rot):
    for path in SCENES:
        sc = TabletopScene.load(path)
        out = jitter_scene(sc, np.random.default_rng(seed), pos, rot)
        for o in out.objects:
            assert out.within_bounds(o.footprint, tol=1e-9)
        for o in sc.objects:
            if o.resting_on is not None:
                # stacks move rigidly with their base
                d0 = o.centroid - sc.get(o.resting_on).centroid
                d1 = out.get(o.id).centroid - out.get(o.resting_on).centroid
                assert np.linalg.norm(d1) == pytest.approx(np.linalg.norm(d0), abs=1e-9)


@given(st.integers(0, 2**31))
def test_random_pushes_keep_invariants(seed):
    rng = np.random.default_rng(seed)
    sc = TabletopScene.load(SCENES[int(rng.integers(len(SCENES)))])
    ids_before = [o.id for o in sc.objects]
    target = sc.on_table()[int(rng.integers(len(sc.on_table())))]
    c = target.centroid
    ang = rng.uniform(0, 2 * np.pi)
    u = np.array([np.cos(ang), np.sin(ang)])
    z = sc.base_z(target.id) + 0.5 * target.height
    pre = (*(c - 0.15 * u), z)
    post = (*(c + rng.uniform(0.0, 0.1) * u), z)
    try:
        out = apply_push(sc, pre, post)
    except NoContact:
        return
    assert [o.id for o in out.objects] == ids_before
    for o in out.on_table():
        assert out.within_bounds(o.footprint, tol=1e-9)
    revealed = [o for o in out.objects if sc.get(o.id).hidden and not o.hidden]
    assert out.visible_count() == sc.visible_count() + len(revealed)
