import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_blob, rect_mask
from oracles import axis_angle_error, boundary_pixels, greedy_fps, pca_axis_eigh, segment_touches_mask

from ipercept.geometry import (
    BinaryMask,
    DegenerateMask,
    EmptyMask,
    LineKind,
    NoFeasiblePush,
    PixelPoint,
    TooFewBoundaryPixels,
    compute_centroid,
    compute_principal_axes,
    extract_boundary,
    generate_grasp_keypoints,
    generate_push_lines,
    load_mask,
    save_mask,
    segment_hits_mask,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def test_rectangle_centroid_and_axes():
    m = rect_mask()
    assert compute_centroid(m) == PixelPoint(100.0, 50.0)
    ax = compute_principal_axes(m)
    assert ax.axis1 == (1.0, 0.0)
    assert ax.axis2 == (0.0, 1.0)
    assert ax.eigenvalue1 > ax.eigenvalue2


def test_vertical_bar_axis_points_down_the_rows():
    m = rect_mask(x0=10, x1=12, y0=5, y1=40, w=30, h=50)
    assert compute_principal_axes(m).axis1 == (0.0, 1.0)


def test_disc_is_isotropic():
    yy, xx = np.mgrid[0:41, 0:41]
    m = BinaryMask((xx - 20) ** 2 + (yy - 20) ** 2 <= 100)
    assert compute_principal_axes(m).axis1 == (1.0, 0.0)


def test_single_pixel_is_degenerate():
    m = BinaryMask.from_pixels(5, 5, [(2, 2)])
    with pytest.raises(DegenerateMask):
        compute_principal_axes(m)


def test_empty_mask():
    m = BinaryMask(np.zeros((4, 4), bool))
    with pytest.raises(EmptyMask):
        compute_centroid(m)
    with pytest.raises(EmptyMask):
        extract_boundary(m)


@given(seeds)
def test_pca_matches_eigh(seed):
    m = random_blob(np.random.default_rng(seed))
    if m.count() < 3:
        return
    vec, vals = pca_axis_eigh(m.data)
    try:
        ax = compute_principal_axes(m)
    except DegenerateMask:
        assert vals[0] < 1e-12
        return
    assert ax.eigenvalue1 == pytest.approx(vals[0], abs=1e-9)
    assert ax.eigenvalue2 == pytest.approx(max(vals[1], 0.0), abs=1e-9)
    if vals[0] - vals[1] > 1e-6 * max(vals[0], 1.0):
        assert axis_angle_error(ax.axis1, vec) < 1e-6


@given(seeds)
def test_axes_orthonormal_and_sign_normalised(seed):
    m = random_blob(np.random.default_rng(seed))
    try:
        ax = compute_principal_axes(m)
    except DegenerateMask:
        return
    (x1, y1), (x2, y2) = ax.axis1, ax.axis2
    assert math.hypot(x1, y1) == pytest.approx(1.0, abs=1e-12)
    assert x1 * x2 + y1 * y2 == pytest.approx(0.0, abs=1e-12)
    assert x1 > 0 or (x1 == 0 and y1 > 0)
    assert (x2, y2) == (-y1 + 0.0, x1)


def test_boundary_matches_reference(rng):
    for _ in range(20):
        m = random_blob(rng)
        got = [(int(p.x), int(p.y)) for p in extract_boundary(m)]
        assert got == boundary_pixels(m.data)


def test_rectangle_keypoints():
    kps = generate_grasp_keypoints(rect_mask())
    pts = [tuple(p) for p in kps.boundary_points]
    assert pts == [(80, 40), (120, 60), (105, 40), (92, 60)]
    assert kps.point("P5") == PixelPoint(100.0, 50.0)
    assert [name for name, _ in kps.labelled] == ["P1", "P2", "P3", "P4", "P5"]


@given(seeds)
def test_fps_matches_greedy_oracle(seed):
    m = random_blob(np.random.default_rng(seed), w=48, h=40)
    if len(boundary_pixels(m.data)) < 4:
        with pytest.raises(TooFewBoundaryPixels):
            generate_grasp_keypoints(m)
        return
    kps = generate_grasp_keypoints(m)
    assert [tuple(int(v) for v in p) for p in kps.boundary_points] == greedy_fps(m.data)


@given(seeds)
def test_keypoints_lie_on_boundary_and_are_distinct(seed):
    m = random_blob(np.random.default_rng(seed))
    try:
        kps = generate_grasp_keypoints(m)
    except TooFewBoundaryPixels:
        return
    boundary = set(boundary_pixels(m.data))
    pts = [tuple(int(v) for v in p) for p in kps.boundary_points]
    assert len(set(pts)) == 4
    assert set(pts) <= boundary


def test_rectangle_push_lines():
    # exits at x=80/120 and y=40/60; default displacement is the extent (40 and 20 px)
    lines = generate_push_lines(rect_mask())
    assert [ln.label_index for ln in lines] == [1, 2, 3, 4, 5, 6]
    assert lines[0].pre_contact == PixelPoint(70.0, 50.0)
    assert lines[0].post_contact == PixelPoint(160.0, 50.0)
    assert lines[1].pre_contact == PixelPoint(100.0, 30.0)
    assert lines[1].post_contact == PixelPoint(100.0, 80.0)
    assert [ln.kind for ln in lines] == [LineKind.PRINCIPAL] * 2 + [LineKind.EDGE] * 4
    assert len({(ln.pre_contact, ln.post_contact) for ln in lines}) == 6


def test_displacement_override():
    lines = generate_push_lines(rect_mask(), clearance=5.0, displacement=30.0)
    assert lines[0].pre_contact == PixelPoint(75.0, 50.0)
    assert lines[0].post_contact == PixelPoint(150.0, 50.0)
    lines = generate_push_lines(rect_mask(), clearance=10.0, displacement=30.0)
    assert (lines[0].pre_contact, lines[0].post_contact) == (PixelPoint(70.0, 50.0), PixelPoint(150.0, 50.0))
    assert (lines[1].pre_contact, lines[1].post_contact) == (PixelPoint(100.0, 30.0), PixelPoint(100.0, 90.0))


def test_bad_clearance():
    with pytest.raises(ValueError):
        generate_push_lines(rect_mask(), clearance=0)


def test_object_filling_the_image_has_no_push():
    m = BinaryMask(np.ones((20, 20), bool))
    with pytest.raises(NoFeasiblePush):
        generate_push_lines(m)


def test_segment_grazing_a_pixel_corner():
    m = BinaryMask.from_pixels(5, 5, [(2, 2)])
    # the line x + y = 3.1 cuts the (1.5, 1.5) corner of the square around (2, 2)
    assert segment_hits_mask(m, PixelPoint(0.0, 3.1), PixelPoint(3.1, 0.0))
    assert not segment_hits_mask(m, PixelPoint(0.0, 2.9), PixelPoint(2.9, 0.0))
    assert segment_hits_mask(m, PixelPoint(2.0, 0.0), PixelPoint(2.0, 4.0))
    assert not segment_hits_mask(m, PixelPoint(0.0, 0.0), PixelPoint(4.0, 0.0))


@given(seeds)
def test_segment_hits_matches_separating_axis_oracle(seed):
    rng = np.random.default_rng(seed)
    m = random_blob(rng, w=40, h=30)
    for _ in range(20):
        a = PixelPoint(*rng.uniform(-3, 42, 2))
        b = PixelPoint(*rng.uniform(-3, 42, 2))
        assert segment_hits_mask(m, a, b) == segment_touches_mask(m.data, a, b)


def _pad(m, p):
    return BinaryMask(np.pad(m.data, p, constant_values=False))


@given(seeds)
def test_push_line_contract(seed):
    m = random_blob(np.random.default_rng(seed))
    try:
        lines = generate_push_lines(m)
    except NoFeasiblePush:
        lines = []
    for ln in lines:
        assert not m.contains(ln.pre_contact)
        assert segment_hits_mask(m, ln.pre_contact, ln.post_contact)
        assert segment_touches_mask(m.data, ln.pre_contact, ln.post_contact)
    assert [ln.label_index for ln in lines] == list(range(1, len(lines) + 1))
    # an enlarged canvas keeps every line; the ones that stay inside the
    # original frame must be exactly the survivors, in order
    pad = 400
    full = generate_push_lines(_pad(m, pad))
    assert len(full) <= 6
    inside = []
    for ln in full:
        pre = (ln.pre_contact.x - pad, ln.pre_contact.y - pad)
        post = (ln.post_contact.x - pad, ln.post_contact.y - pad)
        if all(-1e-9 <= p[0] <= m.width - 1 + 1e-9 and -1e-9 <= p[1] <= m.height - 1 + 1e-9 for p in (pre, post)):
            inside.append((pre, post))
    if len(inside) < 2:
        assert lines == []
        return
    assert len(lines) == len(inside)
    for ln, (pre, post) in zip(lines, inside):
        assert ln.pre_contact.x == pytest.approx(pre[0], abs=1e-9)
        assert ln.pre_contact.y == pytest.approx(pre[1], abs=1e-9)
        assert ln.post_contact.x == pytest.approx(post[0], abs=1e-9)
        assert ln.post_contact.y == pytest.approx(post[1], abs=1e-9)


def test_mask_png_round_trip(tmp_path, rng):
    m = random_blob(rng)
    save_mask(m, tmp_path / "m.png")
    assert load_mask(tmp_path / "m.png") == m


def test_mask_text_round_trip(tmp_path, rng):
    m = random_blob(rng, w=20, h=10)
    save_mask(m, tmp_path / "m.mask")
    assert load_mask(tmp_path / "m.mask") == m
