import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import toy_scene
from weakseg3d.pointcloud import (CLASS_IDS, SENTINEL_NONE, ClickAnnotation, SceneFormatError, SceneSpec,
                                  format_scene, generate_scene, layout_scene, parse_clicks, parse_scene,
                                  read_clicks, read_scene, simulate_clicks, write_clicks, write_scene)


def _surface_distance(prim, pts):
    p = prim.params
    if prim.kind == "sphere":
        return np.abs(np.linalg.norm(pts - p["center"], axis=1) - p["radius"])
    if prim.kind == "box":
        q = np.abs(pts - p["center"]) - p["half"]
        return np.abs(np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0))
    if prim.kind == "cylinder":
        rho = np.linalg.norm(pts[:, :2] - p["base"][:2], axis=1) - p["radius"]
        z = np.abs(pts[:, 2] - p["base"][2] - p["height"] / 2) - p["height"] / 2
        q = np.column_stack([rho, z])
        return np.abs(np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0))
    if prim.kind == "plane":
        o, u, v = p["origin"], p["u"], p["v"]
        t = np.clip((pts - o) @ u / (u @ u), 0, 1)
        s = np.clip((pts - o) @ v / (v @ v), 0, 1)
        return np.linalg.norm(pts - (o + t[:, None] * u + s[:, None] * v), axis=1)
    raise ValueError(prim.kind)


def test_two_spheres_counts():
    s = generate_scene(SceneSpec(num_instances=2, points_per_instance=(100, 100), classes=("ball",), seed=7))
    assert len(s) == 200
    assert s.num_instances == 2
    assert np.bincount(s.gt_instance).tolist() == [100, 100]
    assert set(s.gt_semantic.tolist()) == {CLASS_IDS["ball"]}


def test_generation_is_deterministic():
    spec = SceneSpec(num_instances=5, background=True, noise=0.01, seed=11)
    assert format_scene(generate_scene(spec)) == format_scene(generate_scene(spec))


def test_points_lie_on_their_generating_surface():
    spec = SceneSpec(num_instances=3, classes=("crate",), background=True, noise=0.005, seed=3)
    scene = generate_scene(spec)
    prims, _ = layout_scene(spec)
    d = np.stack([_surface_distance(pr, scene.positions) for pr in prims], axis=1)
    nearest = np.argmin(d, axis=1)
    owner_inst = np.array([pr.instance for pr in prims])[nearest]
    owner_sem = np.array([pr.semantic for pr in prims])[nearest]
    ok = (owner_inst == scene.gt_instance) & (owner_sem == scene.gt_semantic)
    assert ok.mean() >= 0.99


def test_background_is_unassigned_stuff():
    s = generate_scene(SceneSpec(num_instances=2, background=True, seed=1))
    bg = s.gt_instance == SENTINEL_NONE
    assert bg.any()
    assert set(s.gt_semantic[bg].tolist()) <= {CLASS_IDS["floor"], CLASS_IDS["wall"]}


def test_invalid_spec_rejected():
    with pytest.raises(ValueError):
        SceneSpec(num_instances=0)
    with pytest.raises(ValueError):
        SceneSpec(classes=("floor",))
    with pytest.raises(ValueError):
        SceneSpec(points_per_instance=(10, 5))


def _five_instance_scene():
    return generate_scene(SceneSpec(num_instances=5, points_per_instance=(30, 40), seed=2))


def test_one_click_per_instance():
    s = _five_instance_scene()
    c = simulate_clicks(s, m=1, seed=0)
    assert len(c) == 5
    assert sorted(c.instance_id.tolist()) == s.instance_ids.tolist()
    c.check(s)


def test_three_clicks_per_instance():
    s = _five_instance_scene()
    c = simulate_clicks(s, m=3, seed=0)
    assert len(c) == 15
    assert np.bincount(c.instance_id).tolist() == [3] * 5
    assert len(np.unique(c.point_index)) == 15


def test_annotation_ratio():
    s = generate_scene(SceneSpec(num_instances=4, points_per_instance=(50, 50), seed=4))
    assert len(s) == 200
    assert simulate_clicks(s, 1, 0).ratio(s) == pytest.approx(4 / 200)


def test_instance_smaller_than_m_names_it():
    s = toy_scene(np.arange(9.0).reshape(3, 3), instance=[0, 0, 1])
    with pytest.raises(ValueError, match="instance 1"):
        simulate_clicks(s, m=2)


def test_boundary_clicks_come_from_far_points():
    s = _five_instance_scene()
    c = simulate_clicks(s, 1, 0, boundary_fraction=0.1)
    for p, inst, _ in c.clicks.tolist():
        members = np.flatnonzero(s.gt_instance == inst)
        d = np.linalg.norm(s.positions[members] - s.positions[members].mean(axis=0), axis=1)
        k = int(np.ceil(0.1 * len(members)))
        mine = d[np.flatnonzero(members == p)[0]]
        assert mine >= np.sort(d)[::-1][k - 1]


def test_background_clicks_are_semantic_only():
    s = generate_scene(SceneSpec(num_instances=2, background=True, seed=1))
    c = simulate_clicks(s, 1, 0, background_clicks=2)
    bg = c.instance_id == SENTINEL_NONE
    assert bg.sum() == 4
    assert np.all(s.gt_instance[c.point_index[bg]] == SENTINEL_NONE)
    c.check(s)


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_clicks_are_valid_for_any_seed(seed, m):
    s = _five_instance_scene()
    c = simulate_clicks(s, m, seed)
    c.check(s)
    assert len(c) == m * s.num_instances


def test_scene_round_trip(tmp_path):
    s = generate_scene(SceneSpec(num_instances=3, background=True, noise=0.01, seed=5))
    write_scene(s, tmp_path / "a.cs")
    assert read_scene(tmp_path / "a.cs") == s


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False, allow_subnormal=True), min_size=3, max_size=30))
def test_round_trip_preserves_floats_exactly(values):
    n = len(values) // 3
    p = np.array(values[:3 * n]).reshape(n, 3)
    s = toy_scene(p, instance=np.arange(n) % 2, semantic=np.arange(n) % 2)
    assert parse_scene(format_scene(s).encode()) == s


def test_truncated_body_reports_row():
    s = toy_scene(np.arange(300.0).reshape(100, 3), instance=np.zeros(100, int))
    text = format_scene(s)
    short = "".join(text.splitlines(keepends=True)[:-1])
    with pytest.raises(SceneFormatError) as err:
        parse_scene(short.encode())
    assert err.value.row == 100
    assert err.value.offset == len(short.encode())


def test_empty_file_missing_header():
    with pytest.raises(SceneFormatError, match="missing header"):
        parse_scene(b"")


def test_malformed_header_and_extra_rows():
    with pytest.raises(SceneFormatError, match="malformed header"):
        parse_scene(b"HELLO\n")
    s = toy_scene([[0.0, 0, 0]])
    text = format_scene(s) + "0 0 0 0.5 0.5 0.5 0 0 1 0 0\n"
    with pytest.raises(SceneFormatError, match="count mismatch") as err:
        parse_scene(text.encode())
    assert err.value.row == 2


def test_bad_row_offset():
    s = toy_scene([[0.0, 0, 0], [1.0, 0, 0]])
    lines = format_scene(s).splitlines(keepends=True)
    bad = lines[0] + lines[1] + "1 x 0 0.5 0.5 0.5 0 0 1 0 0\n"
    with pytest.raises(SceneFormatError) as err:
        parse_scene(bad.encode())
    assert err.value.offset == len((lines[0] + lines[1]).encode())
    assert err.value.row == 2


def test_clicks_round_trip(tmp_path):
    s = _five_instance_scene()
    c = simulate_clicks(s, 2, 9)
    write_clicks(c, tmp_path / "c.txt")
    assert read_clicks(tmp_path / "c.txt") == c
    assert parse_clicks(b"# clicks_per_instance=1\n3 0 1\n") == ClickAnnotation([[3, 0, 1]])


def test_scene_validation():
    with pytest.raises(ValueError, match="normal"):
        toy_scene([[0.0, 0, 0]]).__class__(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 3)),
                                           np.zeros(1, int), np.zeros(1, int))
    with pytest.raises(ValueError, match="spans semantic classes"):
        toy_scene(np.zeros((2, 3)), instance=[0, 0], semantic=[0, 1])
