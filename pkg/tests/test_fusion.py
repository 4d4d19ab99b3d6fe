import numpy as np
import pytest

from nsurf.core import CameraIntrinsics, Pose, Surfel, SurfelMap
from nsurf.fusion import (FusionConfig, associate, integrate_frame, integrate_geometry, merge_feature,
                          merge_geometry, read_reports_csv, replay_features, write_reports_csv)
from nsurf.ingest import DepthRefiner, Frame, LocalField, build_local_surfels
from nsurf.io.synth import fronto_wall, reference_room, render_view, poses_for
from nsurf.nn import NetworkBundle, Tensor

INTR = CameraIntrinsics(40.0, 40.0, 23.5, 17.5, 48, 36)


@pytest.fixture(scope="module")
def bundle():
    return NetworkBundle.initialize(0)


def wall_frame(pose=None, distance=2.0):
    return render_view(fronto_wall(distance, INTR), pose or Pose.identity()).frame


def local_of(frame, bundle, stride=2):
    return build_local_surfels(frame, DepthRefiner(), bundle, stride)


def shifted(local: LocalField, dz=0.0, rot=None) -> SurfelMap:
    m = local.surfels.copy()
    m.positions = m.positions + np.array([0, 0, dz], dtype=m.dtype)
    if rot is not None:
        m.normals = (m.normals.astype(float) @ rot.T).astype(m.dtype)
    return m


def test_config_validation():
    for bad in (dict(delta_depth=0), dict(k_candidates=0), dict(normal_angle_max=90), dict(fusion_scheme="max")):
        with pytest.raises(ValueError):
            FusionConfig(**bad)


def test_empty_global_inserts_everything(bundle):
    local = local_of(wall_frame(), bundle)
    a = associate(SurfelMap(32), local, INTR, Pose.identity())
    assert len(a.inserts) == len(local.surfels) and not a.merges


def test_self_association_merges_everything(bundle):
    local = local_of(wall_frame(), bundle)
    a = associate(local.surfels.copy(), local, INTR, Pose.identity())
    assert len(a.inserts) == 0 and len(a.merges) == len(local.surfels)
    # each local row covers its own pixel first in the fronto case
    assert all(l == g for l, g in a.merges)


def test_depth_threshold(bundle):
    local = local_of(wall_frame(), bundle)
    a = associate(shifted(local, 0.15), local, INTR, Pose.identity())
    assert len(a.merges) == 0
    a = associate(shifted(local, 0.05), local, INTR, Pose.identity())
    assert len(a.inserts) == 0


def test_normal_filter(bundle):
    local = local_of(wall_frame(), bundle)
    c, s = np.cos(np.radians(40)), np.sin(np.radians(40))
    rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    a = associate(shifted(local, 0.0, rot), local, INTR, Pose.identity())
    assert len(a.merges) == 0


def test_association_partition(bundle):
    frames = [r.frame for r in (render_view(reference_room(), p) for p in poses_for(reference_room().trajectory, 5))]
    g = local_of(frames[0], bundle).surfels
    local = local_of(frames[2], bundle)
    a = associate(g, local, INTR, frames[2].pose)
    rows = np.concatenate([a.merge_local, a.inserts])
    assert sorted(rows.tolist()) == list(range(len(local.surfels)))
    assert np.all(np.diff(a.merge_local) > 0)


def _s(p, n=(0, 0, -1.0), r=0.02, w=1.0):
    return Surfel(0, np.array(p, float), np.array(n, float), r, w, np.zeros(32))


def test_merge_geometry_examples():
    pos, n, r, w, deg = merge_geometry(_s((0, 0, 0)), _s((1, 0, 0)))
    assert pos.tolist() == [0.5, 0, 0] and w == 2 and not deg
    pos, *_ = merge_geometry(_s((0, 0, 0), w=3), _s((1, 0, 0), w=1))
    assert pos[0] == 0.25
    _, _, r, *_ = merge_geometry(_s((0, 0, 0), r=0.02), _s((0, 0, 0), r=0.04))
    assert np.isclose(r, 0.03)
    _, n, *_ = merge_geometry(_s((0, 0, 0), n=(1, 0, 0)), _s((0, 0, 0), n=(0, 1, 0)))
    np.testing.assert_allclose(n, [np.sqrt(0.5), np.sqrt(0.5), 0])


def test_merge_geometry_opposing_normals_degenerate():
    g = _s((0, 0, 0), n=(0, 0, 1.0))
    _, n, _, _, deg = merge_geometry(g, _s((0, 0, 0), n=(0, 0, -1.0)))
    assert deg and n.tolist() == [0, 0, 1]


def test_merge_geometry_position_is_convex(rng):
    for _ in range(100):
        a, b = rng.normal(size=3), rng.normal(size=3)
        pos, *_ = merge_geometry(_s(a, w=rng.uniform(0.1, 5)), _s(b, w=rng.uniform(0.1, 5)))
        assert np.all(pos >= np.minimum(a, b) - 1e-12) and np.all(pos <= np.maximum(a, b) + 1e-12)


def test_weighted_sum_feature(rng):
    v = rng.normal(size=32)
    np.testing.assert_allclose(merge_feature("weighted_sum", v, v, (1.0, 1.0)), v)
    a, b = rng.normal(size=32), rng.normal(size=32)
    np.testing.assert_allclose(merge_feature("weighted_sum", a, b, (2.0, 0.5)),
                               merge_feature("weighted_sum", b, a, (0.5, 2.0)), atol=1e-15)
    np.testing.assert_allclose(merge_feature("weighted_sum", a, b, (3.0, 1.0)), 0.75 * a + 0.25 * b)


def test_gru_with_zero_parameters(rng, bundle):
    P = {k: np.zeros_like(v, dtype=np.float64) for k, v in bundle.params.items() if k.startswith("gru.")}
    fg = rng.uniform(-1, 1, 32)
    np.testing.assert_allclose(merge_feature("gru", rng.normal(size=32), fg, (1, 1), P), 0.5 * fg, atol=1e-15)


def test_gru_bounded_and_asymmetric(rng, bundle):
    for seed in range(5):
        P = NetworkBundle.initialize(seed, dtype=np.float64).params
        fl, fg = rng.uniform(-1, 1, (10, 32)), rng.uniform(-1, 1, (10, 32))
        out = merge_feature("gru", fl, fg, (1, 1), P)
        assert np.all(np.abs(out) < 1)
        assert not np.allclose(out, merge_feature("gru", fg, fl, (1, 1), P))


def test_feature_dimension_mismatch(bundle):
    with pytest.raises(ValueError):
        merge_feature("gru", np.zeros(16), np.zeros(16), (1, 1), bundle.params)
    with pytest.raises(ValueError):
        merge_feature("weighted_sum", np.zeros(32), np.zeros(16), (1, 1))


def test_reintegration_is_idempotent(bundle):
    frame = wall_frame()
    local = local_of(frame, bundle)
    m1, r1 = integrate_frame(SurfelMap(32), local, INTR, frame.pose, bundle=bundle)
    m2, r2 = integrate_frame(m1, local, INTR, frame.pose, bundle=bundle)
    assert r1.inserted == len(local.surfels) and r2.inserted == 0 and r2.merged == len(local.surfels)
    np.testing.assert_array_equal(m2.positions, m1.positions)
    np.testing.assert_array_equal(m2.radii, m1.radii)
    np.testing.assert_allclose(m2.weights, 2 * m1.weights, rtol=1e-7)


def test_disjoint_views_add_up(bundle):
    f1 = wall_frame()
    l1 = local_of(f1, bundle)
    # same images, but the camera sits 50 m to the side so the two fields never overlap
    far = Frame(f1.rgb, f1.sensor_depth, INTR, Pose(np.eye(3), np.array([50.0, 0, 0])))
    l2 = local_of(far, bundle)
    m, _ = integrate_frame(SurfelMap(32), l1, INTR, f1.pose, bundle=bundle)
    m, rep = integrate_frame(m, l2, INTR, far.pose, bundle=bundle)
    assert len(m) == len(l1.surfels) + len(l2.surfels) and rep.merged == 0


def test_weight_conservation_and_replay(bundle):
    scene = reference_room()
    frames = [render_view(scene, p) for p in poses_for(scene.trajectory, 6)]
    m = SurfelMap(32)
    feats = Tensor(np.zeros((0, 32), np.float32))
    for r in frames:
        local = local_of(r.frame, bundle)
        before = m.total_weight()
        m, rep = integrate_frame(m, local, INTR, r.frame.pose, bundle=bundle)
        assert np.isclose(m.total_weight(), before + local.surfels.total_weight(), rtol=1e-6)
        assert rep.merged + rep.inserted == len(local.surfels)
        feats = replay_features(rep.plan, feats, Tensor(local.surfels.features), "gru", bundle.tensors())
        m.validate()
    np.testing.assert_allclose(feats.data, m.features, atol=1e-6)


def test_multiple_merges_into_one_global_surfel(bundle):
    # one big global disk covers every local pixel
    local = local_of(wall_frame(), bundle)
    g = SurfelMap(32)
    g.append([0, 0, 2.0], [0, 0, -1.0], 5.0, 1.0, np.zeros(32))
    out, plan, _ = integrate_geometry(g, local, INTR, Pose.identity())
    assert len(out) == 1 and len(plan.rounds) == len(local.surfels)
    assert np.isclose(out.weights[0], 1 + local.surfels.total_weight(), rtol=1e-6)


def test_report_csv_roundtrip(tmp_path, bundle):
    frame = wall_frame()
    local = local_of(frame, bundle)
    m, r1 = integrate_frame(SurfelMap(32), local, INTR, frame.pose, bundle=bundle, frame_index=0)
    m, r2 = integrate_frame(m, local, INTR, frame.pose, bundle=bundle, frame_index=20)
    write_reports_csv([r1, r2], tmp_path / "a.csv")
    rows = read_reports_csv(tmp_path / "a.csv")
    assert [r["frame_index"] for r in rows] == [0, 20]
    assert rows[1]["inserted"] == 0 and rows[1]["total_surfels"] == len(m)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "frame_index,merged,inserted,total_surfels,bytes,ms"
