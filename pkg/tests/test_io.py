import numpy as np
import pytest
from PIL import Image

from nsurf.core import CameraIntrinsics, Pose, SurfelMap
from nsurf.io.dataset import DatasetError, frame_count, load_dataset, load_ground_truth, write_dataset
from nsurf.io.mapio import MapFormatError, load_map, map_from_bytes, map_to_bytes, save_map
from nsurf.io.metrics import psnr, ssim
from nsurf.io.synth import (Box, Quad, SyntheticScene, Texture, Trajectory, fronto_wall, poses_for, reference_room,
                            render_view, synth_generate, trace)


def random_smap(rng, n, fdim=32):
    pos = rng.normal(size=(n, 3))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return SurfelMap.from_arrays(pos, nrm, rng.uniform(0.01, 1, n), rng.uniform(0.1, 3, n),
                                 rng.normal(size=(n, fdim)), ids=rng.permutation(3 * n)[:n], dtype=np.float32)


def test_fronto_wall_depth_and_normals():
    r = synth_generate(fronto_wall(2.0), 1)[0]
    np.testing.assert_allclose(r.frame.sensor_depth, 2.0, atol=1e-12)
    np.testing.assert_allclose(r.normals, np.broadcast_to([0, 0, -1.0], r.normals.shape))


def test_hole_fraction():
    scene = fronto_wall(2.0, CameraIntrinsics(500, 500, 319.5, 239.5, 640, 480), hole_prob=0.1)
    r = synth_generate(scene, 1, seed=3)[0]
    frac = 1 - r.frame.valid_mask.mean()
    assert abs(frac - 0.1) < 0.02
    # holes only touch the sensor depth
    assert np.all(r.depth > 0)


def test_blob_holes_keep_expected_fraction():
    scene = fronto_wall(2.0, CameraIntrinsics(500, 500, 319.5, 239.5, 640, 480), hole_prob=0.1, hole_size=3)
    frac = 1 - synth_generate(scene, 1, seed=4)[0].frame.valid_mask.mean()
    assert abs(frac - 0.1) < 0.02


def test_room_depth_matches_analytic_trace(rng):
    scene = reference_room()
    for pose in poses_for(scene.trajectory, 3):
        r = render_view(scene, pose)
        v, u = rng.integers(0, 36, 20), rng.integers(0, 48, 20)
        from nsurf.core import unproject
        pts = unproject(scene.intrinsics, pose, np.stack([u, v], 1).astype(float), r.depth[v, u])
        d = pts - pose.center
        t, _, _ = trace(scene, pose.center, d / np.linalg.norm(d, axis=1, keepdims=True))
        np.testing.assert_allclose(t, np.linalg.norm(d, axis=1), rtol=1e-9)


def test_trace_box_and_quad():
    box = Box((-1, -1, 3), (1, 1, 4), Texture("solid", (1, 0, 0)))
    quad = Quad((0, 0, 2), (0, 0, -1), (1, 0, 0), 0.1, 0.1, Texture("solid", (0, 1, 0)))
    scene = SyntheticScene(room_lo=None, room_hi=None, objects=(box, quad))
    dirs = np.array([[0, 0, 1.0], [0.2, 0, 1.0], [0, 1.0, 0]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t, n, c = trace(scene, np.zeros(3), dirs)
    assert t[0] == 2 and c[0].tolist() == [0, 1, 0]
    assert np.isclose(t[1], 3 / dirs[1, 2]) and c[1].tolist() == [1, 0, 0]
    assert np.isinf(t[2])
    assert n[0].tolist() == [0, 0, -1] and n[1].tolist() == [0, 0, -1]


def test_trajectories_give_valid_poses():
    for kind in ("pan", "orbit", "lawnmower"):
        for p in poses_for(Trajectory(kind), 7):
            p.validate()


def test_too_many_objects():
    with pytest.raises(ValueError):
        SyntheticScene(objects=(Box((0, 0, 0), (1, 1, 1)),) * 9)


def test_dataset_roundtrip(tmp_path):
    scene = reference_room(hole_prob=0.05)
    rendered = synth_generate(scene, 4, seed=1, out_path=tmp_path / "d")
    frames = list(load_dataset(tmp_path / "d"))
    assert len(frames) == 4 == frame_count(tmp_path / "d")
    for f, r in zip(frames, rendered):
        assert f.index == r.frame.index
        np.testing.assert_allclose(f.sensor_depth, r.frame.sensor_depth, atol=5e-4)
        np.testing.assert_array_equal(f.valid_mask, r.frame.valid_mask)
        np.testing.assert_allclose(f.rgb, r.frame.rgb, atol=0.5 / 255 + 1e-12)
        np.testing.assert_allclose(f.pose.matrix(), r.frame.pose.matrix(), atol=1e-11)
    depth, normals = load_ground_truth(tmp_path / "d", 2)
    np.testing.assert_array_equal(depth, rendered[2].depth)


def test_depth_units_and_mask(tmp_path):
    synth_generate(fronto_wall(2.0), 1, out_path=tmp_path)
    depth = np.array(Image.open(tmp_path / "frames" / "000000.depth.png"))
    depth[0, 0] = 0
    Image.fromarray(depth).save(tmp_path / "frames" / "000000.depth.png")
    f = next(load_dataset(tmp_path))
    assert f.sensor_depth[1, 1] == 2.0 and not f.valid_mask[0, 0] and f.valid_mask[1, 1]


def test_dataset_errors_name_the_path(tmp_path):
    synth_generate(fronto_wall(2.0), 2, out_path=tmp_path)
    (tmp_path / "frames" / "000001.pose.txt").write_text("1 0 0 0\n0 2 0 0\n0 0 1 0\n0 0 0 1\n")
    with pytest.raises(DatasetError, match="000001.pose.txt"):
        list(load_dataset(tmp_path))
    (tmp_path / "frames" / "000001.depth.png").write_bytes(b"garbage")
    with pytest.raises(DatasetError, match="000001.depth.png"):
        list(load_dataset(tmp_path))
    (tmp_path / "frames" / "000001.color.png").rename(tmp_path / "frames" / "000005.color.png")
    with pytest.raises(DatasetError, match="contiguous"):
        list(load_dataset(tmp_path))
    with pytest.raises(DatasetError, match="intrinsics"):
        list(load_dataset(tmp_path / "nowhere"))


def test_empty_map_roundtrip(tmp_path):
    save_map(SurfelMap(32), tmp_path / "e.smap")
    assert (tmp_path / "e.smap").stat().st_size == 20
    m = load_map(tmp_path / "e.smap")
    assert len(m) == 0 and m.feature_dim == 32


def test_map_roundtrip_bit_exact(tmp_path, rng):
    m = random_smap(rng, 1000)
    save_map(m, tmp_path / "m.smap")
    back = load_map(tmp_path / "m.smap")
    for k in ("ids", "positions", "normals", "radii", "weights", "features"):
        assert np.array_equal(getattr(back, k), getattr(m, k))
    assert map_to_bytes(back) == map_to_bytes(m)


def test_map_format_errors(rng):
    data = map_to_bytes(random_smap(rng, 5))
    for bad in (b"XMAP" + data[4:], data[:4] + b"\x02\0\0\0" + data[8:], data[:-1], data[:10], data + b"\0"):
        with pytest.raises(MapFormatError):
            map_from_bytes(bad)


def test_psnr_closed_forms(rng):
    a = rng.uniform(0, 0.9, (8, 8, 3))
    assert psnr(a, a) == 99.0 and np.isclose(ssim(a, a), 1.0)
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 0.0
    assert np.isclose(psnr(a, a + 0.1), 20.0)
    with pytest.raises(ValueError):
        psnr(np.zeros((2, 2)), np.zeros((2, 3)))


def test_metrics_symmetric_and_ranged(rng):
    a, b = rng.uniform(size=(20, 24, 3)), rng.uniform(size=(20, 24, 3))
    assert psnr(a, b) == psnr(b, a)
    assert np.isclose(ssim(a, b), ssim(b, a))
    assert -1 <= ssim(a, b) <= 1 and ssim(a, 1 - a) < 0.2


def test_ssim_matches_reference_implementation(rng):
    skimage = pytest.importorskip("skimage.metrics")
    a = rng.uniform(size=(32, 40, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    ref = skimage.structural_similarity(a, b, channel_axis=2, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                        use_sample_covariance=False)
    assert abs(ssim(a, b) - ref) < 1e-3
