import time

import numpy as np
import pytest

from nsurf.core import CameraIntrinsics, Pose, Ray, Surfel, SurfelMap, ray_through_pixel
from nsurf.raster import ASSOCIATION_CAP, RENDER_CAP, T_NEAR, ray_disk_intersect, raster_stats, rasterize

from raster_oracle import oracle_hits, random_scene


def _disk(p, n=(0, 0, -1.0), r=0.5, i=0):
    return Surfel(i, np.array(p, float), np.array(n, float), r, 1.0, np.zeros(4))


AXIS = Ray(np.zeros(3), np.array([0, 0, 1.0]))


def test_axial_hit():
    h = ray_disk_intersect(AXIS, _disk((0, 0, 2)))
    assert h.t == 2 and h.center_offset == 0
    np.testing.assert_array_equal(h.hit_point, [0, 0, 2])


def test_offset_hit_and_miss():
    h = ray_disk_intersect(AXIS, _disk((0.3, 0, 2)))
    assert h.t == 2 and np.isclose(h.center_offset, 0.3)
    assert ray_disk_intersect(AXIS, _disk((0.6, 0, 2))) is None


def test_parallel_and_behind_miss():
    assert ray_disk_intersect(AXIS, _disk((0, 0, 2), n=(1, 0, 0))) is None
    assert ray_disk_intersect(AXIS, _disk((0, 0, -2))) is None
    assert ray_disk_intersect(AXIS, _disk((0, 0, T_NEAR / 2))) is None


def test_empty_map_gives_empty_buffers():
    intr = CameraIntrinsics(10, 10, 4, 4, 8, 8)
    buf = rasterize(SurfelMap(4), intr, Pose.identity())
    assert buf.num_hits == 0 and buf.counts().sum() == 0
    assert raster_stats(buf) == (0.0, 0, 0.0)


def test_single_fronto_surfel_covers_principal_pixel():
    intr = CameraIntrinsics(10, 10, 4, 4, 9, 9)
    m = SurfelMap(4)
    m.add(_disk((0, 0, 2), r=0.05, i=7))
    buf = rasterize(m, intr, Pose.identity())
    hits = buf.hits_at(4, 4)
    assert len(hits) == 1 and hits[0].surfel_id == 7 and np.isclose(hits[0].t, 2)
    assert buf.counts().sum() == 1


def test_stats_counting():
    # 10x10 image, a disk covering exactly 5 pixels of row 0 (rows are 1 m apart at z = 1)
    intr = CameraIntrinsics(10, 1, 0, 0, 10, 10)
    m = SurfelMap(4, dtype=np.float64)
    m.add(_disk((0.2, 0, 1), r=0.205))
    buf = rasterize(m, intr, Pose.identity())
    assert raster_stats(buf) == (0.05, 1, 0.05)


def test_surfel_behind_camera_contributes_nothing():
    intr = CameraIntrinsics(10, 10, 4, 4, 9, 9)
    m = SurfelMap(4)
    m.add(_disk((0, 0, -1), n=(0, 0, 1), r=5.0))
    assert rasterize(m, intr, Pose.identity()).num_hits == 0


def test_matches_scalar_intersection_per_pixel(rng):
    smap, intr, pose = random_scene(rng, max_surfels=40, max_side=12)
    buf = rasterize(smap, intr, pose, cap=RENDER_CAP)
    for v in range(intr.height):
        for u in range(intr.width):
            ray = ray_through_pixel(intr, pose, (u, v))
            hits = [h for h in (ray_disk_intersect(ray, s) for s in smap) if h is not None]
            hits.sort(key=lambda h: (h.t, h.surfel_id))
            got = buf.hits_at(u, v)
            assert [h.surfel_id for h in got] == [h.surfel_id for h in hits]
            np.testing.assert_allclose([h.t for h in got], [h.t for h in hits], rtol=1e-12)


def _compare(buf, expect):
    for k, lst in enumerate(expect):
        s = slice(buf.offsets[k], buf.offsets[k + 1])
        assert buf.ids[s].tolist() == [i for i, _ in lst]
        np.testing.assert_allclose(buf.t[s], [t for _, t in lst], rtol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_matches_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    smap, intr, pose = random_scene(rng, max_surfels=200, max_side=32)
    cap = int(rng.choice([1, 3, ASSOCIATION_CAP, RENDER_CAP]))
    buf = rasterize(smap, intr, pose, cap=cap)
    _compare(buf, oracle_hits(smap, intr, pose, cap))


def test_buffers_sorted_and_capped(rng):
    for _ in range(10):
        smap, intr, pose = random_scene(rng)
        buf = rasterize(smap, intr, pose, cap=4)
        assert buf.counts().max(initial=0) <= 4
        pix = buf.pixel_of_hit()
        same = pix[1:] == pix[:-1]
        assert np.all(buf.t[1:][same] >= buf.t[:-1][same])
        for k in np.unique(pix):
            ids = buf.ids[pix == k]
            assert len(set(ids.tolist())) == len(ids)
        radii = dict(zip(smap.ids.tolist(), smap.radii.tolist()))
        assert all(o <= radii[i] for i, o in zip(buf.ids.tolist(), buf.center_offsets.tolist()))


def test_padded_index():
    intr = CameraIntrinsics(10, 10, 4, 4, 9, 9)
    m = SurfelMap(4)
    m.add(_disk((0, 0, 2), r=0.05, i=None))
    m.add(_disk((0, 0, 3), r=0.05, i=None))
    buf = rasterize(m, intr, Pose.identity())
    idx = buf.padded_index(np.array([0, 4 * 9 + 4]))
    assert idx.tolist() == [[-1, -1], [0, 1]]


def test_invalid_cap():
    with pytest.raises(ValueError):
        rasterize(SurfelMap(4), CameraIntrinsics(1, 1, 0, 0, 2, 2), Pose.identity(), cap=0)
