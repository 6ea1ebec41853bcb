import numpy as np
import pytest

from senseplan.world import (FOOTPRINT_RADIUS, RESOLUTION, GoalDisk, Pose,
                             SemanticMap, crop_ego, generate_world, goal_mask,
                             is_collision, load_world, save_world, wrap_angle)


def empty_map(n=80, res=RESOLUTION):
    z = np.zeros((n, n), dtype=np.float32)
    return SemanticMap(res, z.copy(), z.copy() + 0.5, z.copy() + 1.0)


def test_wrap_angle_range():
    a = wrap_angle(np.array([0.0, np.pi, -np.pi, 3 * np.pi, -2.5 * np.pi]))
    assert np.all(a > -np.pi - 1e-12) and np.all(a <= np.pi + 1e-12)
    assert a[0] == 0.0
    assert np.isclose(a[1], np.pi)
    assert np.isclose(a[2], np.pi)           # -pi maps to pi, interval (-pi, pi]
    assert np.isclose(a[3], np.pi)
    assert np.isclose(a[4], -0.5 * np.pi)


def test_generate_world_deterministic():
    a = generate_world(seed=3, radius_m=30.0, obstacle_density=0.10)
    b = generate_world(seed=3, radius_m=30.0, obstacle_density=0.10)
    assert np.array_equal(a[0].occupancy, b[0].occupancy)
    assert np.array_equal(a[0].lighting, b[0].lighting)
    assert np.array_equal(a[0].landmarks, b[0].landmarks)
    assert a[1].center == b[1].center
    assert a[2].as_array() == pytest.approx(b[2].as_array())


def test_generate_world_zero_density_empty():
    smap, goal, start = generate_world(seed=1, radius_m=25.0, obstacle_density=0.0)
    assert smap.occupancy.sum() == 0.0
    assert np.hypot(start.x - goal.center[0], start.y - goal.center[1]) >= 0.3 * 25.0


def test_generate_world_density_band():
    smap, _, _ = generate_world(seed=5, radius_m=30.0, obstacle_density=0.15)
    assert 0.15 <= smap.occupancy.mean() <= 0.22


def test_generate_world_validation():
    with pytest.raises(ValueError):
        generate_world(seed=0, radius_m=10.0)
    with pytest.raises(ValueError):
        generate_world(seed=0, obstacle_density=0.5)
    with pytest.raises(ValueError):
        generate_world(seed=0, lighting_profile="noon")


def test_collision_geometry_oracle():
    smap = empty_map()
    smap.occupancy[20, 20] = 1.0          # cell rect [5.0, 5.25] x [5.0, 5.25]
    assert is_collision(smap, Pose(4.6, 5.125, 0.0))      # 0.40 m from edge
    assert not is_collision(smap, Pose(4.4, 5.125, 0.0))  # 0.60 m from edge
    assert is_collision(smap, Pose(4.9, 4.9, 1.0))        # 0.14 m from corner
    assert not is_collision(smap, Pose(4.4, 4.4, 0.0))    # 0.85 m from corner


def test_collision_out_of_bounds():
    smap = empty_map()
    assert is_collision(smap, Pose(-1.0, 5.0, 0.0))
    assert is_collision(smap, Pose(5.0, smap.extent_m + 1.0, 0.0))
    # footprint overlapping the boundary also counts
    assert is_collision(smap, Pose(FOOTPRINT_RADIUS / 2, 5.0, 0.0))


def test_crop_uniform_layers():
    smap = empty_map()
    c = crop_ego(smap, Pose(10.0, 10.0, 0.3), side_m=8.0)
    assert c.shape == (64, 64, 3)
    assert np.allclose(c[:, :, 0], 0.0)
    assert np.allclose(c[:, :, 1], 0.5)
    assert np.allclose(c[:, :, 2], 1.0)


def test_crop_outside_reads_blocked():
    smap = empty_map()
    c = crop_ego(smap, Pose(-200.0, -200.0, 0.0), side_m=8.0)
    assert np.allclose(c[:, :, 0], 1.0)
    assert np.allclose(c[:, :, 1], 0.0)
    assert np.allclose(c[:, :, 2], 0.0)


def test_crop_obstacle_block_fraction():
    smap = empty_map()
    # 4 m x 4 m solid block: cells [40, 56) in both axes
    smap.occupancy[40:56, 40:56] = 1.0
    c = crop_ego(smap, Pose(11.0, 11.0, 0.0), side_m=16.0)
    # block area / window area = 16 / 256
    assert c[:, :, 0].mean() == pytest.approx(16.0 / 256.0, abs=0.005)


def test_crop_translation_equivariance_cells():
    rng = np.random.default_rng(7)
    n = 120
    occ = (rng.random((n, n)) < 0.2).astype(np.float32)
    light = rng.random((n, n)).astype(np.float32)
    vis = rng.random((n, n)).astype(np.float32)
    a = SemanticMap(RESOLUTION, occ, light, vis)
    shift = 12  # cells
    b = SemanticMap(RESOLUTION, np.roll(occ, (shift, shift), (0, 1)),
                    np.roll(light, (shift, shift), (0, 1)),
                    np.roll(vis, (shift, shift), (0, 1)))
    ca = crop_ego(a, Pose(12.0, 12.0, 0.0), side_m=8.0)
    cb = crop_ego(b, Pose(12.0 + shift * RESOLUTION, 12.0 + shift * RESOLUTION, 0.0),
                  side_m=8.0)
    assert np.array_equal(ca, cb)


def test_goal_mask_counts_and_extremes():
    side, out = 32.0, 64
    g = GoalDisk((10.0, 10.0), radius=6.0)
    m = goal_mask(g, Pose(10.0, 10.0, 0.0), side, out)
    step = side / out
    expect = np.pi * g.radius ** 2 / step ** 2
    assert abs(m.sum() - expect) <= 8
    assert m[out // 2, out // 2] == 1.0
    # a goal beyond the window projects to a carrot disk along its bearing;
    # the bearing here is +45 degrees, so mass sits in the upper-right
    far = goal_mask(GoalDisk((500.0, 500.0), 6.0), Pose(10.0, 10.0, 0.0), side, out)
    assert far.sum() > 0.0
    ys, xs = np.nonzero(far)
    assert ys.mean() > out / 2 and xs.mean() > out / 2
    np.testing.assert_allclose(ys.mean(), xs.mean(), atol=1.0)


def test_world_save_load_roundtrip(tmp_path):
    smap, goal, start = generate_world(seed=9, radius_m=25.0, obstacle_density=0.08)
    p = tmp_path / "w.bin"
    save_world(p, smap, goal, start, seed=9)
    m2, g2, s2, seed2 = load_world(p)
    assert seed2 == 9
    assert np.array_equal(smap.occupancy, m2.occupancy)
    assert np.array_equal(smap.lighting, m2.lighting)
    assert np.array_equal(smap.visibility, m2.visibility)
    assert np.allclose(smap.landmarks, m2.landmarks)
    assert g2.center == goal.center and g2.radius == goal.radius
    assert s2.as_array() == pytest.approx(start.as_array())


def test_world_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(IOError):
        load_world(p)
