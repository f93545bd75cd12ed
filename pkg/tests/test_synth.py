import numpy as np
import pytest

from tripyr.camera import Intrinsics, RigidPose, canonical_to_camera, pose_facing_camera
from tripyr.synth import (AnalyticScene, Manifest, SceneFile, TrajectoryConfig, holdout_count, make_dataset,
                          make_trajectory, oracle_image, oracle_rays, pattern_period_pixels, scene_color,
                          scene_density)

TINY = Intrinsics(16.0, 16.0, 8.0, 8.0, 16, 16)


def test_density_far_and_center():
    s = AnalyticScene()
    assert scene_density(s, [[5.0, 0.0, 0.0]], np.zeros(4))[0] == 0.0
    assert scene_density(s, [[0.0, 0.0, 0.0]], np.zeros(4))[0] == s.sigma0


def test_colors_in_unit_range():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(2000, 3))
    for mode in ("sinusoid", "checker", "flat"):
        c = scene_color(AnalyticScene(color_mode=mode, amplitude=0.6), pts, rng.uniform(-1, 1, 4))
        assert c.min() >= 0 and c.max() <= 1


def test_scene_validation():
    with pytest.raises(ValueError):
        AnalyticScene(sigma0=-1.0)
    with pytest.raises(ValueError):
        AnalyticScene(semi_axes=(0.5, 0.0, 0.5))
    with pytest.raises(ValueError):
        AnalyticScene(kind="torus")


def bump_extent(scene, k, beta_k):
    """Outer edge of bump ``k`` along its outward axis, located by bisection on the half-density level."""
    anchor = scene.anchors[k]
    axis = anchor / np.linalg.norm(anchor)
    beta = np.zeros(scene.n_exp)
    beta[k] = beta_k
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if scene_density(scene, [anchor + mid * axis], beta)[0] >= 0.5 * scene.sigma0:
            lo = mid
        else:
            hi = mid
    return lo


def test_bump_displacement_linear_in_beta():
    s = AnalyticScene()
    for k in range(s.n_exp):
        e = [bump_extent(s, k, b) for b in (-0.5, 0.0, 0.5, 1.0)]
        slopes = np.diff(e) / np.diff([-0.5, 0.0, 0.5, 1.0])
        assert np.max(np.abs(slopes - slopes[0])) <= 1e-9
        assert slopes[0] == pytest.approx(s.bump_gain, abs=1e-9)


def test_high_frequency_period_in_fine_pixels():
    s = AnalyticScene(period=0.1)
    intr = Intrinsics(128.0, 128.0, 64.0, 64.0, 128, 128)
    assert pattern_period_pixels(s, intr, 2.0) <= 8
    x = np.linspace(-0.3, 0.3, 50)
    pts = np.stack([x, np.full_like(x, 0.1), np.full_like(x, 0.0)], axis=1)
    shifted = pts + [0.1, 0.0, 0.0]
    np.testing.assert_allclose(scene_color(s, pts, np.zeros(4)), scene_color(s, shifted, np.zeros(4)),
                               rtol=0, atol=1e-12)


def test_oracle_uniform_slab_closed_form():
    # slab [1.75, 2.25] along the axis covers exactly two of eight bins on [1, 3]
    slab = AnalyticScene(kind="slab", center=(0.0, 0.0, 2.0), sigma0=3.0, slab_half_thickness=0.25 - 1e-9,
                         edge=1e-9, color_mode="flat", base_color=(0.2, 0.4, 0.6))
    rgb, op = oracle_rays(slab, np.zeros(4), RigidPose.identity(), [[0, 0, 0]], [[0, 0, 1.0]], n_samples=8,
                          background=0.1)
    trans = np.exp(-3.0 * 0.5)
    np.testing.assert_allclose(rgb[0], np.array([0.2, 0.4, 0.6]) * (1 - trans) + 0.1 * trans, rtol=0, atol=1e-12)
    assert op[0] == pytest.approx(1 - trans, abs=1e-12)


def test_oracle_empty_scene_is_background():
    rgb, op = oracle_image(AnalyticScene(sigma0=0.0), np.zeros(4), pose_facing_camera(np.eye(3), [0, 0, 2.0]),
                           TINY, RigidPose.identity(), n_samples=32, background=0.3)
    assert np.all(op == 0) and np.all(rgb == 0.3)


def test_trajectory_bounds():
    cfg = TrajectoryConfig(n_frames=200, max_translation=0.1, max_rotation_deg=10)
    traj = make_trajectory(cfg, 3, 0)
    assert len(traj) == 200
    for pose, beta in traj:
        center = canonical_to_camera(pose, np.zeros(3))
        assert abs(center[0]) <= 0.1 + 1e-12 and abs(center[1]) <= 0.1 + 1e-12
        assert center[2] == pytest.approx(2.0, abs=1e-12)
        assert np.all(np.abs(beta) < 1)
        angle = np.degrees(np.arccos(np.clip((np.trace(pose.R) - 1) / 2, -1, 1)))
        assert angle <= 10 * np.sqrt(3) + 1e-9
    again = make_trajectory(cfg, 3, 0)
    assert all(a[0].to_list() == b[0].to_list() for a, b in zip(traj, again))


def tiny_scene_file(n=5, shift=(0.0, 0.0)):
    return SceneFile(intrinsics=TINY, margin=4, oracle_samples=48,
                     trajectory=TrajectoryConfig(n_frames=n, depth=2.0), holdout_shift=shift)


def test_scene_file_round_trip(tmp_path):
    sf = SceneFile(scene=AnalyticScene(kind="slab", period=0.1, base_color=(0.1, 0.2, 0.3)), intrinsics=TINY,
                   margin=3, holdout_shift=(2.5, -1.0))
    assert SceneFile.parse(sf.serialize()) == sf
    sf.save(tmp_path / "s.txt")
    assert SceneFile.load(tmp_path / "s.txt") == sf
    with pytest.raises(ValueError):
        SceneFile.parse("scene.bogus = 1\n")


def test_make_dataset_split_and_round_trip(tmp_path):
    man = make_dataset(tiny_scene_file(5), tmp_path / "a", seed=3)
    assert holdout_count(5) == 1 and holdout_count(40) == 8
    assert len(man.train) == 4 and len(man.holdout) == 1 and man.holdout[0].frame == 4
    back = Manifest.load(tmp_path / "a")
    for r1, r2 in zip(man.frames, back.frames):
        assert np.array_equal(r1.beta, r2.beta)
        assert r1.pose.to_list() == r2.pose.to_list()
        assert (r1.crop, r1.split, r1.gamma_index) == (r2.crop, r2.split, r2.gamma_index)
    img = back.image(back.frames[0])
    assert img.shape == (24, 24, 3)
    assert set(np.unique(back.mask(back.frames[0]))) <= {0.0, 1.0}
    with pytest.raises(ValueError):
        make_dataset(tiny_scene_file(4), tmp_path / "b", seed=0)


def test_make_dataset_byte_identical(tmp_path):
    make_dataset(tiny_scene_file(5), tmp_path / "a", seed=7)
    make_dataset(tiny_scene_file(5), tmp_path / "b", seed=7, threads=3)
    for name in sorted(p.name for p in (tmp_path / "a" / "frames").iterdir()):
        assert (tmp_path / "a" / "frames" / name).read_bytes() == (tmp_path / "b" / "frames" / name).read_bytes()
    assert (tmp_path / "a" / "manifest.txt").read_text().replace(str(tmp_path / "a"), "") == \
        (tmp_path / "b" / "manifest.txt").read_text().replace(str(tmp_path / "b"), "")


def test_holdout_shift_moves_head_in_image(tmp_path):
    plain = make_dataset(tiny_scene_file(5), tmp_path / "a", seed=1)
    moved = make_dataset(tiny_scene_file(5, shift=(3.0, -2.0)), tmp_path / "b", seed=1)
    p0, p1 = plain.holdout[0].pose, moved.holdout[0].pose
    c0, c1 = canonical_to_camera(p0, np.zeros(3)), canonical_to_camera(p1, np.zeros(3))
    u0 = TINY.fx * c0[:2] / c0[2]
    u1 = TINY.fx * c1[:2] / c1[2]
    # poses carry yaw and pitch, so the planar shift is close but not exact
    np.testing.assert_allclose(u1 - u0, [3.0, -2.0], rtol=0, atol=0.05)
    assert plain.train[0].pose.to_list() == moved.train[0].pose.to_list()
