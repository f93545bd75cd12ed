import numpy as np
import pytest
from scipy import stats
from scipy.spatial.transform import Rotation

from tripyr.camera import Intrinsics, RigidPose
from tripyr.facegeom import (FrameRecord, ShapeBasis, augment_record, blend_shape, make_synthetic_basis,
                             pose_shape, record_intrinsics, sample_crop)


@pytest.fixture(scope="module")
def basis():
    return make_synthetic_basis(n_vertices=300, n_id=3, n_exp=4)


def test_basis_shapes(basis):
    assert basis.n_vertices == 300 and basis.n_id == 3 and basis.n_exp == 4
    with pytest.raises(ValueError):
        ShapeBasis(np.zeros(7), np.zeros((7, 1)), np.zeros((7, 1)))
    with pytest.raises(ValueError):
        make_synthetic_basis(n_vertices=600)


def test_blend_zero_and_one_hot(basis):
    np.testing.assert_array_equal(blend_shape(basis, np.zeros(3), np.zeros(4)), basis.mean)
    for k in range(4):
        beta = np.eye(4)[k]
        np.testing.assert_allclose(blend_shape(basis, np.zeros(3), beta), basis.mean + basis.exp_basis[:, k],
                                   rtol=0, atol=1e-15)


def test_blend_against_loop(basis):
    rng = np.random.default_rng(0)
    alpha, beta = rng.normal(size=3), rng.normal(size=4)
    out = blend_shape(basis, alpha, beta)
    ref = np.zeros_like(basis.mean)
    for r in range(basis.mean.size):
        acc = basis.mean[r]
        for c in range(3):
            acc += basis.id_basis[r, c] * alpha[c]
        for c in range(4):
            acc += basis.exp_basis[r, c] * beta[c]
        ref[r] = acc
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_blend_dimension_errors(basis):
    with pytest.raises(ValueError):
        blend_shape(basis, np.zeros(2), np.zeros(4))
    with pytest.raises(ValueError):
        blend_shape(basis, np.zeros(3), np.zeros(5))


def test_blend_affine_in_beta(basis):
    # expression coefficients chosen as dyadic rationals so sums are exact
    alpha = np.array([0.5, -0.25, 0.125])
    b1, b2 = np.array([0.5, 0.25, -1.0, 0.75]), np.array([-0.125, 1.0, 0.5, 0.25])
    lhs = blend_shape(basis, alpha, b1 + b2) - blend_shape(basis, alpha, b2)
    rhs = blend_shape(basis, alpha, b1) - blend_shape(basis, alpha, np.zeros(4))
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-14)


def test_expression_bumps_move_outward(basis):
    v0 = basis.mean.reshape(-1, 3)
    v1 = blend_shape(basis, np.zeros(3), np.eye(4)[0]).reshape(-1, 3)
    moved = np.linalg.norm(v1, axis=1) - np.linalg.norm(v0, axis=1)
    assert moved.max() > 0.05 and moved.min() >= -1e-12


def test_pose_shape(basis):
    v = basis.mean
    np.testing.assert_array_equal(pose_shape(v, RigidPose.identity()), v)
    t = np.array([0.1, -0.2, 0.3])
    d = pose_shape(v, RigidPose(np.eye(3), t)).reshape(-1, 3) - v.reshape(-1, 3)
    np.testing.assert_allclose(d, np.broadcast_to(t, d.shape), rtol=0, atol=1e-15)


def test_pose_shape_rigid(basis):
    rng = np.random.default_rng(5)
    p = RigidPose(Rotation.random(random_state=5).as_matrix(), rng.normal(size=3))
    a = basis.mean.reshape(-1, 3)
    b = pose_shape(basis.mean, p).reshape(-1, 3)
    da = np.linalg.norm(a[:, None] - a[None], axis=-1)
    db = np.linalg.norm(b[:, None] - b[None], axis=-1)
    assert np.max(np.abs(da - db)) <= 1e-10


def test_sample_crop_basics():
    assert sample_crop(3, 512, 512) == (0, 0)
    assert sample_crop(7) == sample_crop(7)
    with pytest.raises(ValueError):
        sample_crop(0, 100, 200)
    g1, g2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_crop(g1) for _ in range(5)] == [sample_crop(g2) for _ in range(5)]


def test_sample_crop_uniform_chi2():
    rng = np.random.default_rng(11)
    draws = np.array([sample_crop(rng, 736, 512) for _ in range(100_000)])
    assert draws.min() == 0 and draws.max() == 224
    for axis in range(2):
        counts = np.bincount(draws[:, axis], minlength=225)
        assert stats.chisquare(counts).pvalue > 0.01


def make_record(**kw):
    base = dict(frame=3, beta=np.array([0.1, -0.2]), gamma_index=3, pose=RigidPose.identity(), crop=(112, 112))
    base.update(kw)
    return FrameRecord(**base)


def test_record_validation():
    with pytest.raises(ValueError):
        make_record(crop=(225, 0))
    with pytest.raises(ValueError):
        make_record(crop=(-1, 0))
    with pytest.raises(ValueError):
        make_record(beta=np.array([np.nan]))


def test_augment_record():
    rec = make_record()
    intr = Intrinsics(512.0, 512.0, 256.0, 256.0, 512, 512)
    assert record_intrinsics(intr, rec) == intr
    a = augment_record(rec, 10, 200)
    b = augment_record(rec, 224, 0)
    for r in (a, b):
        assert r.gamma_index == rec.gamma_index and r.pose is rec.pose
        np.testing.assert_array_equal(r.beta, rec.beta)
    assert a.crop == (10, 200) and rec.crop == (112, 112)
    shifted = record_intrinsics(intr, a)
    assert (shifted.cx, shifted.cy) == (256.0 + 102, 256.0 - 88)
    with pytest.raises(ValueError):
        augment_record(rec, 300, 0)
