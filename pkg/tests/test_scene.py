import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octsplat.scene import (Camera, GaussianPrimitive, OctreeScene, SceneError,
                            covariance_of, eval_gaussian, look_at_camera,
                            look_at_quaternion, quat_normalize, quat_to_rot,
                            rot_to_quat, round_half_away)


def make_primitive(**kw):
    base = dict(center=[0, 0, 0], scale=[1, 1, 1], rotation=[1, 0, 0, 0],
                opacity=0.5, color=[0.5, 0.5, 0.5])
    base.update(kw)
    return GaussianPrimitive(**base)


def test_round_half_away_convention():
    vals = round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, -2.5, 0.4, -0.4, 3.3219])
    assert vals.tolist() == [1, 2, 3, -1, -2, -3, 0, 0, 3]


class TestCovarianceOf:
    def test_identity(self):
        p = make_primitive(scale=[1, 1, 1])
        assert np.allclose(covariance_of(p), np.eye(3), atol=1e-12)

    def test_diagonal(self):
        p = make_primitive(scale=[2, 1, 1])
        assert np.allclose(covariance_of(p), np.diag([4, 1, 1]), atol=1e-12)

    def test_z_rotation_swaps_axes(self):
        # 90 degrees about z: R diag(4,1,1) R^T = diag(1,4,1)
        s = np.sqrt(0.5)
        p = make_primitive(scale=[2, 1, 1], rotation=[s, 0, 0, s])
        assert np.allclose(covariance_of(p), np.diag([1, 4, 1]), atol=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = make_primitive(scale=rng.uniform(0.1, 3, 3),
                               rotation=quat_normalize(rng.normal(size=4)))
            cov = covariance_of(p)
            assert np.max(np.abs(cov - cov.T)) < 1e-12

    def test_eigenvalue_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            scale = rng.uniform(0.1, 3, 3)
            p = make_primitive(scale=scale, rotation=quat_normalize(rng.normal(size=4)))
            eig = np.linalg.eigvalsh(covariance_of(p))
            assert np.all(eig >= scale.min()**2 - 1e-9)
            assert np.all(eig <= scale.max()**2 + 1e-9)


class TestEvalGaussian:
    def test_center_is_one(self):
        assert eval_gaussian(make_primitive(), [0, 0, 0]) == 1.0

    def test_unit_mahalanobis(self):
        val = eval_gaussian(make_primitive(), [1, 0, 0])
        assert abs(val - np.exp(-0.5)) < 1e-12

    def test_scaled_axis(self):
        p = make_primitive(scale=[2, 1, 1])
        assert abs(eval_gaussian(p, [2, 0, 0]) - np.exp(-0.5)) < 1e-12

    def test_rotation_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            scale = rng.uniform(0.3, 2, 3)
            q = quat_normalize(rng.normal(size=4))
            x = rng.normal(size=3)
            base = make_primitive(scale=scale)
            rotated = make_primitive(scale=scale, rotation=q)
            r = quat_to_rot(q)
            assert abs(eval_gaussian(base, x) - eval_gaussian(rotated, r @ x)) < 1e-10

    def test_in_unit_interval(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = make_primitive(scale=rng.uniform(0.2, 2, 3),
                               rotation=quat_normalize(rng.normal(size=4)))
            v = eval_gaussian(p, rng.normal(size=3))
            assert 0.0 < v <= 1.0


class TestPrimitiveValidation:
    def test_negative_scale_rejected(self):
        with pytest.raises(SceneError):
            make_primitive(scale=[1, -1, 1]).validate()

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(SceneError):
            make_primitive(rotation=[2, 0, 0, 0]).validate()

    def test_opacity_range(self):
        with pytest.raises(SceneError):
            make_primitive(opacity=1.5).validate()


def test_quat_rot_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(30):
        q = quat_normalize(rng.normal(size=4))
        if q[0] < 0:
            q = -q
        r = quat_to_rot(q)
        q2 = rot_to_quat(r)
        if q2[0] < 0:
            q2 = -q2
        assert np.allclose(q, q2, atol=1e-9)


def test_look_at_points_camera_forward():
    eye = np.array([3.0, 1.0, -2.0])
    target = np.array([0.0, 0.0, 0.0])
    q = look_at_quaternion(eye, target)
    r = quat_to_rot(q)
    fwd = r[2]
    expect = (target - eye) / np.linalg.norm(target - eye)
    assert np.allclose(fwd, expect, atol=1e-12)
    # target projects to the optical axis
    cam = look_at_camera(eye, target, fx=50, width=64, height=48)
    xc = cam.world_to_cam(target[None])[0]
    assert abs(xc[0]) < 1e-9 and abs(xc[1]) < 1e-9 and xc[2] > 0


class TestCameraValidation:
    def test_bad_focal(self):
        cam = Camera([0, 0, 0], [1, 0, 0, 0], fx=-1, fy=1, cx=0, cy=0, width=8, height=8)
        with pytest.raises(SceneError):
            cam.validate()

    def test_bad_footprint(self):
        cam = Camera([0, 0, 0], [1, 0, 0, 0], fx=1, fy=1, cx=0, cy=0,
                     width=8, height=8, footprint_scale=0)
        with pytest.raises(SceneError):
            cam.validate()


class TestOctreeScene:
    def make(self, levels=2):
        return OctreeScene(epsilon=1.0, num_levels=levels, d_min_hat=1, d_max_hat=4)

    def test_add_anchor_and_occupancy(self):
        scene = self.make()
        i = scene.add_anchor(0, (1, -2, 3))
        assert scene.anchor_count == 1
        assert scene.occupancy[(0, (1, -2, 3))] == i
        assert np.allclose(scene.voxel_centers[i], [1, -2, 3])

    def test_duplicate_voxel_rejected(self):
        scene = self.make()
        scene.add_anchor(0, (0, 0, 0))
        with pytest.raises(SceneError):
            scene.add_anchor(0, (0, 0, 0))

    def test_same_lattice_different_level_ok(self):
        scene = self.make()
        scene.add_anchor(0, (0, 0, 0))
        scene.add_anchor(1, (0, 0, 0))
        assert scene.anchor_count == 2
        assert np.allclose(scene.voxel_centers[1], [0, 0, 0])

    def test_level_out_of_range(self):
        scene = self.make()
        with pytest.raises(SceneError):
            scene.add_anchor(2, (0, 0, 0))

    def test_keep_anchors_reindexes(self):
        scene = self.make()
        scene.add_anchor(0, (0, 0, 0))
        scene.add_anchor(1, (0, 0, 0))
        scene.add_anchor(1, (1, 0, 0))
        kept = scene.keep_anchors(np.array([True, False, True]))
        assert kept.tolist() == [0, 2]
        assert scene.anchor_count == 2
        scene.validate()
        assert (1, (1, 0, 0)) in scene.occupancy

    def test_anchor_view_round_trips_children(self):
        scene = self.make()
        rng = np.random.default_rng(0)
        scene.add_anchor(1, (2, 0, -1),
                         offsets=rng.normal(0, 0.1, (4, 3)),
                         scales=rng.uniform(0.1, 0.3, (4, 3)),
                         opacities=rng.uniform(0, 1, 4),
                         colors=rng.uniform(0, 1, (4, 3)))
        a = scene.anchor(0)
        assert a.level == 1
        assert len(a.children) == 4
        child = a.children[2]
        assert np.allclose(child.center,
                           scene.voxel_centers[0] + scene.offsets[0, 2])

    def test_counts_per_level(self):
        scene = self.make()
        scene.add_anchor(0, (0, 0, 0))
        scene.add_anchor(1, (0, 0, 0))
        scene.add_anchor(1, (1, 1, 1))
        assert scene.counts_per_level() == [1, 2]

    def test_voxel_size_halves(self):
        scene = OctreeScene(epsilon=2.0, num_levels=4, d_min_hat=1, d_max_hat=8)
        assert scene.voxel_size(0) == 2.0
        assert scene.voxel_size(3) == 0.25


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False))
def test_round_half_away_magnitude_property(x):
    r = float(round_half_away(x))
    assert abs(r - x) <= 0.5
    assert r == int(r)
    if abs(x - np.trunc(x)) == 0.5:
        assert abs(r) == abs(x) + 0.5
