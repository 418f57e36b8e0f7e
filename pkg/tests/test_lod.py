import math

import numpy as np
import pytest

from octsplat.lod import (counts_per_level, fractional_lod, select,
                          selected_primitive_count)
from octsplat.rasterizer import render_view
from octsplat.scene import Camera, OctreeScene, SceneError, look_at_camera


def make_scene(num_levels=4, d_max=16.0, biases=None, levels_at_origin=None):
    scene = OctreeScene(epsilon=1.0, num_levels=num_levels, d_min_hat=1.0,
                        d_max_hat=d_max, children_per_anchor=4)
    for lvl in (levels_at_origin or range(num_levels)):
        scene.add_anchor(lvl, (0, 0, 0))
    if biases is not None:
        scene.lod_bias = np.asarray(biases, dtype=np.float64)
    return scene


def cam_at_distance(d):
    return look_at_camera([0, 0, -d], [0, 0, 0], fx=50, width=32, height=32)


def psi_oracle(lstar: float, k: int) -> int:
    """Clamp-then-round integer LOD, written with plain math."""
    clamped = min(max(lstar, 0.0), float(k - 1))
    return int(math.floor(clamped + 0.5))  # clamped >= 0, so this is half-away


class TestFractionalLod:
    def test_at_dmax(self):
        scene = make_scene(d_max=16.0)
        assert fractional_lod(16.0, scene) == 0.0

    def test_quarter_distance(self):
        scene = make_scene(d_max=16.0)
        assert fractional_lod(4.0, scene) == 2.0

    def test_beyond_dmax_negative(self):
        scene = make_scene(d_max=16.0)
        assert fractional_lod(32.0, scene) == -1.0

    def test_nonpositive_distance(self):
        scene = make_scene()
        with pytest.raises(SceneError):
            fractional_lod(0.0, scene)


class TestSelect:
    def test_far_camera_selects_only_level0(self):
        scene = make_scene(num_levels=4, d_max=16.0)
        q = select(scene, cam_at_distance(16.0), train_mode=True)
        assert q.include.tolist() == [True, False, False, False]
        assert np.all(q.weight[q.include] == 1.0)

    def test_integer_boundary_inference(self):
        # L* = 2 exactly: levels {0,1,2} at weight 1, level 3 weight 0
        scene = make_scene(num_levels=4, d_max=16.0)
        q = select(scene, cam_at_distance(4.0), train_mode=False)
        assert q.include.tolist() == [True, True, True, False]
        assert q.weight.tolist() == [1.0, 1.0, 1.0, 0.0]

    def test_fractional_inference_blend(self):
        # L* = 1.25: levels {0,1} weight 1, level 2 weight 0.25, level 3 out
        scene = make_scene(num_levels=4, d_max=16.0)
        d = 16.0 / 2**1.25
        q = select(scene, cam_at_distance(d), train_mode=False)
        assert q.include.tolist() == [True, True, True, False]
        assert np.allclose(q.weight, [1.0, 1.0, 0.25, 0.0], atol=1e-9)

    def test_train_mode_hard_round(self):
        scene = make_scene(num_levels=4, d_max=16.0)
        d = 16.0 / 2**1.25  # round(1.25) = 1
        q = select(scene, cam_at_distance(d), train_mode=True)
        assert q.include.tolist() == [True, True, False, False]
        assert np.all(q.weight[q.include] == 1.0)

    def test_train_blend_transition_weight(self):
        # L* = 1.7: hard mask includes {0,1,2}(round=2); level 2 gets frac 0.7
        scene = make_scene(num_levels=4, d_max=16.0)
        d = 16.0 / 2**1.7
        q = select(scene, cam_at_distance(d), train_mode=True, blend_transition=True)
        assert q.include.tolist() == [True, True, True, False]
        assert np.allclose(q.weight, [1.0, 1.0, 0.7, 0.0], atol=1e-9)

    def test_bias_shifts_selection(self):
        scene = make_scene(num_levels=4, d_max=16.0, biases=[0, 0, -0.6, 0])
        d = 16.0 / 2**2  # raw L* = 2; biased level-2 anchor drops to 1.4
        q = select(scene, cam_at_distance(d), train_mode=True)
        assert q.include.tolist() == [True, True, False, False]

    def test_lod_override(self):
        scene = make_scene(num_levels=4)
        q = select(scene, cam_at_distance(16.0), train_mode=False, lod_override=2)
        assert q.include.tolist() == [True, True, True, False]
        assert np.all(q.weight[q.include] == 1.0)

    def test_max_level_cap(self):
        scene = make_scene(num_levels=4, d_max=16.0)
        q = select(scene, cam_at_distance(1.0), train_mode=True, max_level=1)
        assert q.include.tolist() == [True, True, False, False]

    def test_clamp_correctness(self):
        scene = make_scene(num_levels=4, d_max=16.0)
        for d in (0.001, 0.1, 1.0, 16.0, 1e6):
            q = select(scene, cam_at_distance(d), train_mode=True)
            assert np.all(q.lhat >= 0) and np.all(q.lhat <= 3)
            assert np.all(q.lstar >= 0) and np.all(q.lstar <= 3)

    def test_empty_scene(self):
        scene = OctreeScene(1.0, 2, 1.0, 2.0)
        q = select(scene, cam_at_distance(1.0), train_mode=True)
        assert len(q.include) == 0
        assert selected_primitive_count(q, scene) == 0


class TestMonotonicity:
    def test_single_anchor_never_dropped_when_closer(self):
        scene = make_scene(num_levels=4, d_max=16.0, levels_at_origin=[3])
        included_far = None
        for d in np.geomspace(64.0, 0.5, 40):
            q = select(scene, cam_at_distance(d), train_mode=True)
            if included_far is not None and included_far:
                assert q.include[0], f"anchor dropped while approaching at d={d}"
            included_far = bool(q.include[0])

    def test_ray_sweep_supersets(self):
        rng = np.random.default_rng(0)
        scene = OctreeScene(epsilon=1.0, num_levels=4, d_min_hat=1.0,
                            d_max_hat=32.0, children_per_anchor=4)
        for lvl in range(4):
            for _ in range(5):
                lat = tuple(rng.integers(-2, 3, 3).tolist())
                if not scene.has_anchor(lvl, lat):
                    scene.add_anchor(lvl, lat)
        prev = None
        for d in np.geomspace(64.0, 8.0, 25):  # stay outside the cloud
            q = select(scene, cam_at_distance(d), train_mode=True)
            cur = set(np.flatnonzero(q.include).tolist())
            if prev is not None:
                assert prev.issubset(cur)
            prev = cur


class TestEq5Oracle:
    def test_integer_lod_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            k = int(rng.integers(1, 9))
            d_max = float(rng.uniform(0.5, 1000.0))
            d = float(rng.uniform(1e-3, 4.0) * d_max)
            lstar = math.log2(d_max / d)
            scene = OctreeScene(1.0, k, d_max / 64, d_max)
            scene.add_anchor(0, (0, 0, 0))
            q = select(scene, cam_at_distance_general(d), train_mode=True)
            assert int(q.lhat[0]) == psi_oracle(lstar, k)

    def test_zero_bias_inclusion_set(self):
        scene = make_scene(num_levels=5, d_max=32.0)
        for d in np.geomspace(0.8, 64.0, 60):
            q = select(scene, cam_at_distance(d), train_mode=True)
            lhat = psi_oracle(math.log2(scene.d_max_hat / d), 5)
            expect = [lvl <= lhat for lvl in range(5)]
            assert q.include.tolist() == expect


def cam_at_distance_general(d):
    return Camera(position=np.array([0.0, 0.0, -d]), rotation=np.array([1.0, 0, 0, 0]),
                  fx=50, fy=50, cx=16, cy=16, width=32, height=32)


def test_selected_primitive_count():
    scene = make_scene(num_levels=4, d_max=16.0)
    q = select(scene, cam_at_distance(1.0), train_mode=True)
    assert selected_primitive_count(q, scene) == 4 * int(q.include.sum())
    assert counts_per_level(q, scene) == [1, 1, 1, 1]


class TestFrustumPostFilter:
    def build_row_scene(self):
        # anchors strung out along +x at unit spacing on level 1
        scene = OctreeScene(epsilon=2.0, num_levels=2, d_min_hat=1.0,
                            d_max_hat=256.0, children_per_anchor=2)
        for i in range(-6, 7):
            scene.add_anchor(1, (i, 0, 0))
        return scene

    def test_offscreen_anchors_dropped(self):
        scene = self.build_row_scene()
        # narrow camera staring at the +x end of the row from nearby
        cam = look_at_camera([6, 0, -4], [6, 0, 0], fx=400, width=32, height=32)
        full = select(scene, cam, train_mode=True)
        culled = select(scene, cam, train_mode=True, frustum_cull=True)
        assert culled.include.sum() < full.include.sum()
        assert np.all(culled.include <= full.include)  # only ever removes

    def test_culling_never_changes_the_render(self):
        scene = self.build_row_scene()
        rng = np.random.default_rng(0)
        scene.colors = rng.uniform(0.2, 1.0, scene.colors.shape).astype(np.float32)
        scene.opacities = np.full_like(scene.opacities, 0.8)
        for eye, target in (([6, 0, -4], [6, 0, 0]), ([0, 2, -8], [0, 0, 0])):
            cam = look_at_camera(eye, target, fx=400, width=32, height=32)
            plain, _ = render_view(scene, cam, mode="inference")
            culled, _ = render_view(scene, cam, mode="inference", frustum_cull=True)
            assert np.array_equal(plain.color, culled.color)

    def test_behind_camera_anchor_dropped(self):
        scene = OctreeScene(epsilon=1.0, num_levels=1, d_min_hat=1.0, d_max_hat=4.0)
        scene.add_anchor(0, (0, 0, 0))
        scene.add_anchor(0, (0, 0, -30))  # far behind the camera below
        cam = look_at_camera([0, 0, -10], [0, 0, 0], fx=50, width=32, height=32)
        culled = select(scene, cam, train_mode=True, frustum_cull=True)
        assert culled.include.tolist() == [True, False]
