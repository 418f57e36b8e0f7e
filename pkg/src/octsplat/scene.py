"""Scene data model: Gaussian primitives, octree anchors, cameras.

All quaternions are (w, x, y, z). The rounding operator used for lattice
coordinates and level selection is round-half-away-from-zero, fixed once
here so every quantization in the codebase is bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_CHILDREN_PER_ANCHOR = 4


class SceneError(ValueError):
    """Violated scene-level precondition or invariant."""


def round_half_away(x):
    """Round to the nearest integer with halves away from zero.

    This is the single rounding convention used for voxel lattices and
    integer LOD selection (numpy's default rounds half to even, which
    would make lattice coordinates depend on parity).
    """
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


# ---------------------------------------------------------------------------
# quaternions


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise SceneError("zero quaternion")
    return q / n


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (or stack of them) from unit quaternion(s) (w,x,y,z)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def look_at_quaternion(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera quaternion for a camera at `eye` looking at `target`.

    Camera frame: +x right, +y down, +z forward (toward the target).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n == 0.0:
        raise SceneError("look_at: eye equals target")
    fwd = fwd / n
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        # looking straight along `up`; pick an arbitrary perpendicular
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            right = np.cross(fwd, np.array([0.0, 0.0, 1.0]))
            rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows are camera axes in world coords
    return rot_to_quat(rot)


def rot_to_quat(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w,x,y,z) from a rotation matrix (Shepperd's method)."""
    r = np.asarray(r, dtype=np.float64)
    t = np.trace(r)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# value types


@dataclass
class GaussianPrimitive:
    """One renderable anisotropic 3D Gaussian.

    `scale` holds per-axis standard deviations (world units, strictly
    positive); `rotation` is a unit quaternion; `opacity` and the `color`
    channels live in [0, 1].
    """

    center: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        self.opacity = float(self.opacity)

    def validate(self) -> None:
        if not np.all(self.scale > 0):
            raise SceneError("scale components must be strictly positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise SceneError("quaternion must be unit length")
        if not (0.0 <= self.opacity <= 1.0):
            raise SceneError("opacity outside [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise SceneError("color channel outside [0, 1]")


def covariance_of(p: GaussianPrimitive) -> np.ndarray:
    """Full 3x3 covariance R diag(scale^2) R^T of a primitive."""
    r = quat_to_rot(quat_normalize(p.rotation))
    return (r * (p.scale**2)) @ r.T


def eval_gaussian(p: GaussianPrimitive, x) -> float:
    """Unnormalized Gaussian density exp(-0.5 (x-mu)^T Sigma^-1 (x-mu))."""
    d = np.asarray(x, dtype=np.float64).reshape(3) - p.center
    cov = covariance_of(p)
    return float(np.exp(-0.5 * d @ np.linalg.solve(cov, d)))


@dataclass
class GrowthStats:
    """Windowed densification bookkeeping for one anchor's children."""

    grad_accum: np.ndarray  # (k,) summed screen-gradient norms per child
    opacity_accum: np.ndarray  # (k,) summed rendered opacities per child
    count: int = 0  # iterations in which the anchor was selected

    @classmethod
    def zeros(cls, k: int) -> "GrowthStats":
        return cls(np.zeros(k), np.zeros(k), 0)


@dataclass
class Anchor:
    """An octree-resident unit owning k child Gaussians.

    Child centers are stored as offsets from `voxel_center`. `level` is
    immutable after creation; promotion creates a new anchor.
    """

    voxel_center: np.ndarray
    lattice: np.ndarray  # integer coordinates on the level's lattice
    level: int
    lod_bias: float
    children: list
    grow_stats: GrowthStats | None = None

    def __post_init__(self):
        self.voxel_center = np.asarray(self.voxel_center, dtype=np.float64).reshape(3)
        self.lattice = np.asarray(self.lattice, dtype=np.int64).reshape(3)


@dataclass
class Camera:
    """Pinhole pose + intrinsics. `rotation` maps world to camera space.

    Camera frame: +x right, +y down, +z forward. `footprint_scale`
    multiplies observation distances for mixed-intrinsics datasets.
    """

    position: np.ndarray
    rotation: np.ndarray  # world-to-camera unit quaternion (w,x,y,z)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    footprint_scale: float = 1.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise SceneError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise SceneError("resolution must be positive")
        if self.footprint_scale <= 0:
            raise SceneError("footprint_scale must be positive")

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_rot(quat_normalize(self.rotation))

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (self.rotation_matrix() @ (pts - self.position).T).T


def look_at_camera(eye, target, fx, width, height, *, up=(0.0, 1.0, 0.0), fy=None,
                   footprint_scale=1.0) -> Camera:
    """Convenience constructor used by fixtures and trajectory builders."""
    fy = fx if fy is None else fy
    return Camera(
        position=np.asarray(eye, dtype=np.float64),
        rotation=look_at_quaternion(eye, target, up),
        fx=float(fx), fy=float(fy),
        cx=width / 2.0, cy=height / 2.0,
        width=int(width), height=int(height),
        footprint_scale=float(footprint_scale),
    )


# ---------------------------------------------------------------------------
# the scene container

_CHILD_INIT_OPACITY = 0.1
_CHILD_INIT_COLOR = 0.5


class OctreeScene:
    """The full multi-level anchor set, stored as flat arrays.

    Anchors are addressed by index; `occupancy` maps (level, lattice
    coordinate) to that index and stays a bijection with the anchor list.
    Child attributes are float32 (matching the on-disk container exactly),
    while all math upcasts to float64.
    """

    def __init__(self, epsilon: float, num_levels: int, d_min_hat: float,
                 d_max_hat: float, children_per_anchor: int = DEFAULT_CHILDREN_PER_ANCHOR):
        if num_levels < 1:
            raise SceneError("scene needs at least one level")
        if epsilon <= 0:
            raise SceneError("base voxel size must be positive")
        self.epsilon = float(epsilon)
        self.num_levels = int(num_levels)
        self.d_min_hat = float(d_min_hat)
        self.d_max_hat = float(d_max_hat)
        self.children_per_anchor = int(children_per_anchor)
        k = self.children_per_anchor
        self.levels = np.zeros(0, dtype=np.int32)
        self.lattice = np.zeros((0, 3), dtype=np.int64)
        self.lod_bias = np.zeros(0, dtype=np.float64)
        self.offsets = np.zeros((0, k, 3), dtype=np.float32)
        self.scales = np.zeros((0, k, 3), dtype=np.float32)
        self.rotations = np.zeros((0, k, 4), dtype=np.float32)
        self.opacities = np.zeros((0, k), dtype=np.float32)
        self.colors = np.zeros((0, k, 3), dtype=np.float32)
        self.grad_accum = np.zeros((0, k), dtype=np.float64)
        self.opacity_accum = np.zeros((0, k), dtype=np.float64)
        self.stat_count = np.zeros(0, dtype=np.int64)
        self.occupancy: dict[tuple[int, tuple[int, int, int]], int] = {}

    # -- geometry ----------------------------------------------------------

    def voxel_size(self, level) -> np.ndarray | float:
        return self.epsilon / np.power(2.0, level)

    @property
    def anchor_count(self) -> int:
        return len(self.levels)

    @property
    def voxel_centers(self) -> np.ndarray:
        eps = self.voxel_size(self.levels.astype(np.float64))
        return self.lattice.astype(np.float64) * eps[:, None]

    def counts_per_level(self) -> list[int]:
        return [int(np.sum(self.levels == l)) for l in range(self.num_levels)]

    def centroid(self) -> np.ndarray:
        if self.anchor_count == 0:
            return np.zeros(3)
        return self.voxel_centers.mean(axis=0)

    # -- mutation ----------------------------------------------------------

    def has_anchor(self, level: int, lattice) -> bool:
        return (int(level), tuple(int(c) for c in lattice)) in self.occupancy

    def add_anchor(self, level: int, lattice, *, lod_bias: float = 0.0,
                   offsets=None, scales=None, rotations=None,
                   opacities=None, colors=None) -> int:
        level = int(level)
        if not 0 <= level < self.num_levels:
            raise SceneError(f"level {level} outside [0, {self.num_levels - 1}]")
        key = (level, tuple(int(c) for c in lattice))
        if key in self.occupancy:
            raise SceneError(f"voxel already occupied: {key}")
        k = self.children_per_anchor
        eps_l = self.voxel_size(level)
        if offsets is None:
            offsets = np.zeros((k, 3))
        if scales is None:
            scales = np.full((k, 3), eps_l / 2.0)
        if rotations is None:
            rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (k, 1))
        if opacities is None:
            opacities = np.full(k, _CHILD_INIT_OPACITY)
        if colors is None:
            colors = np.full((k, 3), _CHILD_INIT_COLOR)
        idx = self.anchor_count
        self.levels = np.append(self.levels, np.int32(level))
        self.lattice = np.vstack([self.lattice, np.asarray(key[1], dtype=np.int64)])
        self.lod_bias = np.append(self.lod_bias, np.float64(lod_bias))
        self.offsets = np.concatenate([self.offsets, np.asarray(offsets, np.float32).reshape(1, k, 3)])
        self.scales = np.concatenate([self.scales, np.asarray(scales, np.float32).reshape(1, k, 3)])
        self.rotations = np.concatenate([self.rotations, np.asarray(rotations, np.float32).reshape(1, k, 4)])
        self.opacities = np.concatenate([self.opacities, np.asarray(opacities, np.float32).reshape(1, k)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, np.float32).reshape(1, k, 3)])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros((1, k))])
        self.opacity_accum = np.concatenate([self.opacity_accum, np.zeros((1, k))])
        self.stat_count = np.append(self.stat_count, np.int64(0))
        self.occupancy[key] = idx
        return idx

    def keep_anchors(self, keep_mask: np.ndarray) -> np.ndarray:
        """Drop anchors where the mask is False; returns kept old indices."""
        keep_mask = np.asarray(keep_mask, dtype=bool)
        kept = np.flatnonzero(keep_mask)
        for name in ("levels", "lattice", "lod_bias", "offsets", "scales",
                     "rotations", "opacities", "colors", "grad_accum",
                     "opacity_accum", "stat_count"):
            setattr(self, name, getattr(self, name)[kept])
        self._rebuild_occupancy()
        return kept

    def _rebuild_occupancy(self) -> None:
        self.occupancy = {}
        for i in range(self.anchor_count):
            key = (int(self.levels[i]), tuple(int(c) for c in self.lattice[i]))
            if key in self.occupancy:
                raise SceneError(f"duplicate anchors in voxel {key}")
            self.occupancy[key] = i

    def reset_grow_stats(self) -> None:
        self.grad_accum[:] = 0.0
        self.opacity_accum[:] = 0.0
        self.stat_count[:] = 0

    # -- views -------------------------------------------------------------

    def anchor(self, i: int) -> Anchor:
        """Materialize anchor `i` as a value object (a copy, not a view)."""
        center = self.voxel_centers[i]
        children = [
            GaussianPrimitive(
                center=center + self.offsets[i, c].astype(np.float64),
                scale=self.scales[i, c].astype(np.float64),
                rotation=self.rotations[i, c].astype(np.float64),
                opacity=float(self.opacities[i, c]),
                color=self.colors[i, c].astype(np.float64),
            )
            for c in range(self.children_per_anchor)
        ]
        return Anchor(
            voxel_center=center,
            lattice=self.lattice[i].copy(),
            level=int(self.levels[i]),
            lod_bias=float(self.lod_bias[i]),
            children=children,
            grow_stats=GrowthStats(self.grad_accum[i].copy(),
                                   self.opacity_accum[i].copy(),
                                   int(self.stat_count[i])),
        )

    def anchors(self) -> list[Anchor]:
        return [self.anchor(i) for i in range(self.anchor_count)]

    def copy(self) -> "OctreeScene":
        out = OctreeScene(self.epsilon, self.num_levels, self.d_min_hat,
                          self.d_max_hat, self.children_per_anchor)
        for name in ("levels", "lattice", "lod_bias", "offsets", "scales",
                     "rotations", "opacities", "colors", "grad_accum",
                     "opacity_accum", "stat_count"):
            setattr(out, name, getattr(self, name).copy())
        out.occupancy = dict(self.occupancy)
        return out

    def validate(self) -> None:
        if self.anchor_count != len(self.occupancy):
            raise SceneError("occupancy map out of sync with anchor list")
        if np.any(self.levels < 0) or np.any(self.levels >= self.num_levels):
            raise SceneError("anchor level outside [0, K-1]")
        for key, idx in self.occupancy.items():
            if int(self.levels[idx]) != key[0] or tuple(int(c) for c in self.lattice[idx]) != key[1]:
                raise SceneError("occupancy entry disagrees with anchor arrays")
        if not np.all(self.scales > 0):
            raise SceneError("child scales must stay strictly positive")


def scenes_equal(a: OctreeScene, b: OctreeScene) -> bool:
    """Bitwise equality of every persisted field (used by round-trip tests)."""
    if (a.epsilon, a.num_levels, a.d_min_hat, a.d_max_hat, a.children_per_anchor) != \
       (b.epsilon, b.num_levels, b.d_min_hat, b.d_max_hat, b.children_per_anchor):
        return False
    for name in ("levels", "lattice", "lod_bias", "offsets", "scales",
                 "rotations", "opacities", "colors"):
        x, y = getattr(a, name), getattr(b, name)
        if x.shape != y.shape or not np.array_equal(x, y):
            return False
    return a.occupancy == b.occupancy
