"""Procedural desk-scale scenes with exact poses and depth.

A pinhole camera flies over a textured ground plane (z = 0, world units
in meters) looking roughly downwards. Images are ray-cast per pixel, so
depth and pose labels are exact by construction.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .datasets import DatasetBundle, FrameRecord, Trajectory, rotmat_to_quat
from .inputs import Intrinsics
from .pose import Pose

# camera z (optical axis) -> world -z, camera y (image down) -> world -y
_LOOK_DOWN = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 32
    n_trajectories: int = 4
    frames_per_trajectory: int = 200
    texture_seed: int = 0
    fov_deg: float = 60.0
    region: tuple = (0.5, 2.5)
    height: tuple = (1.2, 1.8)
    max_yaw_deg: float = 45.0
    max_tilt_deg: float = 3.0
    n_test: int = 1

    def __post_init__(self):
        if self.frames_per_trajectory < 1 or self.n_trajectories < 1:
            raise ValueError("scene needs at least one trajectory with at least one frame")
        if self.image_size < 2:
            raise ValueError(f"image_size must be >= 2, got {self.image_size}")
        if not 0 < self.fov_deg < 120:
            raise ValueError(f"fov_deg must be in (0, 120), got {self.fov_deg}")
        if not 0 <= self.n_test <= self.n_trajectories:
            raise ValueError("n_test must be between 0 and n_trajectories")

    @property
    def intrinsics(self) -> Intrinsics:
        f = (self.image_size / 2) / np.tan(np.radians(self.fov_deg) / 2)
        c = (self.image_size - 1) / 2
        return Intrinsics(float(f), float(f), float(c), float(c))

    def to_dict(self) -> dict:
        return asdict(self)


class PlaneTexture:
    """Smooth RGB texture on the ground plane: color ramps plus random sinusoids."""

    def __init__(self, seed: int, n_waves: int = 6):
        rng = np.random.default_rng(seed)
        self.freq = rng.uniform(0.2, 1.0, size=(3, n_waves))  # cycles per meter
        self.angle = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
        self.amp = rng.uniform(0.03, 0.08, size=(3, n_waves))

    def __call__(self, x, y) -> np.ndarray:
        out = np.empty(np.shape(x) + (3,))
        ramps = (0.3 * x, 0.3 * y, 0.15 * (x + y))
        for c in range(3):
            k = 2 * np.pi * self.freq[c]
            proj = (np.multiply.outer(x, np.cos(self.angle[c]) * k)
                    + np.multiply.outer(y, np.sin(self.angle[c]) * k))
            waves = (self.amp[c] * np.sin(proj + self.phase[c])).sum(-1)
            out[..., c] = 0.2 + ramps[c] + waves
        return np.clip(out, 0.0, 1.0)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def _smooth_signal(rng, t, n_harmonics: int = 3) -> np.ndarray:
    """Random smooth curve on t in [0, 1], scaled to [-1, 1]."""
    sig = np.zeros_like(t)
    for k in range(1, n_harmonics + 1):
        sig += rng.uniform(-1, 1) / k * np.sin(2 * np.pi * k * rng.uniform(0.8, 1.5) * t
                                                + rng.uniform(0, 2 * np.pi))
    span = np.abs(sig).max()
    return sig / span if span > 0 else sig


def camera_path(spec: SceneSpec, rng) -> list:
    """Camera-to-world (R, c) pairs along one smooth random trajectory."""
    t = np.linspace(0.0, 1.0, spec.frames_per_trajectory)
    lo, hi = spec.region
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    xs = mid + half * _smooth_signal(rng, t)
    ys = mid + half * _smooth_signal(rng, t)
    zs = np.mean(spec.height) + (spec.height[1] - spec.height[0]) / 2 * _smooth_signal(rng, t)
    yaw = np.radians(spec.max_yaw_deg) * _smooth_signal(rng, t)
    tx = np.radians(spec.max_tilt_deg) * _smooth_signal(rng, t)
    ty = np.radians(spec.max_tilt_deg) * _smooth_signal(rng, t)
    return [(_rot_z(yaw[i]) @ _LOOK_DOWN @ _rot_x(tx[i]) @ _rot_y(ty[i]), np.array([xs[i], ys[i], zs[i]]))
            for i in range(len(t))]


def render_view(R, c, intr: Intrinsics, size: int, texture) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast the ground plane; returns (rgb H x W x 3, depth H x W).

    Depth is the camera-frame z of the hit point, i.e. what a depth
    sensor reports.
    """
    u = np.arange(size, dtype=float)
    rays = np.stack(np.meshgrid((u - intr.cx) / intr.fx, (u - intr.cy) / intr.fy), axis=-1)
    rays = np.concatenate([rays, np.ones((size, size, 1))], axis=-1)
    world = rays @ R.T
    dz = world[..., 2]
    if np.any(dz >= 0):
        raise ValueError("camera sees above the horizon; reduce tilt or field of view")
    depth = -c[2] / dz
    hit = c + depth[..., None] * world
    return texture(hit[..., 0], hit[..., 1]), depth


def generate_synthetic_scene(spec: SceneSpec | None = None, seed: int = 0) -> DatasetBundle:
    """Deterministic scene bundle for (spec, seed).

    The last ``spec.n_test`` trajectories get the test role, the rest are
    training trajectories.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    texture = PlaneTexture(spec.texture_seed)
    intr = spec.intrinsics
    trajs = []
    for k in range(spec.n_trajectories):
        name = f"traj-{k:02d}"
        frames = []
        for i, (R, c) in enumerate(camera_path(spec, rng)):
            rgb, depth = render_view(R, c, intr, spec.image_size, texture)
            frames.append(FrameRecord(
                frame_id=f"{name}/{i:05d}", pose=Pose(c, rotmat_to_quat(R)), rgb=rgb, depth=depth,
                timestamp=i / 30.0))
        role = "test" if k >= spec.n_trajectories - spec.n_test else "train"
        trajs.append(Trajectory(name, tuple(frames), role, intr,
                                {"family": "synthetic", "seed": seed, "spec": spec.to_dict()}))
    return DatasetBundle(f"synthetic-plane-{spec.texture_seed}", trajs, {"rgb", "depth"})
