"""Turning frames into fixed-size n-channel network inputs.

Every modality ends up as a ``side x side x n`` float array. Point clouds
are kept organized (one XYZ triple per pixel) so they can be fed to the
same convolutional stack as images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

DEFAULT_SIDE = 224


class MissingPayloadError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def default_intrinsics(camera: str) -> Intrinsics:
    """Shipped intrinsics by camera name (see ``data/intrinsics.json``)."""
    table = json.loads(resources.files("cnnmap").joinpath("data/intrinsics.json").read_text())
    try:
        return Intrinsics.from_dict(table["cameras"][camera])
    except KeyError:
        raise KeyError(f"no shipped intrinsics for camera {camera!r}; "
                       f"known: {sorted(table['cameras'])}") from None


def load_intrinsics(path) -> Intrinsics:
    """Read a JSON file with keys fx, fy, cx, cy."""
    return Intrinsics.from_dict(json.loads(Path(path).read_text()))


class Modality(Enum):
    DEPTH = "depth"
    GRAY = "gray"
    RGB = "rgb"
    POINTCLOUD = "pointcloud"
    RGB_DEPTH = "rgb+depth"
    RGB_POINTCLOUD = "rgb+pointcloud"

    @property
    def channels(self) -> int:
        return _CHANNELS[self]

    @property
    def needs_depth(self) -> bool:
        return self in (Modality.DEPTH, Modality.POINTCLOUD, Modality.RGB_DEPTH,
                        Modality.RGB_POINTCLOUD)

    @property
    def needs_rgb(self) -> bool:
        return self not in (Modality.DEPTH, Modality.POINTCLOUD)

    @classmethod
    def parse(cls, value) -> "Modality":
        return value if isinstance(value, cls) else cls(str(value).lower())


_CHANNELS = {
    Modality.DEPTH: 1,
    Modality.GRAY: 1,
    Modality.RGB: 3,
    Modality.POINTCLOUD: 3,
    Modality.RGB_DEPTH: 4,
    Modality.RGB_POINTCLOUD: 6,
}


def _resize_indices(n_in: int, n_out: int):
    """Source sample positions for resizing ``n_in`` pixels to ``n_out`` (pixel centers aligned)."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(pos, 0, n_in - 1)


def center_crop_resize(image, side: int, interpolation: str = "bilinear") -> np.ndarray:
    """Crop the largest centered square and resize it to ``side x side``.

    ``interpolation`` is ``"bilinear"`` or ``"nearest"``. 2-D inputs come
    back 2-D; channel count is preserved otherwise.
    """
    if side <= 0:
        raise ValueError(f"side must be positive, got {side}")
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    h, w = image.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = image[top:top + s, left:left + s]
    if s == side:
        return crop.copy()
    pos = _resize_indices(s, side)
    if interpolation == "nearest":
        idx = np.floor(pos + 0.5).astype(int)
        return crop[idx][:, idx]
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    crop = crop.astype(float)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, s - 1)
    t = pos - i0
    ty = t.reshape((-1, 1) + (1,) * (crop.ndim - 2))
    tx = t.reshape((1, -1) + (1,) * (crop.ndim - 2))
    rows = crop[i0] * (1 - ty) + crop[i1] * ty
    return rows[:, i0] * (1 - tx) + rows[:, i1] * tx


def depth_to_pointcloud(depth, intr: Intrinsics) -> np.ndarray:
    """Back-project an ``H x W`` depth map (meters) to an organized ``H x W x 3`` XYZ image.

    Pixel (u, v) = (column, row). Invalid pixels (depth 0) map to (0, 0, 0).
    """
    z = np.asarray(depth, dtype=float)
    h, w = z.shape
    u = np.arange(w, dtype=float)[None, :]
    v = np.arange(h, dtype=float)[:, None]
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return np.stack([x, y, z], axis=-1)


def project_points(xyz, intr: Intrinsics) -> np.ndarray:
    """Pinhole projection of ``... x 3`` camera-frame points to ``... x 2`` pixel (u, v)."""
    xyz = np.asarray(xyz, dtype=float)
    z = xyz[..., 2]
    return np.stack([intr.fx * xyz[..., 0] / z + intr.cx, intr.fy * xyz[..., 1] / z + intr.cy], axis=-1)


LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {rgb.shape}")
    return (rgb @ LUMA)[..., None]


@dataclass(frozen=True)
class InputConfig:
    """How frames become network inputs.

    ``channel_means`` are subtracted after stacking (None means no
    centering). Depth and XYZ channels are divided by ``scene_scale``
    (meters) before centering.
    """

    modality: Modality = Modality.RGB
    side: int = DEFAULT_SIDE
    scene_scale: float = 1.0
    channel_means: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality.parse(self.modality))
        if self.channel_means is not None:
            means = tuple(float(m) for m in self.channel_means)
            if len(means) != self.modality.channels:
                raise ValueError(f"{len(means)} channel means for a "
                                 f"{self.modality.channels}-channel modality")
            object.__setattr__(self, "channel_means", means)

    def with_means(self, means) -> "InputConfig":
        return InputConfig(self.modality, self.side, self.scene_scale, tuple(means))

    def to_dict(self) -> dict:
        return {"modality": self.modality.value, "side": self.side, "scene_scale": self.scene_scale,
                "channel_means": list(self.channel_means) if self.channel_means is not None else None}

    @classmethod
    def from_dict(cls, d) -> "InputConfig":
        return cls(Modality.parse(d["modality"]), int(d["side"]), float(d.get("scene_scale", 1.0)),
                   d.get("channel_means"))


@dataclass(frozen=True)
class NetInput:
    array: np.ndarray
    modality: Modality
    frame_id: str


def _raw_channels(frame, modality: Modality, intr: Intrinsics | None, side: int, scene_scale: float):
    groups = []
    if modality.needs_rgb:
        rgb = center_crop_resize(frame.load_rgb(), side)
        groups.append(to_gray(rgb) if modality is Modality.GRAY else rgb)
    if modality.needs_depth:
        if not frame.has_depth:
            raise MissingPayloadError(f"frame {frame.frame_id!r} has no depth, "
                                      f"required by modality {modality.value!r}")
        depth = frame.load_depth()
        if modality in (Modality.POINTCLOUD, Modality.RGB_POINTCLOUD):
            if intr is None:
                raise ValueError(f"modality {modality.value!r} needs camera intrinsics")
            geo = depth_to_pointcloud(depth, intr)
        else:
            geo = depth[..., None]
        groups.append(center_crop_resize(geo, side, "nearest") / scene_scale)
    return np.concatenate(groups, axis=-1)


def assemble_input(frame, modality, intr: Intrinsics | None = None, side: int = DEFAULT_SIDE,
                   config: InputConfig | None = None) -> NetInput:
    """Build the network input for one frame.

    Channels are stacked RGB (or gray) first, then depth or XYZ. When a
    ``config`` is given its side, scene scale and channel means are used.
    """
    modality = Modality.parse(modality)
    config = config or InputConfig(modality, side)
    arr = _raw_channels(frame, modality, intr, config.side, config.scene_scale)
    if config.channel_means is not None:
        arr = arr - np.asarray(config.channel_means)
    return NetInput(arr, modality, frame.frame_id)


def stack_inputs(frames, config: InputConfig, intr: Intrinsics | None = None):
    """Assemble a batch: returns ``(inputs N x side x side x n, poses N x 7, frame_ids)``."""
    xs, ps, ids = [], [], []
    for f in frames:
        xs.append(assemble_input(f, config.modality, intr, config=config).array)
        ps.append(f.pose.to_vector())
        ids.append(f.frame_id)
    return np.stack(xs), np.stack(ps), ids


def compute_channel_means(frames, config: InputConfig, intr: Intrinsics | None = None) -> tuple:
    """Per-channel means of the uncentered inputs over ``frames``."""
    raw = InputConfig(config.modality, config.side, config.scene_scale, None)
    total = np.zeros(config.modality.channels)
    count = 0
    for f in frames:
        a = assemble_input(f, raw.modality, intr, config=raw).array
        total += a.reshape(-1, a.shape[-1]).sum(axis=0)
        count += a.shape[0] * a.shape[1]
    if count == 0:
        raise ValueError("cannot compute channel means of zero frames")
    return tuple(float(v) for v in total / count)
