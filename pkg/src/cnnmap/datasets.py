"""Frame records, trajectories and loaders for TUM RGB-D, 7-Scenes and Cambridge Landmarks.

All loaders return poses as camera-to-world position plus a unit
quaternion in (w, x, y, z) order, whatever the on-disk convention.
"""

from __future__ import annotations

import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inputs import Intrinsics, default_intrinsics
from .pose import Pose, quat_normalize, quat_to_rotmat

TUM_DEPTH_FACTOR = 5000.0
SEVEN_SCENES_DEPTH_FACTOR = 1000.0
SEVEN_SCENES_INVALID_DEPTH = 65535
DEFAULT_ASSOC_TOLERANCE = 0.02
ROLES = ("train", "validation", "test")
MANIFEST_FORMAT = "cnnmap-trajectory/1"
BUNDLE_FORMAT = "cnnmap-bundle/1"

# Frame counts quoted for the sequences used in the relocalisation study.
# Mismatches only warn: re-downloads and re-associations vary.
EXPECTED_FRAME_COUNTS = {
    "rgbd_dataset_freiburg3_long_office_household": 2585,
    "rgbd_dataset_freiburg3_long_office_household_validation": 2676,
    "StMarysChurch/dataset_train.txt": 1487,
    "StMarysChurch/dataset_test.txt": 530,
}


class IngestionError(RuntimeError):
    pass


class RotationError(ValueError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    """One sample: an image (and optionally depth) with its ground-truth pose.

    ``rgb`` and ``depth`` are either arrays already in memory or paths to
    image files. File depth is divided by ``depth_factor`` to get meters.
    """

    frame_id: str
    pose: Pose
    rgb: object = None
    depth: object = None
    timestamp: float | None = None
    depth_factor: float = 1.0
    invalid_depth: int | None = None

    @property
    def has_depth(self) -> bool:
        return self.depth is not None

    @property
    def has_rgb(self) -> bool:
        return self.rgb is not None

    def load_rgb(self) -> np.ndarray:
        """RGB as float ``H x W x 3`` in [0, 1]."""
        if self.rgb is None:
            raise IngestionError(f"frame {self.frame_id!r} has no color image")
        if isinstance(self.rgb, np.ndarray):
            img = self.rgb
        else:
            img = _read_image(self.rgb, mode="RGB")
        if img.dtype == np.uint8:
            return img.astype(float) / 255.0
        return img.astype(float)

    def load_depth(self) -> np.ndarray:
        """Depth in meters; invalid pixels are 0."""
        if self.depth is None:
            raise IngestionError(f"frame {self.frame_id!r} has no depth image")
        if isinstance(self.depth, np.ndarray):
            return self.depth.astype(float)
        raw = _read_image(self.depth)
        d = raw.astype(float)
        if self.invalid_depth is not None:
            d[raw == self.invalid_depth] = 0.0
        return d / self.depth_factor


def _read_image(path, mode=None) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode) if mode else im)
    except OSError as e:
        raise IngestionError(f"cannot read image {path}: {e}") from e


@dataclass(frozen=True)
class Trajectory:
    name: str
    frames: tuple
    role: str = "train"
    intrinsics: Intrinsics | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise IngestionError(f"trajectory {self.name!r} has zero frames")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        if all(f.timestamp is not None for f in frames):
            frames = tuple(sorted(frames, key=lambda f: f.timestamp))
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    @property
    def positions(self) -> np.ndarray:
        return np.array([f.pose.position for f in self.frames])

    @property
    def pose_vectors(self) -> np.ndarray:
        return np.array([f.pose.to_vector() for f in self.frames])

    def with_role(self, role: str) -> "Trajectory":
        return Trajectory(self.name, self.frames, role, self.intrinsics, dict(self.meta))


@dataclass(frozen=True)
class DatasetBundle:
    scene: str
    trajectories: tuple
    modalities: frozenset = frozenset({"rgb"})

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "modalities", frozenset(self.modalities))
        names = [t.name for t in self.trajectories]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate trajectory names in bundle {self.scene!r}")

    def get(self, name: str) -> Trajectory:
        for t in self.trajectories:
            if t.name == name:
                return t
        raise KeyError(f"no trajectory named {name!r} in bundle {self.scene!r}")

    def by_role(self, role: str) -> list:
        return [t for t in self.trajectories if t.role == role]

    def check_trainable(self):
        if not self.by_role("train") or not self.by_role("test"):
            raise IngestionError(f"bundle {self.scene!r} needs at least one train and one test trajectory")

    def scene_diameter(self) -> float:
        """Largest distance between any two ground-truth camera positions."""
        pts = np.concatenate([t.positions for t in self.trajectories])
        d = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())


def _unit_pose(position, quat_wxyz, where: str) -> Pose:
    q = np.asarray(quat_wxyz, dtype=float)
    n = np.linalg.norm(q)
    if abs(n - 1.0) > 1e-6:
        warnings.warn(f"{where}: quaternion norm {n:.9f} re-normalized", stacklevel=3)
    return Pose(position, q)


# --- rotations ---------------------------------------------------------------

def rotmat_to_quat(R, tol: float = 1e-3) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0 for a rotation matrix.

    Branches on the largest of the trace and the diagonal entries to stay
    well-conditioned near 180 degree rotations.
    """
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise RotationError(f"expected a 3x3 matrix, got {R.shape}")
    dev = np.abs(R @ R.T - np.eye(3)).max()
    if dev > tol:
        raise RotationError(f"matrix is not orthonormal (deviation {dev:.2e})")
    if np.linalg.det(R) < 0:
        raise RotationError("matrix is a reflection (det < 0)")
    tr = np.trace(R)
    k = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if k == 0:
        w = 0.5 * np.sqrt(1.0 + tr)
        q = [w, (R[2, 1] - R[1, 2]) / (4 * w), (R[0, 2] - R[2, 0]) / (4 * w), (R[1, 0] - R[0, 1]) / (4 * w)]
    elif k == 1:
        x = 0.5 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / (4 * x), x, (R[0, 1] + R[1, 0]) / (4 * x), (R[0, 2] + R[2, 0]) / (4 * x)]
    elif k == 2:
        y = 0.5 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / (4 * y), (R[0, 1] + R[1, 0]) / (4 * y), y, (R[1, 2] + R[2, 1]) / (4 * y)]
    else:
        z = 0.5 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        q = [(R[1, 0] - R[0, 1]) / (4 * z), (R[0, 2] + R[2, 0]) / (4 * z), (R[1, 2] + R[2, 1]) / (4 * z), z]
    q = quat_normalize(q)
    return -q if q[0] < 0 else q


def pose_from_matrix(T) -> Pose:
    T = np.asarray(T, dtype=float)
    if T.shape != (4, 4):
        raise RotationError(f"expected a 4x4 matrix, got {T.shape}")
    return Pose(T[:3, 3], rotmat_to_quat(T[:3, :3]))


def pose_to_matrix(pose: Pose) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = quat_to_rotmat(pose.orientation)
    T[:3, 3] = pose.position
    return T


# --- TUM RGB-D -----------------------------------------------------------------

def read_tum_list(path) -> tuple[np.ndarray, list]:
    """Parse a TUM ``timestamp value...`` file; returns timestamps and the value columns per line."""
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"missing file {path}")
    stamps, values = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        try:
            stamps.append(float(parts[0]))
        except ValueError:
            raise IngestionError(f"{path}:{lineno}: bad timestamp {parts[0]!r}") from None
        values.append(parts[1:])
    return np.asarray(stamps, dtype=float), values


def nearest_index(sorted_stamps: np.ndarray, t: float) -> int:
    i = int(np.searchsorted(sorted_stamps, t))
    if i == 0:
        return 0
    if i == len(sorted_stamps):
        return i - 1
    return i if sorted_stamps[i] - t < t - sorted_stamps[i - 1] else i - 1


def associate(query: np.ndarray, reference: np.ndarray, tolerance: float) -> np.ndarray:
    """For each query stamp, the index of the nearest reference stamp, or -1 if farther than ``tolerance``."""
    order = np.argsort(reference, kind="stable")
    ref = reference[order]
    out = np.full(len(query), -1, dtype=int)
    if len(ref) == 0:
        return out
    for k, t in enumerate(query):
        i = nearest_index(ref, t)
        if abs(ref[i] - t) <= tolerance:
            out[k] = order[i]
    return out


def load_tum_sequence(root, assoc_tolerance: float = DEFAULT_ASSOC_TOLERANCE, role: str = "train",
                      intrinsics: Intrinsics | None = None, camera: str = "tum_fr3") -> Trajectory:
    """Load a TUM RGB-D sequence directory (rgb.txt, depth.txt, groundtruth.txt).

    Each rgb frame is paired with its nearest depth image and nearest
    ground-truth pose; frames without both within ``assoc_tolerance``
    seconds are dropped. The count is stored in ``meta["dropped"]``.
    """
    root = Path(root)
    rgb_t, rgb_v = read_tum_list(root / "rgb.txt")
    depth_t, depth_v = read_tum_list(root / "depth.txt")
    gt_t, gt_v = read_tum_list(root / "groundtruth.txt")
    d_idx = associate(rgb_t, depth_t, assoc_tolerance)
    g_idx = associate(rgb_t, gt_t, assoc_tolerance)
    frames = []
    for k, t in enumerate(rgb_t):
        if d_idx[k] < 0 or g_idx[k] < 0:
            continue
        vals = gt_v[g_idx[k]]
        if len(vals) != 7:
            raise IngestionError(f"{root / 'groundtruth.txt'}: expected 7 values at t={gt_t[g_idx[k]]}")
        tx, ty, tz, qx, qy, qz, qw = (float(v) for v in vals)
        pose = _unit_pose([tx, ty, tz], [qw, qx, qy, qz], f"{root.name} t={t:.6f}")
        frames.append(FrameRecord(
            frame_id=f"{t:.6f}", pose=pose, rgb=root / rgb_v[k][0], depth=root / depth_v[d_idx[k]][0],
            timestamp=float(t), depth_factor=TUM_DEPTH_FACTOR))
    dropped = len(rgb_t) - len(frames)
    if not frames:
        raise IngestionError(f"{root}: zero frames matched within {assoc_tolerance} s")
    if dropped:
        warnings.warn(f"{root.name}: dropped {dropped} of {len(rgb_t)} frames without "
                      f"depth/ground truth within {assoc_tolerance} s", stacklevel=2)
    _check_expected(root.name, len(frames))
    return Trajectory(root.name, tuple(frames), role, intrinsics or default_intrinsics(camera),
                      {"family": "tum", "dropped": dropped, "candidates": len(rgb_t)})


def _check_expected(key: str, n: int):
    expected = EXPECTED_FRAME_COUNTS.get(key)
    if expected is not None and expected != n:
        warnings.warn(f"{key}: {n} frames, expected {expected}", stacklevel=3)


# --- 7-Scenes ---------------------------------------------------------------------

_SEVEN_FRAME = re.compile(r"^(frame-\d+)\.pose\.txt$")


def load_7scenes_sequence(root, role: str = "train", intrinsics: Intrinsics | None = None) -> Trajectory:
    """Load one 7-Scenes ``seq-XX`` directory of color/depth/pose files."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"missing directory {root}")
    frames = []
    for pose_file in sorted(root.iterdir()):
        m = _SEVEN_FRAME.match(pose_file.name)
        if not m:
            continue
        stem = m.group(1)
        try:
            T = np.loadtxt(pose_file, dtype=float)
            pose = pose_from_matrix(T)
        except (ValueError, RotationError) as e:
            raise IngestionError(f"{root.name}/{stem}: bad pose: {e}") from e
        depth = root / f"{stem}.depth.png"
        frames.append(FrameRecord(
            frame_id=f"{root.name}/{stem}", pose=pose, rgb=root / f"{stem}.color.png",
            depth=depth if depth.exists() else None, timestamp=None,
            depth_factor=SEVEN_SCENES_DEPTH_FACTOR, invalid_depth=SEVEN_SCENES_INVALID_DEPTH))
    if not frames:
        raise IngestionError(f"{root}: zero frames")
    return Trajectory(root.name, tuple(frames), role, intrinsics or default_intrinsics("7scenes"),
                      {"family": "7scenes"})


def _read_split(path) -> list:
    names = []
    for line in Path(path).read_text().split():
        m = re.search(r"(\d+)$", line.strip())
        if m:
            names.append(f"seq-{int(m.group(1)):02d}")
    return names


def load_7scenes_scene(root, validation: tuple = ()) -> DatasetBundle:
    """Load a 7-Scenes scene using its TrainSplit.txt / TestSplit.txt sequence lists.

    Training sequences named in ``validation`` are tagged as validation.
    """
    root = Path(root)
    trajs = []
    for split, role in (("TrainSplit.txt", "train"), ("TestSplit.txt", "test")):
        if not (root / split).is_file():
            raise IngestionError(f"missing file {root / split}")
        for name in _read_split(root / split):
            r = "validation" if (role == "train" and name in validation) else role
            trajs.append(load_7scenes_sequence(root / name, r))
    return DatasetBundle(root.name, trajs, {"rgb", "depth"})


# --- Cambridge Landmarks -------------------------------------------------------------

CAMBRIDGE_HEADER_LINES = 3


def load_cambridge_sequence(root, split_file: str = "dataset_train.txt", role: str | None = None,
                            header_lines: int = CAMBRIDGE_HEADER_LINES) -> Trajectory:
    """Parse a Cambridge Landmarks split file of ``image x y z qw qx qy qz`` lines."""
    root = Path(root)
    path = root / split_file
    if not path.is_file():
        raise IngestionError(f"missing file {path}")
    frames = []
    lines = path.read_text().splitlines()
    for lineno, line in enumerate(lines[header_lines:], header_lines + 1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 8:
                raise ValueError(f"expected 8 fields, got {len(parts)}")
            x, y, z, qw, qx, qy, qz = (float(v) for v in parts[1:])
            pose = _unit_pose([x, y, z], [qw, qx, qy, qz], f"{path}:{lineno}")
        except ValueError as e:
            raise IngestionError(f"{path}:{lineno}: malformed line: {e}") from e
        frames.append(FrameRecord(frame_id=parts[0], pose=pose, rgb=root / parts[0]))
    if not frames:
        raise IngestionError(f"{path}: zero frames")
    if role is None:
        role = "test" if "test" in split_file else "train"
    _check_expected(f"{root.name}/{split_file}", len(frames))
    return Trajectory(f"{root.name}/{Path(split_file).stem}", tuple(frames), role, None,
                      {"family": "cambridge"})


# --- curricula -------------------------------------------------------------------------

@dataclass(frozen=True)
class Curriculum:
    """Growing training sets evaluated against one fixed held-out trajectory."""

    stages: tuple
    test: Trajectory

    def __len__(self):
        return len(self.stages)


def make_leave_one_out(bundle: DatasetBundle, test_name: str, order=None) -> Curriculum:
    """Hold out ``test_name`` and add the remaining trajectories one at a time.

    The remaining trajectories are added in ``order`` if given, else in
    lexicographic name order.
    """
    if len(bundle.trajectories) < 2:
        raise ValueError("leave-one-out needs at least two trajectories")
    test = bundle.get(test_name).with_role("test")
    rest = [t for t in bundle.trajectories if t.name != test_name]
    if order is None:
        rest.sort(key=lambda t: t.name)
    else:
        by_name = {t.name: t for t in rest}
        if sorted(order) != sorted(by_name):
            raise ValueError(f"order {list(order)} must list exactly {sorted(by_name)}")
        rest = [by_name[n] for n in order]
    rest = [t.with_role("train") for t in rest]
    stages = tuple(tuple(rest[:i]) for i in range(1, len(rest) + 1))
    return Curriculum(stages, test)


# --- native manifests ------------------------------------------------------------------

def _image_ref(value, key: str, index: int, arrays: dict, base: Path):
    if value is None:
        return None
    if isinstance(value, np.ndarray):
        arrays.setdefault(key, []).append(value)
        return f"@{key}[{len(arrays[key]) - 1}]"
    p = Path(value)
    try:
        return str(p.resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p.resolve())


def save_trajectory(traj: Trajectory, path) -> Path:
    """Write ``traj`` as a JSON manifest; in-memory images go to a sibling ``.npz``.

    Manifest fields: ``format``, ``name``, ``role``, ``intrinsics``
    (fx, fy, cx, cy or null), ``meta``, ``arrays`` (npz file name or null)
    and ``frames``: a list of ``{frame_id, timestamp, pose [x y z qw qx qy qz],
    rgb, depth, depth_factor, invalid_depth}``. Image references are file
    paths relative to the manifest or ``@key[i]`` entries in the npz.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict = {}
    frames = []
    for i, f in enumerate(traj.frames):
        frames.append({
            "frame_id": f.frame_id,
            "timestamp": f.timestamp,
            "pose": [float(v) for v in f.pose.to_vector()],
            "rgb": _image_ref(f.rgb, "rgb", i, arrays, path.parent),
            "depth": _image_ref(f.depth, "depth", i, arrays, path.parent),
            "depth_factor": f.depth_factor,
            "invalid_depth": f.invalid_depth,
        })
    npz_name = None
    if arrays:
        npz_name = path.with_suffix(".npz").name
        stacked = {k: np.stack(v) for k, v in arrays.items()}
        with open(path.parent / npz_name, "wb") as fh:
            np.savez(fh, **stacked)
    doc = {
        "format": MANIFEST_FORMAT,
        "name": traj.name,
        "role": traj.role,
        "intrinsics": traj.intrinsics.to_dict() if traj.intrinsics else None,
        "meta": traj.meta,
        "arrays": npz_name,
        "frames": frames,
    }
    path.write_text(json.dumps(doc, indent=1))
    return path


_ARRAY_REF = re.compile(r"^@(\w+)\[(\d+)\]$")


def load_trajectory(path) -> Trajectory:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"cannot read manifest {path}: {e}") from e
    if doc.get("format") != MANIFEST_FORMAT:
        raise IngestionError(f"{path}: not a {MANIFEST_FORMAT} manifest")
    arrays = {}
    if doc.get("arrays"):
        with np.load(path.parent / doc["arrays"]) as z:
            arrays = {k: z[k] for k in z.files}

    def resolve(ref):
        if ref is None:
            return None
        m = _ARRAY_REF.match(ref)
        if m:
            return arrays[m.group(1)][int(m.group(2))]
        p = Path(ref)
        return p if p.is_absolute() else path.parent / p

    frames = []
    for fd in doc["frames"]:
        v = np.asarray(fd["pose"], dtype=float)
        frames.append(FrameRecord(
            frame_id=fd["frame_id"], pose=_unit_pose(v[:3], v[3:], f"{path}:{fd['frame_id']}"),
            rgb=resolve(fd.get("rgb")), depth=resolve(fd.get("depth")), timestamp=fd.get("timestamp"),
            depth_factor=fd.get("depth_factor", 1.0), invalid_depth=fd.get("invalid_depth")))
    intr = Intrinsics.from_dict(doc["intrinsics"]) if doc.get("intrinsics") else None
    return Trajectory(doc["name"], tuple(frames), doc.get("role", "train"), intr, doc.get("meta", {}))


def _file_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def save_bundle(bundle: DatasetBundle, directory) -> Path:
    """Write a bundle directory: ``bundle.json`` plus one manifest per trajectory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for t in bundle.trajectories:
        fname = _file_name(t.name) + ".json"
        save_trajectory(t, directory / fname)
        files.append(fname)
    doc = {"format": BUNDLE_FORMAT, "scene": bundle.scene, "modalities": sorted(bundle.modalities),
           "trajectories": files}
    (directory / "bundle.json").write_text(json.dumps(doc, indent=1))
    return directory


def load_bundle(directory) -> DatasetBundle:
    directory = Path(directory)
    path = directory / "bundle.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"cannot read {path}: {e}") from e
    if doc.get("format") != BUNDLE_FORMAT:
        raise IngestionError(f"{path}: not a {BUNDLE_FORMAT} document")
    trajs = [load_trajectory(directory / f) for f in doc["trajectories"]]
    return DatasetBundle(doc["scene"], trajs, doc.get("modalities", ["rgb"]))


def trajectory_hash(traj: Trajectory) -> str:
    """SHA-256 over frame ids, poses and in-memory image bytes (file images hashed by path)."""
    h = hashlib.sha256()
    h.update(traj.name.encode())
    for f in traj.frames:
        h.update(f.frame_id.encode())
        h.update(f.pose.to_vector().tobytes())
        for payload in (f.rgb, f.depth):
            if isinstance(payload, np.ndarray):
                h.update(np.ascontiguousarray(payload).tobytes())
            elif payload is not None:
                h.update(str(payload).encode())
    return h.hexdigest()


def bundle_hash(bundle: DatasetBundle) -> str:
    h = hashlib.sha256(bundle.scene.encode())
    for t in bundle.trajectories:
        h.update(t.role.encode())
        h.update(trajectory_hash(t).encode())
    return h.hexdigest()
