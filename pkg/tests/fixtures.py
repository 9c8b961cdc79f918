"""Tiny on-disk datasets in the TUM, 7-Scenes and Cambridge layouts, with known poses."""

import numpy as np
from PIL import Image

# TUM stores tx ty tz qx qy qz qw
TUM_GT = [
    (1.00, [0.1, 0.2, 0.3], [0.0, 0.0, 0.0, 1.0]),
    (1.10, [0.2, 0.2, 0.3], [0.0, 0.0, 0.38268343236509, 0.923879532511287]),
    (1.20, [0.3, 0.25, 0.3], [0.1, 0.0, 0.0, 0.99498743710662]),
    (1.30, [0.4, 0.3, 0.35], [0.0, 0.0, 0.0, 1.0]),
]
TUM_RGB = [1.001, 1.102, 1.199, 1.35, 1.5]  # the last two have no ground truth within 0.02 s
TUM_DEPTH = [1.003, 1.098, 1.21, 1.349, 1.49]


def _png(path, array):
    Image.fromarray(array).save(path)


def write_tum(root, size=(6, 8), unmatched=True):
    """Returns the expected pose vectors [x y z qw qx qy qz] of the kept frames, in rgb order.

    With ``unmatched=False`` the two frames lacking ground truth are left out.
    """
    n = len(TUM_RGB) if unmatched else 3
    root.mkdir(parents=True, exist_ok=True)
    (root / "rgb").mkdir(exist_ok=True)
    (root / "depth").mkdir(exist_ok=True)
    h, w = size
    with open(root / "rgb.txt", "w") as f:
        f.write("# color images\n# file: 'fixture'\n# timestamp filename\n")
        for t in TUM_RGB[:n]:
            f.write(f"{t:.6f} rgb/{t:.6f}.png\n")
            _png(root / "rgb" / f"{t:.6f}.png", np.full((h, w, 3), int(t * 100) % 255, np.uint8))
    with open(root / "depth.txt", "w") as f:
        f.write("# depth maps\n# file: 'fixture'\n# timestamp filename\n")
        for t in TUM_DEPTH[:n]:
            f.write(f"{t:.6f} depth/{t:.6f}.png\n")
            _png(root / "depth" / f"{t:.6f}.png", np.full((h, w), 5000, np.uint16))
    with open(root / "groundtruth.txt", "w") as f:
        f.write("# ground truth trajectory\n# file: 'fixture'\n# timestamp tx ty tz qx qy qz qw\n")
        for t, p, q in TUM_GT:
            f.write(f"{t:.4f} " + " ".join(f"{v:.14g}" for v in (*p, *q)) + "\n")
    expected = []
    for t, p, (qx, qy, qz, qw) in TUM_GT[:3]:
        expected.append([*p, qw, qx, qy, qz])
    return np.array(expected)


def rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


SEVEN_POSES = [
    (np.eye(3), [0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]),
    (rot_z(np.pi / 2), [1.0, -0.5, 0.25], [np.sqrt(0.5), 0.0, 0.0, np.sqrt(0.5)]),
    (np.diag([1.0, -1.0, -1.0]), [0.5, 0.5, 2.0], [0.0, 1.0, 0.0, 0.0]),
]


def write_7scenes_seq(root, poses=SEVEN_POSES, size=(4, 4)):
    root.mkdir(parents=True, exist_ok=True)
    expected = []
    for i, (R, t, q) in enumerate(poses):
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = t
        np.savetxt(root / f"frame-{i:06d}.pose.txt", T, fmt="%.10e")
        _png(root / f"frame-{i:06d}.color.png", np.full((*size, 3), 40 * i, np.uint8))
        depth = np.full(size, 1500, np.uint16)
        depth[0, 0] = 65535
        _png(root / f"frame-{i:06d}.depth.png", depth)
        expected.append([*t, *q])
    return np.array(expected)


def write_7scenes_scene(root):
    write_7scenes_seq(root / "seq-01")
    write_7scenes_seq(root / "seq-02", SEVEN_POSES[:2])
    write_7scenes_seq(root / "seq-03", SEVEN_POSES[1:])
    (root / "TrainSplit.txt").write_text("sequence1\nsequence2\n")
    (root / "TestSplit.txt").write_text("sequence3\n")


CAMBRIDGE_LINES = [
    ("seq1/frame00001.png", [12.5, -3.25, 1.5], [0.5, 0.5, 0.5, 0.5]),
    ("seq1/frame00002.png", [13.0, -3.0, 1.4], [0.7071067811865476, 0.0, 0.7071067811865476, 0.0]),
]


def write_cambridge(root, split="dataset_train.txt", extra=""):
    root.mkdir(parents=True, exist_ok=True)
    lines = ["Visual Landmark Dataset V1", "ImageFile, Camera Position [X Y Z W P Q R]", ""]
    for name, p, q in CAMBRIDGE_LINES:
        lines.append(name + " " + " ".join(repr(v) for v in (*p, *q)))
    (root / split).write_text("\n".join(lines) + "\n" + extra)
    return np.array([[*p, *q] for _, p, q in CAMBRIDGE_LINES])
