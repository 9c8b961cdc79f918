"""
From frames to network inputs
=============================

Generate a small synthetic scene (a textured floor seen from a moving
camera), then turn one frame into each supported input modality and
check that depth back-projects to consistent 3-D points.
"""

import numpy as np

from cnnmap.inputs import Modality, assemble_input, depth_to_pointcloud, project_points
from cnnmap.synthetic import SceneSpec, generate_synthetic_scene

bundle = generate_synthetic_scene(SceneSpec(image_size=32, n_trajectories=2, frames_per_trajectory=20), seed=7)
print(bundle.scene, [(t.name, t.role, len(t)) for t in bundle.trajectories])
print(f"scene diameter {bundle.scene_diameter():.2f} m")

traj = bundle.trajectories[0]
frame = traj.frames[0]
intr = traj.intrinsics

# every modality yields a side x side x n array; only n changes
for m in Modality:
    x = assemble_input(frame, m, intr, side=32).array
    print(f"{m.value:15s} -> {x.shape}")

# back-projection gives an organized point cloud: one XYZ per pixel
depth = frame.load_depth()
cloud = depth_to_pointcloud(depth, intr)
print("point at the image center:", np.round(cloud[16, 16], 3))

# projecting the points again recovers the pixel grid
uv = project_points(cloud, intr)
v, u = np.mgrid[0:depth.shape[0], 0:depth.shape[1]]
print("max reprojection error [px]:", np.abs(uv - np.stack([u, v], -1)).max())
