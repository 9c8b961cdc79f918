"""
Pose vectors, errors and the regression loss
============================================

A camera pose is a 7-vector: position (x, y, z) followed by a unit
quaternion (qw, qx, qy, qz). This walk-through shows how the two error
measures and the training loss behave.
"""

import numpy as np

from cnnmap.pose import Pose, angular_error, loss_gradient, position_error, posenet_loss

# a camera 1 m along x, rotated 90 degrees about z
half = np.radians(90) / 2
truth = Pose([1.0, 0.0, 0.0], [np.cos(half), 0.0, 0.0, np.sin(half)])
print("ground truth vector:", np.round(truth.to_vector(), 4))

# position error is a plain Euclidean distance
guess = Pose([1.3, 0.4, 0.0], truth.orientation)
print("position error [m]:", position_error(truth.position, guess.position))

# q and -q are the same rotation, so the angle between them is zero
q = truth.orientation
print("angle q vs -q [deg]:", angular_error(q, -q))
print("same with the sign-sensitive variant [deg]:", angular_error(q, -q, raw=True))

# the angle is half the rotation between the two orientations:
# a 10 degree rotation about z reports 5 degrees
tilt = np.radians(10) / 2
print("10 deg rotation reports [deg]:", round(angular_error([1, 0, 0, 0], [np.cos(tilt), 0, 0, np.sin(tilt)]), 6))

# the loss adds the position distance and beta times the quaternion distance
p = truth.to_vector()
p_hat = p + [0.3, 0.4, 0.0, 0.0, 0.05, 0.0, 0.0]
for beta in (1.0, 10.0, 250.0):
    print(f"beta {beta:6.1f}: loss {posenet_loss(p_hat, p, beta):8.4f}")

# its gradient points along the two error directions
print("gradient at beta 10:", np.round(loss_gradient(p_hat, p, 10.0), 4))
