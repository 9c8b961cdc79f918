"""
Network sizes and input channels
================================

The VGG-family presets are declared as layer tables. Only the first
convolution depends on the number of input channels, so switching from
RGB to RGB+depth changes the parameter count by a fixed amount.
"""

from cnnmap.archs import conv1_delta, count_params, preset, preset_names

print(f"{'network':8s} {'1000-way head':>14s} {'pose head':>12s}")
for name in preset_names():
    full = count_params(preset(name, head_dim=1000))
    pose = count_params(preset(name))
    print(f"{name:8s} {full:14,d} {pose:12,d}")

# channel adaptation: rgb (3), depth (1), rgb+depth (4), rgb+pointcloud (6)
arch = preset("VGG-F", 3)
for n in (1, 3, 4, 6):
    a = preset("VGG-F", n)
    print(f"VGG-F with {n} channels: {count_params(a):,d} parameters "
          f"({conv1_delta(arch, n):+,d} vs rgb)")

# the reduced network used for desk-scale experiments
mini = preset("MINI", 3)
for layer, shape in zip(mini.layers, mini.shapes()):
    print(f"  {layer.kind:8s} {layer.name:6s} -> {shape}")
