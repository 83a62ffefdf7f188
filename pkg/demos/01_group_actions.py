"""Walk through the cyclic-group feature transform and its algebra.

A feature map with C = t*n channels is read as t blocks of n channels.
Rotating the underlying image by k quarter turns corresponds to rotating
every block spatially AND relabeling block g -> (g+k) mod t. This script
shows the two pieces separately, then checks the group laws bitwise.
"""

import numpy as np

from eqreg import RotationGroup, frobenius_sq

group = RotationGroup(4)
rng = np.random.default_rng(0)

# a tiny feature stack: batch 1, 4 blocks x 2 channels, 6x6
f = rng.standard_normal((1, 8, 6, 6))
print(f"feature stack {f.shape}: order {group.order}, {f.shape[1] // group.order} channels per block")

# spatial piece only
img = np.arange(9.0).reshape(1, 1, 3, 3)
print("\na 3x3 ramp:")
print(img[0, 0])
print("one counterclockwise quarter turn:")
print(group.rotate_image(img, 1)[0, 0])

# channel piece only: move block labels, keep pixels
shifted = group.cyclic_shift(f, 1)
print("\ncyclic shift by 1 relabels blocks: block 1 of the result is block 0 of the input:",
      np.array_equal(shifted[:, 2:4], f[:, 0:2]))

# the full transform composes both
ft = group.feature_transform(f, 1)
print("feature_transform(f, 1) == rotate(cyclic_shift(f, 1)):",
      np.array_equal(ft, group.rotate_image(group.cyclic_shift(f, 1), 1)))

print("\ngroup laws (exact, these are index permutations):")
print("  identity   :", np.array_equal(group.feature_transform(f, 0), f))
lhs = group.feature_transform(group.feature_transform(f, 3), 2)
print("  composition:", np.array_equal(lhs, group.feature_transform(f, 1)))
back = group.feature_transform(group.feature_transform(f, 3), 1)
print("  inverse    :", np.array_equal(back, f))
print("  norm       :", frobenius_sq(group.feature_transform(f, 2)) == frobenius_sq(f))

# the adjoint undoes the transform for exact orders
y = rng.standard_normal(f.shape)
import math

dot = lambda a, b: math.fsum((a * b).ravel().tolist())
print("  adjoint    :",
      dot(group.feature_transform(f, 1), y) == dot(f, group.feature_transform_adjoint(y, 1)))

# non-quarter orders interpolate and are only approximately faithful
g3 = RotationGroup(3)
f3 = rng.standard_normal((1, 3, 16, 16))
once = g3.feature_transform(f3, 1)
thrice = g3.feature_transform(g3.feature_transform(once, 1), 1)
drift = np.abs(thrice - f3).max()
print(f"\norder 3 is interpolated: three steps drift from the start by up to {drift:.3f}"
      "\n(interpolation blur plus zero fill at the corners, not an index permutation)")
