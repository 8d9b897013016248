#!/usr/bin/env python3
"""Tour of the differentiable core: convolutions, gradients, and the
cross-constrained kernel that buys a 7x7x7 receptive field for 21 weights
per channel pair instead of 343.

Run:  python3 demos/01_tensor_core_basics.py
"""

import numpy as np

from ventseg.tensor_core import (
    Conv3d,
    CrossConv3d,
    Linear,
    MaxPool3d,
    ReLU,
    Sequential,
    conv3d,
    cross_conv3d_forward,
    grad_check,
    materialize_cross_kernel,
)

rng = np.random.default_rng(0)

print("== dense 3D convolution ==")
x = rng.standard_normal((1, 2, 8, 8, 8))
w = rng.standard_normal((4, 2, 3, 3, 3))
y = conv3d(x, w, padding="same")
print(f"input {x.shape} * kernel {w.shape} -> output {y.shape}")

print()
print("== cross-constrained convolution ==")
k = 7
wz, wy, wx = (rng.standard_normal((4, 2, k)) for _ in range(3))
y_cross, _ = cross_conv3d_forward(x, wz, wy, wx, None)
dense = materialize_cross_kernel(wz, wy, wx)
y_dense = conv3d(x, dense, padding="same")
print(f"three {k}-tap line filters vs materialized {k}^3 kernel:")
print(f"  max |difference| = {np.max(np.abs(y_cross - y_dense)):.2e}")
weights_cross = 3 * 4 * 2 * k
weights_dense = 4 * 2 * k**3
print(f"  weights: {weights_cross} (cross) vs {weights_dense} (dense), "
      f"ratio {weights_cross}/{weights_dense} = 21/343 per pair")
nz = np.count_nonzero(dense[0, 0])
print(f"  materialized kernel nonzeros per pair: {nz} (<= 3k-2 = {3 * k - 2})")

print()
print("== gradient checking a small network ==")
net = Sequential([
    Conv3d(1, 2, 3, name="c1"),
    ReLU(name="r1"),
    MaxPool3d(2, name="p1"),
    CrossConv3d(2, 2, kernel=3, name="x1"),
    ReLU(name="r2"),
])
report = grad_check(net, (1, 1, 6, 6, 6), tol=1e-4, seed=3)
print(report)
print(f"analytic vs finite-difference gradients agree: {report.ok}")

print()
print("== a layer's parameters are plain numpy arrays ==")
lin = Linear(8, 2, name="head")
for p in lin.params():
    print(f"  {p.name}: shape {p.value.shape}, dtype {p.value.dtype}")
