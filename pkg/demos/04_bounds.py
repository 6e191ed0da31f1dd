"""Norm-based bounds on a shallow conv net, and how they scale with the weights.

Doubling every weight matrix multiplies the Frobenius product by 2^(2H),
while scaling only the classifier leaves predictions unchanged.

Run: python demos/04_bounds.py
"""

import numpy as np

from noisereg import build_shallow_convnet, table2_bounds

net = build_shallow_convnet(d=14, num_classes=2, seed=0)
mats = [m.data.copy() for _, m in net.parameter_matrices()]
H = len(mats)
gamma = 1.0
base = table2_bounds(mats, gamma, net.param_count())
doubled = table2_bounds([2 * m for m in mats], gamma, net.param_count())
for name, value in base.items():
    print(f"{name:22s} {value:12.4e}  doubled/base {doubled[name] / value:10.4g}")
print(f"H={H}, expected Frobenius ratio 2^(2H) = {2 ** (2 * H)}")

X = np.random.default_rng(1).normal(size=(200, 14))
last = net.layers[-1]
last.bias.data[:] = 0.0
zeroed = net.predict(X)
last.weight.data *= 3.0
print("labels unchanged after positive scaling of the classifier:", np.array_equal(zeroed, net.predict(X)))
