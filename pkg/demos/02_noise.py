"""Class-conditional noise injection on Adult, level by level.

Each level adds N(0, (t * eta_j)^2) per feature, where eta_j is the
per-class feature std. Labels are never touched.

Run: python demos/02_noise.py
"""

import numpy as np

from noisereg import load_dataset, noise_sweep, per_class_std

bundle = load_dataset("adult", seed=0, max_train=5000)
train = bundle.train
eta = per_class_std(train.X, train.Y, 0)
print(f"adult: {bundle.info['train']} train rows, d={train.dim} after one-hot")

for t, noisy in noise_sweep(train, [0.0, 0.4, 0.8, 1.2], seed=0):
    delta = noisy.X - train.X
    cls0 = delta[train.Y == 0]
    ratio = np.median(cls0.std(axis=0)[eta > 0] / eta[eta > 0]) if t else 0.0
    same = np.array_equal(noisy.Y, train.Y)
    print(f"t={t:.1f}  median std(noise)/eta over class-0 features {ratio:.3f}  labels unchanged {same}")
