"""Train the shallow conv net on an Adult subset and print its complexity report.

Compares no regularization with L2 weight decay, without noise and at t=0.4.
With one-hot features the noisy runs score far lower on clean test data:
noise std is per class, so a column constant within one class stays clean
for that class only, and the net learns "noisy column" as a label cue.

Run: python demos/03_train_and_report.py  (about a minute)
"""

from noisereg import NoiseConfig, RegularizerConfig, TrainConfig, inject_noise, load_dataset, train
from noisereg.training import build_network

bundle = load_dataset("adult", seed=0, max_train=2000)
config = TrainConfig(epochs=2, batch_size=128, lr=1e-3, seed=0, report_every=0, jacobian_samples=200)

for t in (0.0, 0.4):
    noisy = inject_noise(bundle.train, NoiseConfig(t, seed=0))
    for reg in (RegularizerConfig("none"), RegularizerConfig("l2", 1e-2)):
        net = build_network("shallow", noisy.dim, noisy.num_classes, reg, seed=0)
        rep = train(net, noisy, bundle.val, reg, config, bundle.test)
        c = rep.final_complexity
        print(f"t={t:.1f} {reg.scheme.value:5s} test acc {rep.test_accuracy:.4f}  "
              f"frobenius_sum {c.frobenius_sum:8.2f}  margin {c.margin:.4f}  "
              f"frobenius_product {c.bounds['frobenius_product']:.3e}")
