"""Corrupted clients: Gaussian noise on updates and flipped training labels.

The noisy cohort is drawn once per run, so "40% of clients" names the same
eight clients in every round. Accuracy is always measured on clean test
labels.

    python demos/04_noise_robustness.py [seeds]
"""

import sys

import numpy as np

from flipsim import reference_config, run_experiment, synthetic_blobs

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3
data = synthetic_blobs(num_classes=10, per_class=200, separation=3.0, seed=1)
settings = {
    "clean": {},
    "gaussian 0.1 on 40%": dict(noise="gaussian", noise_sigma=0.1, noise_client_fraction=0.4),
    "30% labels on 20%": dict(noise="label_flip", flip_rate=0.3, noise_client_fraction=0.2),
}

for name, noise in settings.items():
    row = []
    for alg in ("fedavg", "autoflip"):
        finals = [run_experiment(reference_config(R=40, algorithm=alg, seed=s, **noise), data).reports[-1].test_accuracy
                  for s in range(n_seeds)]
        row.append(f"{alg} {np.mean(finals):.3f} ± {np.std(finals, ddof=1) if n_seeds > 1 else 0.0:.3f}")
    print(f"{name:<22} " + "   ".join(row))
