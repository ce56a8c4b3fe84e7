"""Sensitivity of the pruning threshold T_p.

The reference setting T_p = 0.3 prunes aggressively at desk scale. This
sweep extends the grid downward to show where accuracy recovers. The same
grid runs through the CLI with demos/configs/threshold_sweep.ini.

    python demos/03_threshold_sweep.py
"""

from flipsim import reference_config, run_experiment, synthetic_blobs

data = synthetic_blobs(num_classes=10, per_class=200, separation=3.0, seed=1)
baseline = run_experiment(reference_config(R=30, algorithm="fedavg", seed=0), data).reports[-1]
print(f"fedavg final accuracy {baseline.test_accuracy:.3f}\n")

print(f"{'T_p':>5} {'acc':>6} {'sparsity':>9} {'compression':>12} {'FLOPs':>7}")
for t in (0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5):
    for bound in ("clamp", "renormalize"):
        rep = run_experiment(reference_config(R=30, T_p=t, guidance_bound=bound, seed=0), data).reports[-1]
        print(f"{t:>5} {rep.test_accuracy:>6.3f} {rep.sparsity:>9.3f} {rep.compression_rate:>11.2f}x "
              f"{rep.flops_forward:>7}  ({bound})")
