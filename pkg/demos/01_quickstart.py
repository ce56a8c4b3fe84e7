"""FedAvg next to guidance-driven pruning on Gaussian blobs.

Twenty clients each hold two of ten classes. Both algorithms share the split,
the partition, the initial weights and the client sampling, so the printed
columns differ only through the pruning mask.

    python demos/01_quickstart.py [rounds]
"""

import sys

from flipsim import reference_config, run_experiment, synthetic_blobs

rounds = int(sys.argv[1]) if len(sys.argv) > 1 else 30
data = synthetic_blobs(num_classes=10, per_class=200, separation=3.0, seed=1)

results = {alg: run_experiment(reference_config(R=rounds, algorithm=alg, seed=0), data)
           for alg in ("fedavg", "autoflip")}

print(f"{'round':>5} | {'fedavg acc':>10} | {'autoflip acc':>12} {'sparsity':>9} {'dead units':>10}")
for fa, af in zip(results["fedavg"].reports, results["autoflip"].reports):
    if fa.round % 5 == 0 or fa.round == 1:
        print(f"{fa.round:>5} | {fa.test_accuracy:>10.3f} | {af.test_accuracy:>12.3f} {af.sparsity:>9.3f} "
              f"{af.deactivated_units:>10}")

# Cost line items: the exploration phase is charged to autoflip up front.
for alg, res in results.items():
    for item, up, down, flops in res.costs():
        print(f"{alg:>8} {item:<12} up {up / 1e6:7.2f} MB  down {down / 1e6:7.2f} MB  {flops / 1e9:7.2f} GFLOP")
