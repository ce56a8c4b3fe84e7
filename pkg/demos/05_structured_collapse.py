"""Unstructured masks that empty whole filters.

A convolution filter whose incoming weights are all masked produces only its
bias. The engine then skips it, along with the readout weights that consume
it. count_flops prices that saving; the filter map below shows which
filters died by the last round.

    python demos/05_structured_collapse.py
"""

from flipsim import reference_config, run_experiment, synthetic_blobs
from flipsim.engine import count_flops

images = synthetic_blobs(num_classes=10, per_class=200, separation=3.0, image_shape=(1, 8, 8), seed=1)
result = run_experiment(reference_config(R=20, arch="tiny_cnn", seed=0), images)
layout = result.layout
full = count_flops(layout)

for rep in result.reports[::4] + result.reports[-1:]:
    print(f"round {rep.round:>3}: sparsity {rep.sparsity:.3f}, {rep.deactivated_units} dead units, "
          f"forward FLOPs {rep.flops_forward}/{full} ({1 - rep.flops_forward / full:.0%} saved)")

dead = result.server.mask.deactivated_units
for li, spec in enumerate(layout.layers):
    if spec.n_units:
        marks = "".join("x" if (li, u) in dead else "." for u in range(spec.n_units))
        print(f"layer {li} {spec.kind:<7} {marks}")
