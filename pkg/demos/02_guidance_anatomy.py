"""Where the guidance values sit, layer by layer, and how they move.

Exploration turns each explorer's displacement from the shared
initialisation into a score in [0, 1]. Training rounds then blend that score
with the clients' agreement. A parameter whose score falls below T_p is
masked; masked coordinates send no update, so their agreement is zero and
their score stops moving. The last table shows that ratchet directly.

    python demos/02_guidance_anatomy.py
"""

import numpy as np

from flipsim import guidance as gd
from flipsim import reference_config, synthetic_blobs
from flipsim.federation import ServerState, prepare, run_exploration, run_round
from flipsim.metrics import guidance_histogram

config = reference_config(R=20, seed=0)
data = synthetic_blobs(num_classes=10, per_class=200, separation=3.0, seed=1)
ctx, w0 = prepare(config, data)
layout = ctx.layout

exploration = run_exploration(config, layout, w0, ctx.partition, ctx.train)
print("explorer epochs:", exploration.epochs)
counts, _ = guidance_histogram(exploration.guidance, layout)
print("initial guidance histogram (10 bins over [0, 1]):", counts.tolist())

for li, spec in enumerate(layout.layers):
    if spec.n_units == 0:
        continue
    start, stop = spec.param_range
    sel = np.zeros(layout.total_params, dtype=bool)
    sel[start:stop] = layout.prunable[start:stop]
    G = exploration.guidance.G[sel]
    print(f"layer {li} ({spec.kind}): median G {np.median(G):.3f}, "
          f"share below T_p={config.T_p}: {np.mean(G < config.T_p):.2f}")

server = ServerState(w0.copy(), gd.PruningMask.all_keep(layout.total_params), exploration.guidance)
print(f"\n{'round':>5} {'sparsity':>9} {'revived':>8} {'newly pruned':>13} {'acc':>6}")
previous = None
for _ in range(config.R):
    server, rep = run_round(server, config, ctx)
    keep = server.mask.keep & layout.prunable
    if previous is not None:
        revived = int(np.sum(keep & ~previous))
        pruned = int(np.sum(previous & ~keep))
        print(f"{rep.round:>5} {rep.sparsity:>9.3f} {revived:>8} {pruned:>13} {rep.test_accuracy:>6.3f}")
    previous = keep
