"""Federated protocols: loss exploration, AutoFLIP / FedAvg / magnitude-pruning
rounds, update noise, sparse update transport and checkpointing.

Randomness is derived from ``(seed, stream, round, client)`` seed sequences
rather than one shared generator, so exploration never perturbs the training
stream and a run can resume from any round boundary with no extra RNG state.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import guidance as gd
from .data import corrupted_clients, flip_labels, partition_clients, split_train_test
from .engine import Batch, OptimizerState, build_model, count_flops, forward_loss, loss_and_grad, optimizer_step
from .errors import ConfigurationError, ParseError
from .metrics import RoundReport, downlink_bytes, evaluate, update_variance

log = logging.getLogger(__name__)

ALGORITHMS = ("autoflip", "fedavg", "magnitude_prune")
NOISE_KINDS = ("none", "gaussian", "label_flip")

# seed-sequence stream tags
_SELECT, _LOCAL, _NOISE, _EXPLORE, _SPLIT, _PARTITION, _MODEL, _COHORT = range(8)


@dataclass(frozen=True)
class FederationConfig:
    C: int = 20
    K: int = 5
    R: int = 200
    E: int = 10
    B: int = 32
    lr: float = 0.001
    optimizer: str = "adam"
    weight_decay: float = 0.0
    arch: str = "tiny_mlp"
    hidden: int = 32
    filters: int = 4
    # int -> explorer count, float -> fraction of C
    C_exp: float = 1.0
    E_exp: int = 150
    patience: int = 20
    T_p: float = 0.3
    algorithm: str = "autoflip"
    guidance_bound: str = "clamp"
    magnitude_sparsity: float = 0.0
    noise: str = "none"
    noise_sigma: float = 0.0
    noise_client_fraction: float = 0.0
    flip_rate: float = 0.0
    server_momentum: float | None = None
    weighted_aggregation: bool = False
    partition: str = "pathological"
    classes_per_client: int = 2
    dirichlet_alpha: float | None = None
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        def need(cond, name, expected):
            if not cond:
                raise ConfigurationError(f"{name}={getattr(self, name)!r}: expected {expected}")

        need(self.C >= 1, "C", ">= 1")
        need(1 <= self.K <= self.C, "K", f"in [1, C={self.C}]")
        need(self.R >= 0, "R", ">= 0")
        need(self.E >= 1, "E", ">= 1")
        need(self.B >= 1, "B", ">= 1")
        need(self.lr > 0, "lr", "> 0")
        need(self.optimizer in ("adam", "sgd"), "optimizer", "adam or sgd")
        need(self.weight_decay >= 0, "weight_decay", ">= 0")
        need(self.arch in ("tiny_mlp", "tiny_cnn"), "arch", "tiny_mlp or tiny_cnn")
        need(self.E_exp >= 1, "E_exp", ">= 1")
        need(self.patience >= 1, "patience", ">= 1")
        need(0.0 <= self.T_p <= 1.0, "T_p", "in [0, 1]")
        need(self.algorithm in ALGORITHMS, "algorithm", " | ".join(ALGORITHMS))
        need(self.guidance_bound in ("renormalize", "clamp"), "guidance_bound", "renormalize or clamp")
        need(0.0 <= self.magnitude_sparsity < 1.0, "magnitude_sparsity", "in [0, 1)")
        need(self.noise in NOISE_KINDS, "noise", " | ".join(NOISE_KINDS))
        need(self.noise_sigma >= 0, "noise_sigma", ">= 0")
        need(0.0 <= self.noise_client_fraction <= 1.0, "noise_client_fraction", "in [0, 1]")
        need(0.0 <= self.flip_rate <= 1.0, "flip_rate", "in [0, 1]")
        need(self.server_momentum is None or 0.0 <= self.server_momentum < 1.0, "server_momentum", "None or in [0, 1)")
        need(self.partition in ("pathological", "dirichlet", "iid"), "partition", "pathological | dirichlet | iid")
        need(0.0 < self.train_fraction < 1.0, "train_fraction", "in (0, 1)")
        if isinstance(self.C_exp, bool) or self.C_exp <= 0:
            need(False, "C_exp", "a positive count (int) or fraction in (0, 1] (float)")
        if isinstance(self.C_exp, float):
            need(self.C_exp <= 1.0, "C_exp", "a fraction in (0, 1] when given as float")
        else:
            need(self.C_exp <= self.C, "C_exp", f"<= C={self.C} when given as a count")

    @property
    def n_explorers(self):
        if isinstance(self.C_exp, float):
            return max(1, math.ceil(round(self.C_exp * self.C, 9)))
        return int(self.C_exp)

    def with_(self, **changes):
        return replace(self, **changes)


def reference_config(**overrides):
    """The baseline experimental setup (20 clients, 5 per round, 200 rounds)."""
    base = dict(C=20, K=5, R=200, B=32, E=10, lr=0.001, optimizer="adam", E_exp=150, patience=20, T_p=0.3)
    base.update(overrides)
    return FederationConfig(**base)


def _rng(config, stream, *key):
    return np.random.default_rng([config.seed, stream, *key])


# --------------------------------------------------------------------- transport

HEADER_BYTES = 16
INDEX_BYTES = 4
VALUE_BYTES = 8


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: int
    indices: np.ndarray  # uint32, strictly increasing
    values: np.ndarray  # float64
    num_samples: int

    @property
    def wire_size(self):
        return HEADER_BYTES + (INDEX_BYTES + VALUE_BYTES) * len(self.indices)

    def to_bytes(self):
        """Header ``<IIQ`` (client_id, nnz, num_samples), then uint32 indices and float64 values."""
        head = struct.pack("<IIQ", self.client_id, len(self.indices), self.num_samples)
        return head + self.indices.astype("<u4").tobytes() + self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < HEADER_BYTES:
            raise ParseError("truncated update header")
        client_id, nnz, n = struct.unpack("<IIQ", blob[:HEADER_BYTES])
        if len(blob) != HEADER_BYTES + 12 * nnz:
            raise ParseError(f"update declares {nnz} entries but carries {len(blob) - HEADER_BYTES} payload bytes")
        idx = np.frombuffer(blob, "<u4", nnz, HEADER_BYTES).astype(np.int64)
        val = np.frombuffer(blob, "<f8", nnz, HEADER_BYTES + 4 * nnz).astype(np.float64)
        return cls(client_id, idx, val, n)


def encode_sparse(delta, mask=None, client_id=0, num_samples=0):
    """Index/value pairs of the kept nonzero coordinates of ``delta``."""
    delta = np.asarray(delta, dtype=np.float64)
    sel = delta != 0.0
    if mask is not None:
        keep = np.asarray(getattr(mask, "keep", mask), dtype=bool)
        if keep.shape != delta.shape:
            raise ConfigurationError("mask and delta lengths differ")
        sel &= keep
    idx = np.flatnonzero(sel)
    return ClientUpdate(int(client_id), idx, delta[idx].copy(), int(num_samples))


def decode_sparse(update, total_params):
    idx = np.asarray(update.indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= total_params):
        raise ConfigurationError(f"update index out of range [0, {total_params})")
    if idx.size > 1 and np.any(np.diff(idx) <= 0):
        raise ConfigurationError("update indices must be strictly increasing")
    out = np.zeros(total_params)
    out[idx] = update.values
    return out


def inject_update_noise(update, sigma, rng):
    """Add i.i.d. N(0, sigma^2) to every transmitted coordinate."""
    if sigma == 0:
        return update
    noisy = update.values + rng.normal(0.0, sigma, size=len(update.values))
    return replace(update, values=noisy)


# --------------------------------------------------------------------- clients

def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


def local_update(layout, params, shard, config, rng, mask=None, epochs=None):
    """Run ``epochs`` (default ``config.E``) of minibatch training from ``params``.

    Returns the final parameters and the number of samples processed.
    """
    state = OptimizerState.create(config.optimizer, layout.total_params, config.lr, config.weight_decay)
    w = params.copy()
    seen = 0
    for _ in range(config.E if epochs is None else epochs):
        for idx in _epoch_batches(len(shard), config.B, rng):
            _, g = loss_and_grad(layout, w, Batch(shard.samples[idx], shard.labels[idx]))
            w = optimizer_step(state, w, g, mask)
            seen += len(idx)
    return w, seen


def _shard_loss(layout, params, shard):
    return forward_loss(layout, params, Batch(shard.samples, shard.labels))[0]


@dataclass
class ExplorationResult:
    guidance: gd.GuidanceState
    explorers: np.ndarray
    epochs: list
    deviations: np.ndarray = field(repr=False)
    comm_up_bytes: int = 0
    comm_down_bytes: int = 0
    flops: int = 0


def explorer_train(layout, w0, shard, config, rng, min_delta=1e-4):
    """Train from ``w0`` for up to ``E_exp`` epochs, stopping once the shard
    loss has not improved by more than ``min_delta`` for ``patience`` epochs."""
    state = OptimizerState.create(config.optimizer, layout.total_params, config.lr, config.weight_decay)
    w = w0.copy()
    best = _shard_loss(layout, w, shard)
    stale = epochs = seen = evals = 0
    while epochs < config.E_exp:
        for idx in _epoch_batches(len(shard), config.B, rng):
            _, g = loss_and_grad(layout, w, Batch(shard.samples[idx], shard.labels[idx]))
            w = optimizer_step(state, w, g)
            seen += len(idx)
        epochs += 1
        loss = _shard_loss(layout, w, shard)
        evals += len(shard)
        if loss < best - min_delta:
            best, stale = loss, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return w, epochs, seen, evals


def run_exploration(config, layout, w0, partition, train):
    """One-time federated loss exploration; explorer weights are discarded."""
    rng = _rng(config, _EXPLORE)
    explorers = np.sort(rng.choice(config.C, size=config.n_explorers, replace=False))
    devs, epochs = [], []
    seen = evals = 0
    full_flops = count_flops(layout)
    for client in explorers:
        shard = train.subset(partition.client_indices[client])
        if len(shard) == 0:
            raise ConfigurationError(f"explorer {client} has an empty shard")
        w, ep, s, ev = explorer_train(layout, w0, shard, config, _rng(config, _EXPLORE, int(client)))
        devs.append(gd.deviation_scores(w, w0))
        epochs.append(ep)
        seen += s
        evals += ev
    P = layout.total_params
    return ExplorationResult(
        guidance=gd.init_guidance(devs, layout),
        explorers=explorers,
        epochs=epochs,
        deviations=np.asarray(devs),
        comm_up_bytes=len(explorers) * (HEADER_BYTES + VALUE_BYTES * P),
        comm_down_bytes=len(explorers) * VALUE_BYTES * P,
        flops=full_flops * (3 * seen + evals),
    )


# --------------------------------------------------------------------- server

@dataclass
class ServerState:
    global_params: np.ndarray
    mask: gd.PruningMask
    guidance: gd.GuidanceState | None = None
    round: int = 0
    momentum_buffer: np.ndarray | None = None


def magnitude_mask(params, sparsity, layout):
    """Keep the ``ceil((1 - s) P)`` largest-magnitude prunable weights; ties
    go to the lower index."""
    prunable = np.flatnonzero(layout.prunable)
    n_keep = math.ceil(round((1.0 - sparsity) * len(prunable), 9))
    order = np.argsort(-np.abs(params[prunable]), kind="stable")
    keep = ~layout.prunable.copy()
    keep[prunable[order[:n_keep]]] = True
    return gd.mask_from_keep(keep, layout)


def round_mask(server, config, layout):
    if config.algorithm == "autoflip":
        return gd.binarize(server.guidance, config.T_p, layout)
    if config.algorithm == "magnitude_prune" and config.magnitude_sparsity > 0:
        return magnitude_mask(server.global_params, config.magnitude_sparsity, layout)
    return gd.PruningMask.all_keep(layout.total_params)


@dataclass
class RoundContext:
    """Per-run constants shared by every round."""

    layout: object
    partition: object
    train: object
    test: object
    noisy_clients: frozenset = frozenset()
    check_transport: bool = False
    samples_processed: int = 0


def run_round(server, config, ctx):
    """One communication round; returns ``(new_server_state, RoundReport)``."""
    layout = ctx.layout
    P = layout.total_params
    rnd = server.round + 1
    selected = np.sort(_rng(config, _SELECT, rnd).choice(config.C, size=config.K, replace=False))
    mask = round_mask(server, config, layout)
    pruned_global = gd.apply_mask(server.global_params, mask)

    updates, dense_oracle = [], []
    for client in selected:
        shard = ctx.train.subset(ctx.partition.client_indices[client])
        w, seen = local_update(layout, pruned_global, shard, config, _rng(config, _LOCAL, rnd, int(client)), mask.keep)
        ctx.samples_processed += seen
        delta = gd.apply_mask(w - pruned_global, mask)
        upd = encode_sparse(delta, mask, int(client), len(shard))
        if config.noise == "gaussian" and int(client) in ctx.noisy_clients:
            upd = inject_update_noise(upd, config.noise_sigma, _rng(config, _NOISE, rnd, int(client)))
        updates.append(upd)
        if ctx.check_transport:
            dense = np.zeros(P)
            dense[upd.indices] = upd.values
            dense_oracle.append(dense)

    decoded = np.array([decode_sparse(u, P) for u in updates])
    if config.weighted_aggregation:
        weights = np.array([u.num_samples for u in updates], dtype=np.float64)
        aggregate = (weights[:, None] * decoded).sum(axis=0) / weights.sum()
    else:
        aggregate = decoded.sum(axis=0) / config.K

    if ctx.check_transport:
        direct = np.asarray(dense_oracle).sum(axis=0) / config.K if not config.weighted_aggregation else None
        if direct is not None and not np.array_equal(direct, aggregate):
            raise AssertionError(f"round {rnd}: sparse aggregation diverged from dense oracle")
        log.debug("round %d: sparse/dense aggregation match", rnd)

    momentum = server.momentum_buffer
    if config.server_momentum is not None:
        momentum = aggregate if momentum is None else config.server_momentum * momentum + aggregate
        new_params = server.global_params + momentum
    else:
        new_params = server.global_params + aggregate

    guidance = server.guidance
    if config.algorithm == "autoflip":
        scores = gd.round_scores(decoded, layout)
        guidance = gd.ema_refine(guidance, scores.I, scores.A, layout, config.guidance_bound)

    acc, loss = evaluate(layout, gd.apply_mask(new_params, mask), ctx.test)
    n_prunable = layout.prunable_count
    kept_prunable = int((mask.keep & layout.prunable).sum())
    report = RoundReport(
        round=rnd,
        test_accuracy=acc,
        test_loss=loss,
        sigma2_dW=update_variance(decoded, mask.keep, layout.prunable),
        sparsity=1.0 - kept_prunable / n_prunable if n_prunable else 0.0,
        deactivated_units=len(mask.deactivated_units),
        comm_up_bytes=sum(u.wire_size for u in updates),
        comm_down_bytes=config.K * downlink_bytes(P, mask.kept_count),
        flops_forward=count_flops(layout, mask.deactivated_units),
        compression_rate=P / mask.kept_count,
    )
    new_server = ServerState(new_params, mask, guidance, rnd, momentum)
    return new_server, report


def magnitude_prune_baseline(server, config, ctx):
    """A magnitude-pruning round: the same contract as :func:`run_round`."""
    if config.algorithm != "magnitude_prune":
        config = config.with_(algorithm="magnitude_prune")
    return run_round(server, config, ctx)


# --------------------------------------------------------------------- experiment

@dataclass
class ExperimentResult:
    config: FederationConfig
    reports: list
    server: ServerState
    layout: object
    w0: np.ndarray = field(repr=False)
    exploration: ExplorationResult | None = None
    training_flops: int = 0

    def costs(self):
        """Cost line items: exploration (autoflip only) and training."""
        items = []
        if self.exploration is not None:
            ex = self.exploration
            items.append(("exploration", ex.comm_up_bytes, ex.comm_down_bytes, ex.flops))
        up = sum(r.comm_up_bytes for r in self.reports)
        down = sum(r.comm_down_bytes for r in self.reports)
        items.append(("training", up, down, self.training_flops))
        return items


def prepare(config, dataset):
    """Deterministic split, partition, corruption and model initialisation."""
    train, test = split_train_test(dataset, config.train_fraction, seed=[config.seed, _SPLIT])
    partition = partition_clients(train, config.C, config.partition, seed=[config.seed, _PARTITION],
                                  classes_per_client=config.classes_per_client, alpha=config.dirichlet_alpha)
    noisy = frozenset()
    if config.noise == "label_flip":
        train, bad = flip_labels(partition, train, config.noise_client_fraction, config.flip_rate,
                                 seed=[config.seed, _COHORT])
        noisy = frozenset(int(c) for c in bad)
    elif config.noise == "gaussian":
        noisy = frozenset(int(c) for c in corrupted_clients(config.C, config.noise_client_fraction, [config.seed, _COHORT]))
    layout, w0 = build_model(config.arch, dataset.num_classes, dataset.input_shape, [config.seed, _MODEL],
                             hidden=config.hidden, filters=config.filters)
    ctx = RoundContext(layout, partition, train, test, noisy, check_transport=log.isEnabledFor(logging.DEBUG))
    return ctx, w0


def run_experiment(config, dataset, checkpoint_every=0, checkpoint_path=None, resume_from=None,
                   check_transport=None, guidance_init=None):
    """Full run: split -> partition -> (explore) -> R rounds.

    ``guidance_init`` replaces the exploration phase with a precomputed
    guidance state. ``resume_from`` continues from a checkpoint written by a
    run with the same config.
    """
    ctx, w0 = prepare(config, dataset)
    if check_transport is not None:
        ctx.check_transport = check_transport
    layout = ctx.layout

    exploration = None
    reports, training_flops = [], 0
    if resume_from is not None:
        server, reports, training_flops, exploration = load_checkpoint(resume_from, config, layout)
    else:
        guidance = None
        if config.algorithm == "autoflip":
            if guidance_init is not None:
                guidance = guidance_init
                if len(guidance.G) != layout.total_params:
                    raise ConfigurationError("guidance length does not match the model")
            else:
                exploration = run_exploration(config, layout, w0, ctx.partition, ctx.train)
                guidance = exploration.guidance
        server = ServerState(w0.copy(), gd.PruningMask.all_keep(layout.total_params), guidance)

    while server.round < config.R:
        before = ctx.samples_processed
        server, rep = run_round(server, config, ctx)
        training_flops += 3 * rep.flops_forward * (ctx.samples_processed - before)
        reports.append(rep)
        log.info("round %d acc=%.4f sparsity=%.3f", rep.round, rep.test_accuracy, rep.sparsity)
        if checkpoint_every and checkpoint_path and server.round % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, config, server, reports, training_flops, exploration)

    return ExperimentResult(config, reports, server, layout, w0, exploration, training_flops)


# --------------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, config, server, reports, training_flops, exploration=None):
    """npz archive; ``meta`` holds a JSON header with format version and config."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "round": server.round,
        "guidance_round": server.guidance.round if server.guidance is not None else None,
        "training_flops": training_flops,
        "reports": [asdict(r) for r in reports],
        "exploration": None if exploration is None else {
            "explorers": exploration.explorers.tolist(), "epochs": exploration.epochs,
            "comm_up_bytes": exploration.comm_up_bytes, "comm_down_bytes": exploration.comm_down_bytes,
            "flops": exploration.flops,
        },
    }
    arrays = {"global_params": server.global_params, "mask_keep": server.mask.keep}
    if server.guidance is not None:
        arrays["G"] = server.guidance.G
    if server.momentum_buffer is not None:
        arrays["momentum"] = server.momentum_buffer
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    tmp.replace(path)


def load_checkpoint(path, config, layout):
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        saved = FederationConfig(**{k: v for k, v in meta["config"].items()})
        # R may grow so a finished run can be extended
        if asdict(saved.with_(R=config.R)) != asdict(config):
            raise ConfigurationError(f"{path}: checkpoint was written with a different config")
        if meta["round"] > config.R:
            raise ConfigurationError(f"{path}: checkpoint is at round {meta['round']}, past R={config.R}")
        mask = gd.mask_from_keep(z["mask_keep"], layout)
        guidance = gd.GuidanceState(z["G"].copy(), meta["guidance_round"]) if "G" in z else None
        momentum = z["momentum"].copy() if "momentum" in z else None
        server = ServerState(z["global_params"].copy(), mask, guidance, meta["round"], momentum)
    reports = [RoundReport(**r) for r in meta["reports"]]
    exploration = None
    if meta["exploration"] is not None and guidance is not None:
        ex = meta["exploration"]
        exploration = ExplorationResult(guidance=guidance, explorers=np.asarray(ex["explorers"]), epochs=ex["epochs"],
                                        deviations=np.zeros((0, layout.total_params)),
                                        comm_up_bytes=ex["comm_up_bytes"], comm_down_bytes=ex["comm_down_bytes"],
                                        flops=ex["flops"])
    return server, reports, int(meta["training_flops"]), exploration


def calibrate_magnitude_sparsity(config, dataset):
    """Final-round sparsity of the matching AutoFLIP run, for a like-for-like
    magnitude-pruning baseline."""
    result = run_experiment(config.with_(algorithm="autoflip"), dataset)
    return result.reports[-1].sparsity if result.reports else 0.0
