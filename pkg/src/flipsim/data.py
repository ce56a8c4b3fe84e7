"""Datasets, train/test splitting, non-IID client partitioning and label noise."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParseError


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int
    # labels before any corruption; equal to ``labels`` for clean data
    clean_labels: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise ConfigurationError("samples and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError("label outside [0, num_classes)")
        if self.clean_labels is None:
            object.__setattr__(self, "clean_labels", self.labels)

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return self.samples.shape[1:]

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes, self.clean_labels[idx])


def synthetic_blobs(num_classes=10, per_class=200, n_features=64, separation=3.0, class_std=1.0,
                    n_informative=None, image_shape=None, seed=0):
    """Gaussian class clusters.

    Class means are drawn on a sphere of radius ``separation`` within the
    first ``n_informative`` coordinates (all coordinates by default); the
    remaining coordinates carry only noise. ``class_std`` is a scalar or a
    per-class sequence of isotropic standard deviations. With
    ``image_shape`` the features are reshaped, e.g. ``(1, 8, 8)``.
    """
    rng = np.random.default_rng(seed)
    n_inf = n_features if n_informative is None else int(n_informative)
    if not 1 <= n_inf <= n_features:
        raise ConfigurationError("n_informative must be in [1, n_features]")
    stds = np.broadcast_to(np.asarray(class_std, dtype=np.float64), (num_classes,))
    directions = rng.normal(size=(num_classes, n_inf))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = np.zeros((num_classes, n_features))
    means[:, :n_inf] = separation * directions

    labels = np.repeat(np.arange(num_classes), per_class)
    samples = means[labels] + rng.normal(size=(len(labels), n_features)) * stds[labels, None]
    order = rng.permutation(len(labels))
    samples, labels = samples[order], labels[order]
    if image_shape is not None:
        samples = samples.reshape((len(samples),) + tuple(image_shape))
    return Dataset(samples, labels, num_classes)


def load_image_csv(path, num_classes=None, image_shape=None):
    """Read ``label,p0,p1,...`` rows; pixels are reals in [0, 1]."""
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                label = int(row[0])
                pixels = [float(c) for c in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}: row {lineno}: {exc}", row=lineno) from None
            if not pixels:
                raise ParseError(f"{path}: row {lineno}: no pixel values", row=lineno)
            if rows and len(pixels) != len(rows[0]):
                raise ParseError(f"{path}: row {lineno}: expected {len(rows[0])} pixels, got {len(pixels)}", row=lineno)
            if label < 0 or any(not 0.0 <= p <= 1.0 for p in pixels):
                raise ParseError(f"{path}: row {lineno}: label must be >= 0 and pixels in [0, 1]", row=lineno)
            labels.append(label)
            rows.append(pixels)
    if not rows:
        raise ParseError(f"{path}: no samples")
    samples = np.asarray(rows, dtype=np.float64)
    if image_shape is not None:
        samples = samples.reshape((len(samples),) + tuple(image_shape))
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    return Dataset(samples, labels, k)


def load_or_synthesize(source, **params):
    if source == "synthetic_blobs":
        return synthetic_blobs(**params)
    if source == "image_csv":
        return load_image_csv(**params)
    raise ConfigurationError(f"unknown dataset source {source!r}")


def split_train_test(dataset, train_fraction=0.8, seed=0):
    """Stratified split.

    Per-class train counts are ``floor(f * n_c)`` topped up by largest
    remainder so the total is ``round(f * N)``; every class keeps at least
    one sample on each side.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    classes = [c for c in range(dataset.num_classes) if np.any(dataset.labels == c)]
    members = [np.flatnonzero(dataset.labels == c) for c in classes]
    for c, m in zip(classes, members):
        if len(m) < 2:
            raise ConfigurationError(f"class {c} has fewer than 2 samples")
    sizes = np.array([len(m) for m in members])
    exact = train_fraction * sizes
    counts = np.floor(exact).astype(np.int64)
    short = int(round(train_fraction * sizes.sum())) - counts.sum()
    for j in np.argsort(-(exact - counts), kind="stable")[:max(short, 0)]:
        counts[j] += 1
    counts = np.clip(counts, 1, sizes - 1)

    train_idx, test_idx = [], []
    for m, n_train in zip(members, counts):
        m = rng.permutation(m)
        train_idx.append(m[:n_train])
        test_idx.append(m[n_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.subset(train_idx), dataset.subset(test_idx)


@dataclass(frozen=True)
class Partition:
    client_indices: tuple
    scheme: str
    scheme_param: float = 0.0

    @property
    def num_clients(self):
        return len(self.client_indices)

    def sizes(self):
        return [len(ix) for ix in self.client_indices]


def _pathological(labels, num_classes, n_clients, classes_per_client, rng):
    present = [c for c in range(num_classes) if np.any(labels == c)]
    if classes_per_client > len(present):
        raise ConfigurationError("classes_per_client exceeds the number of classes present")
    if n_clients * classes_per_client < len(present):
        raise ConfigurationError("C * classes_per_client must cover every class")
    # shuffled round robin over class slots; each client takes distinct classes
    slots = n_clients * classes_per_client
    order = list(rng.permutation(present))
    stream = [order[i % len(order)] for i in range(slots)]
    assignment = [stream[i * classes_per_client:(i + 1) * classes_per_client] for i in range(n_clients)]
    if any(len(set(a)) != classes_per_client for a in assignment):
        return None
    claimants = {c: [i for i, a in enumerate(assignment) if c in a] for c in present}
    clients = [[] for _ in range(n_clients)]
    for c in present:
        members = rng.permutation(np.flatnonzero(labels == c))
        owners = claimants[c]
        if len(members) < len(owners):
            raise ConfigurationError(f"class {c} has fewer samples than claiming clients")
        # equal shards, remainder to earlier claimants
        base, extra = divmod(len(members), len(owners))
        start = 0
        for j, owner in enumerate(owners):
            size = base + (1 if j < extra else 0)
            clients[owner].extend(members[start:start + size])
            start += size
    return clients


def _dirichlet(labels, num_classes, n_clients, alpha, rng):
    clients = [[] for _ in range(n_clients)]
    for c in range(num_classes):
        members = rng.permutation(np.flatnonzero(labels == c))
        if len(members) == 0:
            continue
        props = rng.dirichlet(np.full(n_clients, alpha))
        cuts = (np.cumsum(props)[:-1] * len(members)).astype(np.int64)
        for i, part in enumerate(np.split(members, cuts)):
            clients[i].extend(part)
    return clients


def partition_clients(train, n_clients, scheme="pathological", seed=0, classes_per_client=2, alpha=None):
    """Split the training pool across clients.

    ``scheme`` is ``"pathological"`` (each client holds exactly
    ``classes_per_client`` classes), ``"dirichlet"`` (per-class proportions
    from Dir(alpha)) or ``"iid"``. Retries with a new sub-seed up to 10 times
    if a client ends up empty.
    """
    if n_clients < 1:
        raise ConfigurationError("need at least one client")
    labels = train.labels
    if scheme == "dirichlet" and (alpha is None or alpha <= 0):
        raise ConfigurationError("dirichlet partition requires alpha > 0")
    for attempt in range(10):
        rng = np.random.default_rng([seed, attempt])
        if scheme == "pathological":
            clients = _pathological(labels, train.num_classes, n_clients, classes_per_client, rng)
        elif scheme == "dirichlet":
            clients = _dirichlet(labels, train.num_classes, n_clients, alpha, rng)
        elif scheme == "iid":
            clients = [list(p) for p in np.array_split(rng.permutation(len(labels)), n_clients)]
        else:
            raise ConfigurationError(f"unknown partition scheme {scheme!r}")
        if clients is not None and all(len(c) > 0 for c in clients):
            indices = tuple(np.sort(np.asarray(c, dtype=np.int64)) for c in clients)
            param = classes_per_client if scheme == "pathological" else (alpha or 0.0)
            return Partition(indices, scheme, param)
    raise ConfigurationError(f"{scheme} partition left a client empty after 10 attempts")


def corrupted_clients(n_clients, client_fraction, seed):
    """The fixed cohort of ceil(fraction * C) clients chosen for corruption."""
    if not 0.0 <= client_fraction <= 1.0:
        raise ConfigurationError("client_fraction must be in [0, 1]")
    n_bad = min(math.ceil(round(client_fraction * n_clients, 9)), n_clients)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_clients, size=n_bad, replace=False))


def flip_labels(partition, dataset, client_fraction, flip_rate, seed=0):
    """Label-noise view: on a fixed cohort of clients, ``round(flip_rate * n_i)``
    of each client's samples get a uniformly random *different* label.

    Returns ``(corrupted_dataset, bad_clients)``; the corrupted dataset keeps
    the original labels in ``clean_labels``.
    """
    if not 0.0 <= flip_rate <= 1.0:
        raise ConfigurationError("flip_rate must be in [0, 1]")
    labels = dataset.labels.copy()
    rng = np.random.default_rng([seed, 1])
    bad = corrupted_clients(partition.num_clients, client_fraction, seed)
    if flip_rate > 0:
        for client in bad:
            idx = partition.client_indices[client]
            n_flip = int(round(flip_rate * len(idx)))
            chosen = rng.choice(idx, size=n_flip, replace=False)
            offsets = rng.integers(1, dataset.num_classes, size=n_flip)
            labels[chosen] = (labels[chosen] + offsets) % dataset.num_classes
    return Dataset(dataset.samples, labels, dataset.num_classes, dataset.clean_labels), bad
