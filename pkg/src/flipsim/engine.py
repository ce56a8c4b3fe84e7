"""Minimal neural-network engine over a flat float64 parameter vector.

Supports dense layers, stride-1 valid-padding 2-D convolutions, ReLU and
flatten. Parameters of each layer live in a contiguous slice of one flat
vector: weights first (row-major, output unit outermost), then biases. A
*unit* is one output neuron of a dense layer or one output filter of a
convolution; a unit owns its incoming weights and its bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericalError

ARCHITECTURES = ("tiny_mlp", "tiny_cnn")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" | "conv2d" | "relu" | "flatten"
    in_shape: tuple
    out_shape: tuple
    kernel_size: int = 0
    param_range: tuple = (0, 0)

    @property
    def n_units(self):
        if self.kind == "dense":
            return self.out_shape[0]
        if self.kind == "conv2d":
            return self.out_shape[0]
        return 0

    @property
    def weight_shape(self):
        if self.kind == "dense":
            return (self.out_shape[0], self.in_shape[0])
        if self.kind == "conv2d":
            return (self.out_shape[0], self.in_shape[0], self.kernel_size, self.kernel_size)
        return ()

    @property
    def n_weights(self):
        return int(np.prod(self.weight_shape)) if self.weight_shape else 0

    @property
    def n_params(self):
        return self.param_range[1] - self.param_range[0]

    def split(self, params):
        """Views of (weights, bias) for this layer inside ``params``."""
        start, stop = self.param_range
        w = params[start:start + self.n_weights].reshape(self.weight_shape)
        b = params[start + self.n_weights:stop]
        return w, b


@dataclass(frozen=True, eq=False)
class LayerLayout:
    layers: tuple
    input_shape: tuple
    total_params: int
    unit_layer: np.ndarray = field(repr=False)  # layer id per param, -1 if none
    unit_id: np.ndarray = field(repr=False)  # unit id per param, -1 if none
    prunable: np.ndarray = field(repr=False)

    @property
    def num_classes(self):
        return self.layers[-1].out_shape[0]

    @property
    def prunable_count(self):
        return int(self.prunable.sum())

    def units(self):
        """All structural units as ``(layer_id, unit_id)`` pairs."""
        return [(li, u) for li, spec in enumerate(self.layers) for u in range(spec.n_units)]

    def unit_params(self, layer_id, unit):
        """Flat indices of all parameters (weights and bias) owned by one unit."""
        spec = self.layers[layer_id]
        start, _ = spec.param_range
        per_unit = spec.n_weights // spec.n_units
        w = np.arange(start + unit * per_unit, start + (unit + 1) * per_unit)
        return np.append(w, start + spec.n_weights + unit)

    def unit_index(self, m):
        """``(layer_id, unit_id)`` owning parameter ``m``, or None."""
        if self.unit_layer[m] < 0:
            return None
        return int(self.unit_layer[m]), int(self.unit_id[m])


def build_layout(layer_kinds, input_shape) -> LayerLayout:
    """Build a layout from a sequence of layer descriptions.

    Each entry is one of ``("dense", out)``, ``("conv2d", filters, kernel)``,
    ``("relu",)`` or ``("flatten",)``. Shapes are inferred from
    ``input_shape`` (``(features,)`` or ``(channels, H, W)``).
    """
    shape = tuple(int(s) for s in input_shape)
    layers = []
    offset = 0
    unit_layer, unit_id, prunable = [], [], []
    for li, entry in enumerate(layer_kinds):
        kind = entry[0]
        if kind == "dense":
            if len(shape) != 1:
                raise ConfigurationError(f"layer {li}: dense expects a flat input, got shape {shape}")
            out = int(entry[1])
            n_w, out_shape, k = out * shape[0], (out,), 0
        elif kind == "conv2d":
            if len(shape) != 3:
                raise ConfigurationError(f"layer {li}: conv2d expects (C, H, W) input, got shape {shape}")
            filters, k = int(entry[1]), int(entry[2])
            if k < 1:
                raise ConfigurationError(f"layer {li}: kernel_size must be >= 1")
            c, h, w = shape
            if h < k or w < k:
                raise ConfigurationError(f"layer {li}: kernel {k} larger than input {h}x{w}")
            out = filters
            n_w, out_shape = filters * c * k * k, (filters, h - k + 1, w - k + 1)
        elif kind == "relu":
            layers.append(LayerSpec("relu", shape, shape, param_range=(offset, offset)))
            continue
        elif kind == "flatten":
            out_shape = (int(np.prod(shape)),)
            layers.append(LayerSpec("flatten", shape, out_shape, param_range=(offset, offset)))
            shape = out_shape
            continue
        else:
            raise ConfigurationError(f"layer {li}: unknown kind {kind!r}")

        n = n_w + out
        layers.append(LayerSpec(kind, shape, out_shape, k, (offset, offset + n)))
        per_unit = n_w // out
        unit_layer += [li] * n
        unit_id += list(np.repeat(np.arange(out), per_unit)) + list(range(out))
        prunable += [True] * n_w + [False] * out
        offset += n
        shape = out_shape

    return LayerLayout(
        layers=tuple(layers),
        input_shape=tuple(int(s) for s in input_shape),
        total_params=offset,
        unit_layer=np.asarray(unit_layer, dtype=np.int64),
        unit_id=np.asarray(unit_id, dtype=np.int64),
        prunable=np.asarray(prunable, dtype=bool),
    )


def init_params(layout: LayerLayout, seed) -> np.ndarray:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = np.zeros(layout.total_params)
    for spec in layout.layers:
        if spec.kind not in ("dense", "conv2d"):
            continue
        fan_in = spec.n_weights // spec.n_units
        bound = np.sqrt(6.0 / fan_in)
        start = spec.param_range[0]
        params[start:start + spec.n_weights] = rng.uniform(-bound, bound, spec.n_weights)
    return params


def build_model(arch_name, num_classes, input_shape, seed, hidden=32, filters=4, kernel_size=3):
    """Desk-scale architectures: ``tiny_mlp`` (in -> hidden -> classes) and
    ``tiny_cnn`` (conv kxk -> relu -> flatten -> dense)."""
    input_shape = tuple(int(s) for s in np.atleast_1d(input_shape))
    if arch_name == "tiny_mlp":
        if len(input_shape) != 1:
            raise ConfigurationError(f"tiny_mlp needs a flat input shape, got {input_shape}")
        kinds = [("dense", hidden), ("relu",), ("dense", num_classes)]
    elif arch_name == "tiny_cnn":
        if len(input_shape) != 3:
            raise ConfigurationError(f"tiny_cnn needs a (C, H, W) input shape, got {input_shape}")
        kinds = [("conv2d", filters, kernel_size), ("relu",), ("flatten",), ("dense", num_classes)]
    else:
        raise ConfigurationError(f"unknown architecture {arch_name!r}; expected one of {ARCHITECTURES}")
    if num_classes < 2:
        raise ConfigurationError("num_classes must be >= 2")
    layout = build_layout(kinds, input_shape)
    return layout, init_params(layout, seed)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise ConfigurationError("empty batch")
        if len(self.inputs) != len(self.labels):
            raise ConfigurationError("inputs and labels differ in length")

    def __len__(self):
        return len(self.labels)


def _check_finite(z, layer_id):
    if not np.all(np.isfinite(z)):
        raise NumericalError(f"non-finite activations at layer {layer_id}", layer=layer_id)


def _conv_windows(x, k):
    # (N, C, Ho, Wo, k, k)
    return sliding_window_view(x, (k, k), axis=(2, 3))


def _forward(layout, params, x):
    cache = []
    for li, spec in enumerate(layout.layers):
        if spec.kind == "dense":
            w, b = spec.split(params)
            cache.append(x)
            x = x @ w.T + b
        elif spec.kind == "conv2d":
            w, b = spec.split(params)
            cols = _conv_windows(x, spec.kernel_size)
            cache.append(cols)
            x = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) + b[:, None, None]
        elif spec.kind == "relu":
            cache.append(x > 0)
            x = np.where(x > 0, x, 0.0)
        else:
            cache.append(x.shape)
            x = x.reshape(len(x), -1)
        _check_finite(x, li)
    return x, cache


def _softmax_xent(logits, labels, weights):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsumexp[:, None]
    nll = -logp[np.arange(len(labels)), labels]
    return float(np.mean(weights * nll)), logp


def _validate(layout, params, batch):
    if params.shape != (layout.total_params,):
        raise ConfigurationError(f"params length {params.shape} != {layout.total_params}")
    if batch.inputs.shape[1:] != layout.input_shape:
        raise ConfigurationError(f"batch inputs {batch.inputs.shape[1:]} != model input {layout.input_shape}")
    if batch.labels.min() < 0 or batch.labels.max() >= layout.num_classes:
        raise ConfigurationError("labels outside [0, num_classes)")


def forward_loss(layout, params, batch, sample_weight=None):
    """Mean softmax cross-entropy and logits.

    ``sample_weight`` scales each sample's loss term before averaging.
    """
    _validate(layout, params, batch)
    logits, _ = _forward(layout, params, batch.inputs)
    weights = np.ones(len(batch)) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    loss, _ = _softmax_xent(logits, batch.labels, weights)
    return loss, logits


def loss_and_grad(layout, params, batch, sample_weight=None):
    _validate(layout, params, batch)
    n = len(batch)
    weights = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    logits, cache = _forward(layout, params, batch.inputs)
    loss, logp = _softmax_xent(logits, batch.labels, weights)

    dz = np.exp(logp)
    dz[np.arange(n), batch.labels] -= 1.0
    dz *= (weights / n)[:, None]

    grad = np.zeros_like(params)
    for li in range(len(layout.layers) - 1, -1, -1):
        spec = layout.layers[li]
        saved = cache[li]
        if spec.kind == "dense":
            w, _ = spec.split(params)
            gw, gb = spec.split(grad)
            gw[...] = dz.T @ saved
            gb[...] = dz.sum(axis=0)
            if li > 0:
                dz = dz @ w
        elif spec.kind == "conv2d":
            w, _ = spec.split(params)
            gw, gb = spec.split(grad)
            gw[...] = np.tensordot(dz, saved, axes=([0, 2, 3], [0, 2, 3]))
            gb[...] = dz.sum(axis=(0, 2, 3))
            if li > 0:
                k = spec.kernel_size
                _, ho, wo = spec.out_shape
                dx = np.zeros((n,) + spec.in_shape)
                for i in range(k):
                    for j in range(k):
                        dx[:, :, i:i + ho, j:j + wo] += np.tensordot(dz, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dz = dx
        elif spec.kind == "relu":
            dz = np.where(saved, dz, 0.0)
        else:
            dz = dz.reshape(saved)
    _check_finite(grad, -1)
    return loss, grad


def backward(layout, params, batch, sample_weight=None):
    """Exact gradient of :func:`forward_loss` with respect to ``params``."""
    return loss_and_grad(layout, params, batch, sample_weight)[1]


def predict(layout, params, inputs):
    logits, _ = _forward(layout, params, np.asarray(inputs, dtype=np.float64))
    return logits


@dataclass
class OptimizerState:
    kind: str
    lr: float
    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0

    @classmethod
    def sgd(cls, n_params, lr, weight_decay=0.0):
        return cls("sgd", lr, np.zeros(n_params), np.zeros(n_params), weight_decay=weight_decay)

    @classmethod
    def adam(cls, n_params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        return cls("adam", lr, np.zeros(n_params), np.zeros(n_params), beta1, beta2, eps, weight_decay)

    @classmethod
    def create(cls, kind, n_params, lr, weight_decay=0.0):
        if kind == "sgd":
            return cls.sgd(n_params, lr, weight_decay)
        if kind == "adam":
            return cls.adam(n_params, lr, weight_decay=weight_decay)
        raise ConfigurationError(f"unknown optimizer {kind!r}")


def _keep_vector(mask):
    if mask is None:
        return None
    return np.asarray(getattr(mask, "keep", mask), dtype=bool)


def optimizer_step(state: OptimizerState, params, gradient, mask=None):
    """One optimizer step; returns new params and advances ``state`` in place.

    Masked coordinates have their gradient zeroed before the moment update
    and are forced to exactly 0 afterwards. Weight decay is coupled (added
    to the gradient), as in classic L2-regularised Adam/SGD.
    """
    params = np.asarray(params, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if params.shape != gradient.shape or params.shape != state.m.shape:
        raise ConfigurationError(f"shape mismatch: params {params.shape}, grad {gradient.shape}, state {state.m.shape}")
    keep = _keep_vector(mask)
    if keep is not None and keep.shape != params.shape:
        raise ConfigurationError(f"mask shape {keep.shape} != params {params.shape}")

    g = gradient + state.weight_decay * params if state.weight_decay else gradient.copy()
    if keep is not None:
        g[~keep] = 0.0

    if state.kind == "sgd":
        new = params - state.lr * g
    elif state.kind == "adam":
        state.t += 1
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
        if keep is not None:
            state.m[~keep] = 0.0
            state.v[~keep] = 0.0
        m_hat = state.m / (1.0 - state.beta1 ** state.t)
        v_hat = state.v / (1.0 - state.beta2 ** state.t)
        new = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    else:
        raise ConfigurationError(f"unknown optimizer {state.kind!r}")

    if keep is not None:
        new[~keep] = 0.0
    return new


def count_flops(layout: LayerLayout, deactivated_units=()):
    """Forward-pass multiply-add FLOPs (2 per MAC) of conv and dense layers.

    A deactivated unit drops its own output channel/neuron and is removed
    from the fan-in of the following parametric layer.
    """
    dead = {}
    for layer_id, unit in deactivated_units:
        dead.setdefault(int(layer_id), set()).add(int(unit))

    # active input channels (conv) or features (dense) of the current tensor
    shape = layout.input_shape
    active = shape[0]
    flops = 0
    for li, spec in enumerate(layout.layers):
        if spec.kind == "conv2d":
            f_active = spec.n_units - len(dead.get(li, ()))
            _, h, w = spec.out_shape
            flops += 2 * f_active * spec.kernel_size ** 2 * active * h * w
            active = f_active
        elif spec.kind == "dense":
            out_active = spec.n_units - len(dead.get(li, ()))
            flops += 2 * active * out_active
            active = out_active
        elif spec.kind == "flatten":
            active = active * int(np.prod(spec.in_shape[1:]))
    return flops
