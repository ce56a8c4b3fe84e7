"""Guidance-matrix math: exploration deviations, client agreement, importance,
agreement-weighted EMA refinement, mask thresholding and unit collapse.

Everything here is a pure function of flat float64 vectors. Min-max
statistics are taken over prunable parameters only; non-prunable
parameters carry guidance 1 and are never masked.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import ConfigurationError, ParseError


@dataclass
class GuidanceState:
    G: np.ndarray
    round: int = 0


@dataclass(frozen=True, eq=False)
class RoundScores:
    A: np.ndarray
    V: np.ndarray
    delta_hat: np.ndarray
    I: np.ndarray


@dataclass(frozen=True, eq=False)
class PruningMask:
    keep: np.ndarray
    deactivated_units: frozenset = field(default_factory=frozenset)

    @property
    def kept_count(self):
        return int(self.keep.sum())

    @classmethod
    def all_keep(cls, n_params):
        return cls(np.ones(n_params, dtype=bool), frozenset())


def _same_length(*vectors):
    n = len(vectors[0])
    if any(len(v) != n for v in vectors[1:]):
        raise ConfigurationError("vector length mismatch: " + ", ".join(str(len(v)) for v in vectors))


def minmax_prunable(values, prunable):
    """Min-max normalise ``values`` over prunable entries; non-prunable -> 1.

    A flat (max == min) vector maps to all ones: no signal, keep everything.
    """
    values = np.asarray(values, dtype=np.float64)
    out = np.ones_like(values)
    sel = values[prunable]
    if sel.size == 0:
        return out
    lo, hi = sel.min(), sel.max()
    if hi > lo:
        out[prunable] = np.clip((sel - lo) / (hi - lo), 0.0, 1.0)
    return out


def deviation_scores(w_final, w_init):
    w_final = np.asarray(w_final, dtype=np.float64)
    w_init = np.asarray(w_init, dtype=np.float64)
    _same_length(w_final, w_init)
    return (w_final - w_init) ** 2


def init_guidance(per_client_deviations, layout):
    if len(per_client_deviations) == 0:
        raise ConfigurationError("init_guidance needs at least one explorer report")
    devs = np.asarray(per_client_deviations, dtype=np.float64)
    mean = devs.mean(axis=0)
    _same_length(mean, layout.prunable)
    return GuidanceState(minmax_prunable(mean, layout.prunable), round=0)


def agreement(updates):
    """Per-parameter agreement ``A = |mean sign| / (1 + V)`` and population
    variance ``V`` across the K client updates (rows of ``updates``)."""
    updates = np.asarray(updates, dtype=np.float64)
    if updates.ndim != 2 or updates.shape[0] == 0:
        raise ConfigurationError("agreement needs a (K, P) array with K >= 1")
    direction = np.abs(np.sign(updates).mean(axis=0))
    variance = updates.var(axis=0)
    return direction / (1.0 + variance), variance


def importance(aggregated_update, A, layout):
    """Normalised squared aggregated update ``delta_hat`` and ``I = delta_hat (1 + A)``."""
    aggregated_update = np.asarray(aggregated_update, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    _same_length(aggregated_update, A, layout.prunable)
    delta_hat = minmax_prunable(aggregated_update ** 2, layout.prunable)
    return delta_hat, delta_hat * (1.0 + A)


def round_scores(updates, layout):
    """Agreement and importance of one round from the (K, P) client updates."""
    updates = np.asarray(updates, dtype=np.float64)
    A, V = agreement(updates)
    delta_hat, I = importance(updates.mean(axis=0), A, layout)
    return RoundScores(A, V, delta_hat, I)


def ema_refine(state, I, A, layout, bound="renormalize"):
    """Agreement-weighted EMA ``G' = (1 - A) G + A I`` on prunable parameters.

    ``I`` can reach 2, so the raw blend is brought back into [0, 1] either by
    min-max renormalisation (default) or by clipping (``bound="clamp"``).
    """
    I = np.asarray(I, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    _same_length(state.G, I, A, layout.prunable)
    raw = (1.0 - A) * state.G + A * I
    if bound == "renormalize":
        G = minmax_prunable(raw, layout.prunable)
    elif bound == "clamp":
        G = np.where(layout.prunable, np.clip(raw, 0.0, 1.0), 1.0)
    elif bound == "none":
        G = np.where(layout.prunable, raw, 1.0)
    else:
        raise ConfigurationError(f"unknown guidance bound {bound!r}")
    return GuidanceState(G, state.round + 1)


def deactivated_units(keep, layout):
    """Units whose prunable parameters are all masked."""
    keep = np.asarray(keep, dtype=bool)
    owned = layout.prunable & (layout.unit_layer >= 0)
    pruned = owned & ~keep
    dead = set()
    for spec_id, spec in enumerate(layout.layers):
        if spec.n_units == 0:
            continue
        in_layer = layout.unit_layer == spec_id
        units = layout.unit_id[in_layer & owned]
        total = np.bincount(units, minlength=spec.n_units)
        gone = np.bincount(layout.unit_id[in_layer & pruned], minlength=spec.n_units)
        dead.update((spec_id, int(u)) for u in np.flatnonzero((total > 0) & (gone == total)))
    return frozenset(dead)


def mask_from_keep(keep, layout):
    keep = np.asarray(keep, dtype=bool) | ~layout.prunable
    return PruningMask(keep, deactivated_units(keep, layout))


def binarize(state, T_p, layout):
    if not 0.0 <= T_p <= 1.0:
        raise ConfigurationError(f"T_p={T_p} outside [0, 1]")
    return mask_from_keep(state.G >= T_p, layout)


def apply_mask(params, mask):
    params = np.asarray(params, dtype=np.float64)
    keep = np.asarray(getattr(mask, "keep", mask), dtype=bool)
    _same_length(params, keep)
    return np.where(keep, params, 0.0)


@dataclass(frozen=True, eq=False)
class SaliencyReport:
    coords: np.ndarray
    measured: np.ndarray  # loss change from moving each coordinate to its reference
    predicted: np.ndarray  # 0.5 * h_m * displacement^2
    curvature: np.ndarray
    spearman: float


def taylor_saliency(loss_fn, params, coords, reference=None, h=1e-3):
    """Compare the measured loss change from displacing single coordinates
    against the second-order prediction ``0.5 * h_m * d_m^2``.

    ``reference`` is the target value per parameter (zeros by default, i.e.
    pruning the coordinate). ``h_m`` is the central second difference.
    """
    params = np.asarray(params, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.int64)
    ref = np.zeros_like(params) if reference is None else np.asarray(reference, dtype=np.float64)
    base = loss_fn(params)
    measured, curvature = np.empty(len(coords)), np.empty(len(coords))
    for j, m in enumerate(coords):
        w = params.copy()
        w[m] = ref[m]
        measured[j] = loss_fn(w) - base
        w[m] = params[m] + h
        up = loss_fn(w)
        w[m] = params[m] - h
        down = loss_fn(w)
        curvature[j] = (up - 2.0 * base + down) / h ** 2
    predicted = 0.5 * curvature * (params[coords] - ref[coords]) ** 2
    rho = stats.spearmanr(measured, predicted).statistic if len(coords) > 1 else np.nan
    return SaliencyReport(coords, measured, predicted, curvature, float(rho))


def taylor_saliency_check(layout, params, batch, coords, reference=None, h=1e-3):
    from .engine import forward_loss

    return taylor_saliency(lambda w: forward_loss(layout, w, batch)[0], params, coords, reference, h)


GUIDANCE_MAGIC = b"AFG1"


def save_guidance(state, path):
    """Binary layout: magic ``AFG1``, uint32 round, uint64 length, float64[length]; little-endian."""
    G = np.ascontiguousarray(state.G, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(GUIDANCE_MAGIC)
        fh.write(struct.pack("<IQ", state.round, len(G)))
        fh.write(G.tobytes())


def load_guidance(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GUIDANCE_MAGIC:
        raise ParseError(f"{path}: not a guidance file (bad magic {blob[:4]!r})")
    if len(blob) < 16:
        raise ParseError(f"{path}: truncated header")
    rnd, n = struct.unpack("<IQ", blob[4:16])
    if len(blob) != 16 + 8 * n:
        raise ParseError(f"{path}: expected {n} values, file holds {(len(blob) - 16) / 8:g}")
    return GuidanceState(np.frombuffer(blob[16:], dtype="<f8").astype(np.float64), round=rnd)
