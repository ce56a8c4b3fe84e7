"""Evaluation, update-variance tracking, cost accounting and report I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from .engine import _softmax_xent, predict
from .errors import ParseError


@dataclass(frozen=True)
class RoundReport:
    round: int
    test_accuracy: float
    test_loss: float
    sigma2_dW: float
    sparsity: float
    deactivated_units: int
    comm_up_bytes: int
    comm_down_bytes: int
    flops_forward: int
    compression_rate: float


CSV_COLUMNS = tuple(f.name for f in fields(RoundReport))
_INT_COLUMNS = {"round", "deactivated_units", "comm_up_bytes", "comm_down_bytes", "flops_forward"}


def evaluate(layout, params, test, batch_size=1024):
    """Top-1 accuracy and mean cross-entropy against the clean labels."""
    labels = test.clean_labels
    correct, loss_sum = 0, 0.0
    for start in range(0, len(labels), batch_size):
        x = test.samples[start:start + batch_size]
        y = labels[start:start + batch_size]
        logits = predict(layout, params, x)
        loss, _ = _softmax_xent(logits, y, np.ones(len(y)))
        loss_sum += loss * len(y)
        correct += int(np.sum(logits.argmax(axis=1) == y))
    return correct / len(labels), loss_sum / len(labels)


def update_variance(updates, keep=None, prunable=None):
    """Mean over kept prunable parameters of the per-parameter population
    variance across client updates (rows of ``updates``)."""
    updates = np.asarray(updates, dtype=np.float64)
    sel = np.ones(updates.shape[1], dtype=bool)
    if keep is not None:
        sel &= np.asarray(getattr(keep, "keep", keep), dtype=bool)
    if prunable is not None:
        sel &= prunable
    if not sel.any():
        return 0.0
    return float(updates[:, sel].var(axis=0).mean())


def rounds_to_target(reports, target_accuracy):
    """First round whose accuracy reaches ``target_accuracy``, or None."""
    for rep in reports:
        if rep.test_accuracy >= target_accuracy:
            return rep.round
    return None


def guidance_histogram(state, layout, bins=10):
    """Absolute frequencies of prunable guidance values over [0, 1]."""
    return np.histogram(state.G[layout.prunable], bins=bins, range=(0.0, 1.0))


def downlink_bytes(total_params, kept):
    """Mask bitmap plus dense float64 kept weights, per receiving client."""
    return math.ceil(total_params / 8) + 8 * int(kept)


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6g}"


def write_reports_csv(reports, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rep in reports:
            writer.writerow([_fmt(v) for v in astuple(rep)])


def read_reports_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ParseError(f"{path}: expected header {','.join(CSV_COLUMNS)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise ParseError(f"{path}: row {lineno}: expected {len(CSV_COLUMNS)} fields", row=lineno)
            values = {}
            try:
                for name, cell in zip(CSV_COLUMNS, row):
                    values[name] = int(cell) if name in _INT_COLUMNS else float(cell)
            except ValueError as exc:
                raise ParseError(f"{path}: row {lineno}: {exc}", row=lineno) from None
            out.append(RoundReport(**values))
    return out
