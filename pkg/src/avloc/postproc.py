"""Inference-time locality filter: predicted events cluster in time, so
runs of identical labels shorter than a window are treated as anomalies
and corrected to the prevailing label."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class LabelRun:
    """A maximal stretch of one label: [start, start + length)."""

    label: int
    start: int
    length: int


def runs_of(labels) -> list[LabelRun]:
    """Decompose a label sequence into maximal runs partitioning [0, T)."""
    labels = list(labels)
    if not labels:
        return []
    runs = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            runs.append(LabelRun(int(labels[start]), start, i - start))
            start = i
    return runs


def locality_filter(pred, window: int) -> np.ndarray:
    """Correct short runs to the prevailing label.

    A run of length >= window is long. The prevailing label starts as the
    first long run's label (or, if no run is long, the majority label with
    earliest-run tie-break); scanning left to right, every short run is
    rewritten to the current prevailing label and every long run installs
    its own label as the new prevailing one. Short runs before the first
    long run are therefore corrected to that run's label.
    """
    pred = np.asarray(pred, dtype=np.int64)
    if pred.ndim != 1 or pred.size < 1:
        raise ValueError(f"predictions must be a non-empty vector, got shape {pred.shape}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")

    runs = runs_of(pred)
    prevailing = None
    for run in runs:
        if run.length >= window:
            prevailing = run.label
            break
    if prevailing is None:
        counts: dict[int, int] = {}
        first_seen: dict[int, int] = {}
        for run in runs:
            counts[run.label] = counts.get(run.label, 0) + run.length
            first_seen.setdefault(run.label, run.start)
        best = max(counts.values())
        prevailing = min((lab for lab, n in counts.items() if n == best),
                         key=lambda lab: first_seen[lab])

    out = np.empty_like(pred)
    for run in runs:
        if run.length >= window:
            prevailing = run.label
            out[run.start:run.start + run.length] = run.label
        else:
            out[run.start:run.start + run.length] = prevailing
    return out


# ---------------------------------------------------------------------------
# prediction CSV
# ---------------------------------------------------------------------------

CSV_HEADER = ("sequence_id", "t", "class_index")


def write_predictions_csv(path, preds: list[tuple[str, np.ndarray]]) -> None:
    """Rows of (sequence_id, t, class_index), segments in order per sequence."""
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for seq_id, labels in preds:
            for t, lab in enumerate(labels):
                writer.writerow([seq_id, t, int(lab)])


def read_predictions_csv(path) -> list[tuple[str, np.ndarray]]:
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {CSV_HEADER}, got {header}")
        grouped: dict[str, list[tuple[int, int]]] = {}
        order: list[str] = []
        for row in reader:
            if not row:
                continue
            seq_id, t, lab = row[0], int(row[1]), int(row[2])
            if seq_id not in grouped:
                grouped[seq_id] = []
                order.append(seq_id)
            grouped[seq_id].append((t, lab))
    preds = []
    for seq_id in order:
        entries = sorted(grouped[seq_id])
        if [t for t, _ in entries] != list(range(len(entries))):
            raise ValueError(f"{path}: sequence {seq_id} has non-contiguous segment indices")
        preds.append((seq_id, np.array([lab for _, lab in entries], dtype=np.int64)))
    return preds


def filter_predictions(preds: list[tuple[str, np.ndarray]], window: int
                       ) -> list[tuple[str, np.ndarray]]:
    return [(seq_id, locality_filter(labels, window)) for seq_id, labels in preds]
