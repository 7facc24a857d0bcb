"""Modality-gap diagnostics between a visual and a text embedding bank.

Covers per-dimension mean gaps, task-aggregated similarity heatmaps,
cross-modal retrieval accuracy, a deterministic 2-d PCA projection, and
CSV/JSON export of all of the above.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .banks import EmbeddingBank, Modality
from .errors import (
    DegenerateVectorError,
    DimensionError,
    EmptyBankError,
    ParameterError,
    TaskMismatchError,
)

# The heatmap aggregates multiple rows per task as the per-task mean; this
# tag is recorded in exported reports so downstream plots know the convention.
TASK_AGGREGATION = "per_task_mean"


@dataclass(frozen=True)
class GapReport:
    """Scalar and per-dimension statistics of the gap between two banks."""

    dim: int
    gap_vector: np.ndarray
    per_dim_abs_mean_gap: np.ndarray
    gap_norm: float
    matched_pair_mean_cosine: float
    retrieval_top1_v2t: float
    retrieval_top1_t2v: float
    n_visual: int
    n_text: int

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "gap_vector": [float(x) for x in self.gap_vector],
            "per_dim_abs_mean_gap": [float(x) for x in self.per_dim_abs_mean_gap],
            "gap_norm": self.gap_norm,
            "matched_pair_mean_cosine": self.matched_pair_mean_cosine,
            "retrieval_top1_v2t": self.retrieval_top1_v2t,
            "retrieval_top1_t2v": self.retrieval_top1_t2v,
            "n_visual": self.n_visual,
            "n_text": self.n_text,
            "aggregation": TASK_AGGREGATION,
        }


def _check_pair(bank_v: EmbeddingBank, bank_l: EmbeddingBank) -> None:
    if bank_v.n == 0 or bank_l.n == 0:
        raise EmptyBankError("both banks must be non-empty")
    if bank_v.dim != bank_l.dim:
        raise DimensionError(f"dimension mismatch: {bank_v.dim} vs {bank_l.dim}")


def gap_vector(bank_v: EmbeddingBank, bank_l: EmbeddingBank) -> np.ndarray:
    """Componentwise mean(visual rows) - mean(text rows)."""
    _check_pair(bank_v, bank_l)
    return bank_v.values.mean(axis=0) - bank_l.values.mean(axis=0)


def per_dimension_mean_gap(bank_v: EmbeddingBank, bank_l: EmbeddingBank) -> np.ndarray:
    """Absolute value of gap_vector; the per-dimension gap profile."""
    return np.abs(gap_vector(bank_v, bank_l))


def shared_task_ids(bank_v: EmbeddingBank, bank_l: EmbeddingBank) -> list[str]:
    """The common task ids, sorted lexicographically.

    Raises TaskMismatchError listing the symmetric difference when the two
    banks do not cover the same task set.
    """
    tasks_v = bank_v.task_set()
    tasks_l = bank_l.task_set()
    if tasks_v != tasks_l:
        diff = sorted(tasks_v.symmetric_difference(tasks_l))
        raise TaskMismatchError(f"task sets differ; symmetric difference: {diff}")
    return sorted(tasks_v)


def _per_task_means(bank: EmbeddingBank, tasks: Sequence[str]) -> np.ndarray:
    by_task = {t: [] for t in tasks}
    for tid, row in bank.rows():
        by_task[tid].append(row)
    return np.stack([np.mean(by_task[t], axis=0) for t in tasks])


def _unit_rows(matrix: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise DegenerateVectorError(f"{what} {zero[0]} is a zero vector")
    return matrix / norms[:, None]


def matched_pair_similarity_matrix(bank_v: EmbeddingBank, bank_l: EmbeddingBank) -> np.ndarray:
    """K x K cosine similarities between task-aggregated embeddings.

    Entry (i, j) is the cosine of visual task i against text task j, with
    tasks sorted lexicographically by task_id, so diagonal entries are the
    matched pairs. Each task is aggregated as the mean of its rows.
    """
    _check_pair(bank_v, bank_l)
    tasks = shared_task_ids(bank_v, bank_l)
    means_v = _unit_rows(_per_task_means(bank_v, tasks), "visual task mean")
    means_l = _unit_rows(_per_task_means(bank_l, tasks), "text task mean")
    return means_v @ means_l.T


def retrieval_topk_accuracy(query_bank: EmbeddingBank, gallery_bank: EmbeddingBank, k: int) -> float:
    """Fraction of query rows whose k nearest gallery rows (by cosine) hit
    at least one row of the same task_id.

    Ties are broken lexicographically by gallery task_id and then by row
    index, so the result is deterministic.
    """
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise ParameterError(f"k must be a positive integer, got {k!r}")
    if k > gallery_bank.n:
        raise ParameterError(f"k={k} exceeds gallery size {gallery_bank.n}")
    if query_bank.dim != gallery_bank.dim:
        raise DimensionError(f"dimension mismatch: {query_bank.dim} vs {gallery_bank.dim}")
    missing = query_bank.task_set() - gallery_bank.task_set()
    if missing:
        raise TaskMismatchError(f"query tasks missing from gallery: {sorted(missing)}")
    queries = _unit_rows(query_bank.values, "query row")
    gallery = _unit_rows(gallery_bank.values, "gallery row")
    sims = queries @ gallery.T  # (n_query, n_gallery)
    gallery_ids = np.array(gallery_bank.task_ids)
    indices = np.arange(gallery_bank.n)
    hits = 0
    for q in range(query_bank.n):
        # lexsort uses the last key as primary: similarity desc, then id, then index
        order = np.lexsort((indices, gallery_ids, -sims[q]))
        if np.any(gallery_ids[order[:k]] == query_bank.task_ids[q]):
            hits += 1
    return hits / query_bank.n


class PcaPoint(NamedTuple):
    modality: Modality
    task_id: str
    x: float
    y: float


def pca_project_2d(banks: Sequence[EmbeddingBank]) -> list[PcaPoint]:
    """Project all rows of all banks onto the top-2 principal components
    of the pooled, mean-centered data.

    Deterministic: the sign of each component is fixed so that its first
    loading of non-negligible magnitude is positive.
    """
    banks = list(banks)
    if not banks:
        raise EmptyBankError("at least one bank is required")
    dim = banks[0].dim
    for b in banks:
        if b.dim != dim:
            raise DimensionError(f"dimension mismatch: {b.dim} vs {dim}")
    pooled = np.concatenate([b.values for b in banks], axis=0)
    if pooled.shape[0] < 2:
        raise EmptyBankError("need at least 2 rows for a 2-d projection")
    centered = pooled - pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = np.zeros((2, dim))
    components[: min(2, vt.shape[0])] = vt[:2]
    for c in range(2):
        comp = components[c]
        big = np.flatnonzero(np.abs(comp) > 1e-12 * max(np.abs(comp).max(), 1e-300))
        if big.size and comp[big[0]] < 0:
            components[c] = -comp
    coords = centered @ components.T
    points = []
    i = 0
    for b in banks:
        for tid in b.task_ids:
            points.append(PcaPoint(b.modality, tid, float(coords[i, 0]), float(coords[i, 1])))
            i += 1
    return points


def gap_report(bank_v: EmbeddingBank, bank_l: EmbeddingBank) -> GapReport:
    """All gap statistics for a bank pair in one report."""
    gap = gap_vector(bank_v, bank_l)
    matrix = matched_pair_similarity_matrix(bank_v, bank_l)
    return GapReport(
        dim=bank_v.dim,
        gap_vector=gap,
        per_dim_abs_mean_gap=np.abs(gap),
        gap_norm=float(np.linalg.norm(gap)),
        matched_pair_mean_cosine=float(np.mean(np.diag(matrix))),
        retrieval_top1_v2t=retrieval_topk_accuracy(bank_v, bank_l, 1),
        retrieval_top1_t2v=retrieval_topk_accuracy(bank_l, bank_v, 1),
        n_visual=bank_v.n,
        n_text=bank_l.n,
    )


# ---------------------------------------------------------------------------
# Export: JSON for the report, CSV (UTF-8, header row, '.' decimals) for
# matrix/profile/projection data intended for external plotting.
# ---------------------------------------------------------------------------


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


def export_gap_report(report: GapReport, path) -> None:
    Path(path).write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def export_similarity_matrix(task_ids: Sequence[str], matrix: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = _csv_writer(fh)
        writer.writerow(["visual_task"] + list(task_ids))
        for tid, row in zip(task_ids, matrix):
            writer.writerow([tid] + [repr(float(x)) for x in row])


def export_per_dim_gap(gap: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = _csv_writer(fh)
        writer.writerow(["dim", "gap", "abs_gap"])
        for i, x in enumerate(gap):
            writer.writerow([i, repr(float(x)), repr(abs(float(x)))])


def export_pca_points(points: Sequence[PcaPoint], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = _csv_writer(fh)
        writer.writerow(["modality", "task_id", "x", "y"])
        for p in points:
            writer.writerow([p.modality.value, p.task_id, repr(p.x), repr(p.y)])
