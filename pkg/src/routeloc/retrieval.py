"""Retrieval quality metrics over descriptor stores.

Covers top-k% recall curves (rank cutoff is a percentage of the reference
set), precision/recall over distance thresholds for matched vs unmatched
pairs, and paired distance histograms over shared bin edges.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .store import DescriptorStore


@dataclass
class RecallCurve:
    """Top-k% recall: (k_percent, recall) points, k ascending."""

    points: list

    def recall_at(self, k_percent: float) -> float:
        for k, r in self.points:
            if k == k_percent:
                return r
        raise KeyError(f"no point at k={k_percent}")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k_percent", "recall"])
            for k, r in self.points:
                w.writerow(["%.17g" % k, "%.17g" % r])


@dataclass
class PrCurve:
    """Precision/recall at ascending distance thresholds."""

    points: list  # (threshold, precision, recall)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            for t, p, r in self.points:
                w.writerow(["%.17g" % t, "%.17g" % p, "%.17g" % r])


@dataclass
class DistHistogram:
    """Matched and unmatched distance histograms over shared bin edges."""

    edges: np.ndarray
    matched_counts: np.ndarray
    unmatched_counts: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "matched", "unmatched"])
            for i in range(len(self.matched_counts)):
                w.writerow([
                    "%.17g" % self.edges[i],
                    "%.17g" % self.edges[i + 1],
                    int(self.matched_counts[i]),
                    int(self.unmatched_counts[i]),
                ])


def truth_ranks(query_vectors, truth_ids, refs: DescriptorStore) -> np.ndarray:
    """1-based rank of each query's true reference under (distance, ref id) order.

    Distance ties are broken by ascending reference id, matching an
    exhaustive sort with that key.
    """
    q = np.asarray(query_vectors, dtype=np.float64)
    truth = np.asarray(truth_ids, dtype=np.int64)
    if q.ndim != 2 or len(q) != len(truth):
        raise ValueError("need query vectors (Q, dim) with one truth id per query")
    if len(q) == 0:
        raise ValueError("no queries given")
    ranks = np.empty(len(q), dtype=np.int64)
    for i in range(len(q)):
        d = refs.distances_to(q[i])
        dt = d[refs.row_of(int(truth[i]))]
        ahead = np.sum(d < dt) + np.sum((d == dt) & (refs.ids < truth[i]))
        ranks[i] = int(ahead) + 1
    return ranks


def topk_percent_recall(query_vectors, truth_ids, refs: DescriptorStore,
                        ks) -> RecallCurve:
    """Recall within the top ceil(k/100 * |refs|) nearest references, per k.

    Every query's truth id must exist in the reference store.
    """
    ks = sorted(float(k) for k in ks)
    if not ks:
        raise ValueError("need at least one k value")
    if any(k <= 0 or k > 100 for k in ks):
        raise ValueError(f"k percentages must lie in (0, 100], got {ks}")
    ranks = truth_ranks(query_vectors, truth_ids, refs)
    points = []
    for k in ks:
        cutoff = math.ceil(k / 100.0 * len(refs))
        points.append((k, float(np.mean(ranks <= cutoff))))
    return RecallCurve(points)


def precision_recall_curve(matched_d, unmatched_d, thresholds) -> PrCurve:
    """Precision and recall of "distance <= threshold means match" per threshold.

    Precision is defined as 1.0 at thresholds that retrieve nothing.
    """
    m = np.asarray(matched_d, dtype=np.float64)
    u = np.asarray(unmatched_d, dtype=np.float64)
    if m.size == 0:
        raise ValueError("need at least one matched distance")
    if np.any(m < 0) or np.any(u < 0):
        raise ValueError("distances must be non-negative")
    ts = sorted(float(t) for t in thresholds)
    if not ts:
        raise ValueError("need at least one threshold")
    points = []
    for t in ts:
        tp = int(np.sum(m <= t))
        fp = int(np.sum(u <= t))
        precision = tp / (tp + fp) if tp + fp else 1.0
        recall = tp / m.size
        points.append((t, precision, recall))
    return PrCurve(points)


def distance_histograms(matched_d, unmatched_d, bin_count: int = 32) -> DistHistogram:
    """Histogram both distance populations over shared edges spanning [0, max]."""
    m = np.asarray(matched_d, dtype=np.float64)
    u = np.asarray(unmatched_d, dtype=np.float64)
    if m.size == 0 or u.size == 0:
        raise ValueError("both distance populations must be non-empty")
    if bin_count < 1:
        raise ValueError(f"bin_count must be >= 1, got {bin_count}")
    hi = float(max(m.max(), u.max()))
    if hi <= 0:
        hi = 1.0
    edges = np.linspace(0.0, hi, bin_count + 1)
    mc, _ = np.histogram(m, bins=edges)
    uc, _ = np.histogram(u, bins=edges)
    return DistHistogram(edges=edges, matched_counts=mc, unmatched_counts=uc)
