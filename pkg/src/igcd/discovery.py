"""Density-peak detection, IoU-based deduplication, pseudo-labeling of peak
neighborhoods, and category-count estimation.

A point is a peak when its density strictly exceeds the density of every one
of its k nearest neighbors. Redundant peaks are removed by greedy
non-maximum suppression in descending density order: a peak survives only if
the intersection-over-union of its K^d-neighborhood with every
already-kept peak's neighborhood stays at or below the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CategoryRegistry, ConfigurationError, EmbeddingMatrix, PROVENANCE_DISCOVERED, RunConfig
from .neighbors import NeighborGraph, build_knn_graph, compute_density


@dataclass(frozen=True)
class PeakSet:
    """Density peaks as (point index, density), in strictly descending density
    order with ascending-index tie-break; no duplicate indices."""

    peaks: tuple[tuple[int, float], ...]

    def __len__(self) -> int:
        return len(self.peaks)

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.peaks]


def find_density_peaks(graph: NeighborGraph, densities: np.ndarray) -> PeakSet:
    """Points whose density strictly exceeds all their neighbors' densities."""
    d = np.asarray(densities, dtype=np.float64)
    if d.shape != (graph.n,):
        raise ConfigurationError("densities are not aligned with the graph")
    is_peak = (d[:, None] > d[graph.indices]).all(axis=1)
    idx = np.flatnonzero(is_peak)
    order = np.lexsort((idx, -d[idx]))
    return PeakSet(peaks=tuple((int(i), float(d[i])) for i in idx[order]))


def _iou(a: frozenset, b: frozenset) -> float:
    return len(a & b) / len(a | b)


def dedup_peaks(peaks: PeakSet, graph_kd: NeighborGraph, threshold: float,
                pre_kept: tuple[int, ...] = ()) -> PeakSet:
    """Greedy NMS over peaks in descending density order.

    `pre_kept` seeds the kept set with point indices whose neighborhoods
    suppress overlapping peaks without being returned themselves (used by the
    engine to suppress peaks that re-find already-known categories).
    """
    if threshold <= 0:
        raise ConfigurationError(f"iou threshold must be > 0, got {threshold}")
    neigh = {int(i): frozenset(graph_kd.indices[int(i)]) for i in pre_kept}
    for i, _ in peaks.peaks:
        neigh[i] = frozenset(graph_kd.indices[i])
    kept: list[tuple[int, float]] = []
    kept_sets = [neigh[int(i)] for i in pre_kept]
    for i, dens in peaks.peaks:
        if all(_iou(neigh[i], s) <= threshold for s in kept_sets):
            kept.append((i, dens))
            kept_sets.append(neigh[i])
    return PeakSet(peaks=tuple(kept))


def pseudo_label_peaks(kept: PeakSet, graph: NeighborGraph, m: int,
                       registry: CategoryRegistry, stage: int) -> list[tuple[int, int]]:
    """Give each kept peak a fresh category id and label it plus its m nearest
    neighbors with that id.

    A point claimed by several peaks goes to the peak it is most similar to;
    ties go to the denser peak. Peaks always keep their own id.
    """
    if m < 0 or m > graph.k:
        raise ConfigurationError(f"m must be in [0, {graph.k}], got {m}")
    if not kept.peaks:
        return []
    ids = registry.register(len(kept.peaks), PROVENANCE_DISCOVERED, stage)
    # claims: point -> (similarity, peak rank) with peak self-claims at sim 1
    best: dict[int, tuple[float, int]] = {}
    for rank, (peak, _) in enumerate(kept.peaks):
        claims = [(peak, 2.0)] + [
            (int(graph.indices[peak, j]), float(graph.sims[peak, j])) for j in range(m)
        ]
        for point, sim in claims:
            cur = best.get(point)
            # peaks are in descending density order, so a smaller rank wins ties
            if cur is None or sim > cur[0] or (sim == cur[0] and rank < cur[1]):
                best[point] = (sim, rank)
    out = [(point, ids[rank]) for point, (_, rank) in best.items()]
    out.sort()
    return out


def select_peaks(embeddings: EmbeddingMatrix, config: RunConfig) -> PeakSet:
    """Kept density peaks of an embedding set under the configured K, K^d, T."""
    if embeddings.n <= config.k_density:
        raise ConfigurationError(
            f"need more than k_density={config.k_density} points, got {embeddings.n}"
        )
    graph = build_knn_graph(embeddings, config.k_density)
    densities = compute_density(graph)
    peaks = find_density_peaks(graph, densities)
    graph_kd = build_knn_graph(embeddings, min(config.k_iou, embeddings.n - 1))
    return dedup_peaks(peaks, graph_kd, config.iou_threshold)


def estimate_category_count(embeddings: EmbeddingMatrix, config: RunConfig) -> int:
    """Number of kept density peaks, the category-count estimate."""
    return len(select_peaks(embeddings, config))
