"""Exact k-nearest-neighbor graphs under cosine similarity, and per-point
density as the mean cosine similarity to the k nearest neighbors.

Similarities are computed with blocked matrix products in float64 over
row-normalized copies, so results are scale-invariant in the inputs and
independent of the block size. Self-matches are excluded and top-k ties are
broken by ascending index for cross-platform determinism.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, DataError, EmbeddingMatrix


@dataclass(frozen=True)
class NeighborGraph:
    """Per-point neighbor indices and cosine similarities, both N x k,
    ordered by non-increasing similarity."""

    k: int
    indices: np.ndarray
    sims: np.ndarray

    def __post_init__(self):
        n, k = self.indices.shape
        if self.sims.shape != (n, k) or k != self.k:
            raise DataError("neighbor graph arrays are inconsistent")

    @property
    def n(self) -> int:
        return self.indices.shape[0]


def _normalized_rows(embeddings: EmbeddingMatrix) -> np.ndarray:
    x = embeddings.data.astype(np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("cosine similarity undefined for zero-norm rows")
    return x / norms


def build_knn_graph(embeddings: EmbeddingMatrix, k: int, block_size: int = 512) -> NeighborGraph:
    """Exact top-k cosine neighbors of every point, self excluded."""
    n = embeddings.n
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if k >= n:
        raise ConfigurationError(f"k must be < number of points ({n}), got {k}")
    x = _normalized_rows(embeddings)
    indices = np.empty((n, k), dtype=np.int64)
    sims = np.empty((n, k), dtype=np.float64)
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        block = x[start:stop] @ x.T
        np.clip(block, -1.0, 1.0, out=block)
        block[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        # stable sort on negated sims: equal similarities keep ascending index
        order = np.argsort(-block, axis=1, kind="stable")[:, :k]
        indices[start:stop] = order
        sims[start:stop] = np.take_along_axis(block, order, axis=1)
    return NeighborGraph(k=k, indices=indices, sims=sims)


def compute_density(graph: NeighborGraph) -> np.ndarray:
    """Mean cosine similarity to the k nearest neighbors; values in [-1, 1]."""
    return graph.sims.mean(axis=1)
