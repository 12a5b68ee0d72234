"""The non-parametric soft nearest-neighbor classifier and its support set.

A query is assigned the softmax-similarity-weighted average of the one-hot
labels of all support entries. The support set is the classifier: adding
entries for a new category widens the prediction space without touching any
existing entry.

Each entry stores the raw embedding it came from and, optionally, a
projection-space snapshot; predictions run against the snapshots (or the raw
vectors when no snapshots are given), while novelty checks compare against
the raw side.
"""

from __future__ import annotations

import numpy as np

from .core import (
    CategoryRegistry,
    ConfigurationError,
    EmbeddingMatrix,
    RunConfig,
    StageDataset,
    StateError,
)
from .neighbors import build_knn_graph, compute_density


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ConfigurationError("support embeddings must be nonzero")
    return mat / norms


class SupportSet:
    """Immutable set of (unit-norm embedding, category id) pairs with a
    per-category entry budget.

    Entries are held in a canonical order (category id, then embedding bytes)
    so prediction sums never depend on insertion or argument order.
    """

    __slots__ = ("matrix", "raw_matrix", "labels", "category_ids",
                 "per_category_budget", "_onehot")

    def __init__(self, entries, per_category_budget: int, projections=None) -> None:
        if per_category_budget < 1:
            raise ConfigurationError("per-category budget must be >= 1")
        entries = list(entries)
        raw = _unit_rows(np.vstack([v for v, _ in entries])) if entries else np.empty((0, 0))
        labels = np.array([int(c) for _, c in entries], dtype=np.int64)
        if projections is None:
            proj = raw
        else:
            proj = _unit_rows(np.asarray(projections, dtype=np.float64))
            if proj.shape[0] != len(entries):
                raise ConfigurationError("projections must align with entries")
        order = sorted(range(len(entries)),
                       key=lambda i: (labels[i], raw[i].tobytes()))
        self.per_category_budget = per_category_budget
        self.raw_matrix = raw[order] if entries else raw
        self.matrix = proj[order] if entries else proj
        self.labels = labels[order] if entries else labels
        for arr in (self.raw_matrix, self.matrix, self.labels):
            arr.setflags(write=False)
        self.category_ids = sorted(set(self.labels.tolist()))
        counts = {c: int((self.labels == c).sum()) for c in self.category_ids}
        over = {c: n for c, n in counts.items() if n > per_category_budget}
        if over:
            raise StateError(f"support budget {per_category_budget} exceeded for categories {over}")
        col = {c: j for j, c in enumerate(self.category_ids)}
        onehot = np.zeros((len(self.labels), len(self.category_ids)))
        for i, c in enumerate(self.labels):
            onehot[i, col[int(c)]] = 1.0
        onehot.setflags(write=False)
        self._onehot = onehot

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_categories(self) -> int:
        return len(self.category_ids)

    def entries(self) -> list[tuple[np.ndarray, int]]:
        return [(self.raw_matrix[i].copy(), int(self.labels[i])) for i in range(len(self.labels))]

    def projections(self) -> np.ndarray:
        return self.matrix.copy()

    def category_counts(self) -> dict[int, int]:
        return {c: int((self.labels == c).sum()) for c in self.category_ids}

    def validate_against(self, registry: CategoryRegistry) -> None:
        for c in self.category_ids:
            if c not in registry:
                raise StateError(f"support label {c} is not a registered category")


def snn_predict_batch(queries: np.ndarray, support: SupportSet, tau: float) -> np.ndarray:
    """Row-wise soft nearest-neighbor predictions, one probability vector per
    query over support.category_ids. Stable under max-subtraction."""
    if len(support) == 0:
        raise StateError("cannot predict with an empty support set")
    if tau <= 0:
        raise ConfigurationError("tau must be strictly positive")
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2:
        raise ConfigurationError("queries must be a 2-D array")
    if q.shape[0] == 0:
        return np.empty((0, support.n_categories))
    logits = (q @ support.matrix.T) / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ support._onehot


def snn_predict(query: np.ndarray, support: SupportSet, tau: float) -> np.ndarray:
    return snn_predict_batch(np.asarray(query, dtype=np.float64)[None, :], support, tau)[0]


def predict_categories(queries: np.ndarray, support: SupportSet, tau: float) -> np.ndarray:
    """Hard assignments: argmax probability, lowest category id on ties."""
    p = snn_predict_batch(queries, support, tau)
    ids = np.asarray(support.category_ids, dtype=np.int64)
    return ids[p.argmax(axis=1)]


def select_representative_indices(vectors: np.ndarray, samples, per_category: int,
                                  k_density: int, mode: str = "density",
                                  rng: np.random.Generator | None = None) -> list[tuple[int, int]]:
    """Pick up to `per_category` representative (row, category) pairs per
    category.

    Density mode builds an intra-category neighbor graph and keeps the
    densest samples; categories at or under budget contribute everything.
    """
    by_cat: dict[int, list[int]] = {}
    for idx, cat in samples:
        by_cat.setdefault(int(cat), []).append(int(idx))
    out: list[tuple[int, int]] = []
    for cat in sorted(by_cat):
        rows = by_cat[cat]
        if len(rows) <= per_category:
            chosen = rows
        elif mode == "random":
            if rng is None:
                raise ConfigurationError("random selection needs a generator")
            chosen = sorted(rng.choice(rows, size=per_category, replace=False).tolist())
        elif mode == "centroid":
            chosen = _closest_to_centroid(vectors, rows, per_category)
        else:
            sub = EmbeddingMatrix(vectors[rows])
            k = min(k_density, sub.n - 1)
            densities = compute_density(build_knn_graph(sub, k))
            order = np.lexsort((np.arange(sub.n), -densities))[:per_category]
            chosen = [rows[int(j)] for j in order]
        out.extend((i, cat) for i in chosen)
    return out


def select_support_entries(vectors: np.ndarray, samples, per_category: int,
                           k_density: int, mode: str = "density",
                           rng: np.random.Generator | None = None) -> list[tuple[np.ndarray, int]]:
    picked = select_representative_indices(vectors, samples, per_category,
                                           k_density, mode=mode, rng=rng)
    return [(vectors[i], cat) for i, cat in picked]


def _closest_to_centroid(vectors: np.ndarray, rows: list[int], per_category: int) -> list[int]:
    sub = np.asarray(vectors[rows], dtype=np.float64)
    centroid = sub.mean(axis=0)
    dists = np.linalg.norm(sub - centroid, axis=1)
    order = np.lexsort((np.arange(len(rows)), dists))[:per_category]
    return [rows[int(j)] for j in order]


def select_support_labeled(stage: StageDataset, embeddings: EmbeddingMatrix,
                           config: RunConfig, registry: CategoryRegistry | None = None,
                           rng: np.random.Generator | None = None) -> list[tuple[np.ndarray, int]]:
    """Support entries for every labeled category of a stage."""
    if registry is not None:
        stage.validate_against(registry)
    return select_support_entries(embeddings.data, stage.labeled,
                                  config.support_per_category, config.k_density,
                                  mode=config.support_select, rng=rng)


def extend_support(support: SupportSet, discovered, vectors: np.ndarray,
                   projections: np.ndarray | None = None) -> SupportSet:
    """Append (row index, category id) entries; existing entries untouched."""
    entries = support.entries()
    proj = list(support.matrix)
    for i, cat in discovered:
        entries.append((vectors[int(i)], int(cat)))
        proj.append(_unit_rows(np.asarray(
            (projections if projections is not None else vectors)[int(i)], dtype=np.float64)[None, :])[0])
    if not entries:
        return SupportSet([], support.per_category_budget)
    return SupportSet(entries, support.per_category_budget, projections=np.vstack(proj))
