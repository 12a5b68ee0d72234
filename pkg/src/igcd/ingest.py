"""Dataset I/O and deterministic synthetic multi-stage benchmarks.

The generator lays out cluster centers as scaled unit directions: directions
are drawn on the sphere and the common radius is grown just enough to satisfy
the requested minimum center separation. Samples are isotropic Gaussian around
each center and then row-normalized, so all downstream similarity math is
cosine on comparable norms. Re-appearing categories have their centers
perturbed by a Gaussian drift to model cross-stage appearance shift.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CategoryRegistry,
    ConfigurationError,
    DataError,
    EmbeddingMatrix,
    PROVENANCE_LABELED,
    StageDataset,
)

_MAGIC = b"IGCD"
_VERSION_PLAIN = 1
_VERSION_SUPPORT = 2


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a synthetic multi-stage benchmark."""

    n_stages: int = 4
    categories_initial: int = 8
    categories_new_per_stage: tuple[int, ...] = (4, 4, 4)
    categories_old_per_stage: tuple[int, ...] = (4, 4, 4)
    samples_per_category: int = 100
    dim: int = 32
    cluster_std: float = 0.05
    center_separation: float = 8.0
    drift_std: float = 0.03
    heldout_per_category: int = 30
    seed: int = 0

    def validate(self) -> None:
        if self.n_stages < 1:
            raise ConfigurationError("n_stages must be >= 1")
        if self.categories_initial < 1:
            raise ConfigurationError("categories_initial must be >= 1")
        if len(self.categories_new_per_stage) != self.n_stages - 1:
            raise ConfigurationError(
                f"categories_new_per_stage must have {self.n_stages - 1} entries, "
                f"got {len(self.categories_new_per_stage)}"
            )
        if len(self.categories_old_per_stage) != self.n_stages - 1:
            raise ConfigurationError(
                f"categories_old_per_stage must have {self.n_stages - 1} entries, "
                f"got {len(self.categories_old_per_stage)}"
            )
        if self.samples_per_category < 1:
            raise ConfigurationError("samples_per_category must be >= 1")
        if self.dim < 2:
            raise ConfigurationError("dim must be >= 2")
        if self.cluster_std <= 0:
            raise ConfigurationError("cluster_std must be > 0")
        if self.center_separation <= 0:
            raise ConfigurationError("center_separation must be > 0")
        if self.drift_std < 0:
            raise ConfigurationError("drift_std must be >= 0")
        if self.heldout_per_category < 0:
            raise ConfigurationError("heldout_per_category must be >= 0")
        seen = self.categories_initial
        for t in range(1, self.n_stages):
            old = self.categories_old_per_stage[t - 1]
            if old < 0 or self.categories_new_per_stage[t - 1] < 0:
                raise ConfigurationError(f"stage {t}: category counts must be >= 0")
            if old > seen:
                raise ConfigurationError(
                    f"stage {t}: categories_old_per_stage is {old} but only {seen} "
                    f"categories were seen before this stage"
                )
            seen += self.categories_new_per_stage[t - 1]


def _place_centers(n_cat: int, dim: int, sigma: float, separation: float, rng) -> np.ndarray:
    best_dirs, best_delta = None, -1.0
    for _ in range(64):
        dirs = rng.normal(size=(n_cat, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        if n_cat == 1:
            return dirs
        dists = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=2)
        np.fill_diagonal(dists, np.inf)
        delta = float(dists.min())
        if delta > best_delta:
            best_dirs, best_delta = dirs, delta
        if best_delta >= 1.0:
            break
    radius = max(1.0, separation * sigma / best_delta)
    return best_dirs * radius


def _sample_cluster(center: np.ndarray, count: int, sigma: float, rng) -> np.ndarray:
    pts = center + sigma * rng.normal(size=(count, center.shape[0]))
    norms = np.linalg.norm(pts, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("degenerate zero-norm sample during generation")
    return pts / norms


def generate_benchmark(spec: SyntheticSpec):
    """Build (embeddings, stage datasets, registry) for a synthetic benchmark.

    Stage 0 is fully labeled; stages t >= 1 carry only unlabeled data drawn
    from re-appearing (drifted) and novel categories. Fully deterministic
    given spec.seed.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    registry = CategoryRegistry()

    total_cats = spec.categories_initial + sum(spec.categories_new_per_stage)
    all_centers = _place_centers(total_cats, spec.dim, spec.cluster_std, spec.center_separation, rng)
    centers: dict[int, np.ndarray] = {}
    next_center = 0

    rows: list[np.ndarray] = []
    stages: list[StageDataset] = []
    cursor = 0

    def draw(cat: int, count: int) -> list[int]:
        nonlocal cursor
        pts = _sample_cluster(centers[cat], count, spec.cluster_std, rng)
        rows.append(pts)
        idx = list(range(cursor, cursor + count))
        cursor += count
        return idx

    for t in range(spec.n_stages):
        if t == 0:
            cats_new = registry.register(spec.categories_initial, PROVENANCE_LABELED, 0)
            for cid in cats_new:
                centers[cid] = all_centers[next_center]
                next_center += 1
            labeled: list[tuple[int, int]] = []
            heldout: dict[int, int] = {}
            for cid in cats_new:
                for i in draw(cid, spec.samples_per_category):
                    labeled.append((i, cid))
                for i in draw(cid, spec.heldout_per_category):
                    heldout[i] = cid
            stages.append(StageDataset(stage=0, labeled=tuple(labeled), unlabeled=(),
                                       ground_truth={}, heldout=heldout))
            continue

        n_new = spec.categories_new_per_stage[t - 1]
        n_old = spec.categories_old_per_stage[t - 1]
        # temporal continuity: re-appearing categories come from the previous
        # stage first, then from older stages, so early categories fade out
        prev_cats = sorted(stages[t - 1].labeled_categories | stages[t - 1].unlabeled_categories)
        older = sorted(set(centers) - set(prev_cats))
        old_cats: list[int] = []
        if n_old:
            take_prev = min(n_old, len(prev_cats))
            old_cats += rng.choice(prev_cats, size=take_prev, replace=False).tolist()
            if n_old > take_prev:
                old_cats += rng.choice(older, size=n_old - take_prev, replace=False).tolist()
            old_cats = sorted(old_cats)
        for cid in old_cats:
            centers[cid] = centers[cid] + spec.drift_std * rng.normal(size=spec.dim)
        new_cats = registry.register(n_new, PROVENANCE_LABELED, t) if n_new else []
        for cid in new_cats:
            centers[cid] = all_centers[next_center]
            next_center += 1

        unlabeled: list[int] = []
        ground_truth: dict[int, int] = {}
        heldout = {}
        for cid in old_cats + list(new_cats):
            for i in draw(cid, spec.samples_per_category):
                unlabeled.append(i)
                ground_truth[i] = cid
            for i in draw(cid, spec.heldout_per_category):
                heldout[i] = cid
        stages.append(StageDataset(stage=t, labeled=(), unlabeled=tuple(unlabeled),
                                   ground_truth=ground_truth, heldout=heldout))

    matrix = EmbeddingMatrix(np.vstack(rows))
    return matrix, stages, registry


def nn_purity(embeddings: EmbeddingMatrix, labels, k: int) -> float:
    """Fraction of each point's k nearest neighbors sharing its label."""
    from .neighbors import build_knn_graph

    graph = build_knn_graph(embeddings, k)
    lab = np.asarray(labels)
    return float((lab[graph.indices] == lab[:, None]).mean())


def write_embeddings_binary(path, matrix: EmbeddingMatrix, labels=None, version: int = _VERSION_PLAIN) -> None:
    if version == _VERSION_SUPPORT and labels is None:
        raise ConfigurationError("support-table files require labels")
    has_labels = labels is not None
    if has_labels and len(labels) != matrix.n:
        raise DataError(f"label count {len(labels)} does not match row count {matrix.n}")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIIB", version, matrix.n, matrix.d, int(has_labels)))
        fh.write(matrix.data.astype("<f4", copy=False).tobytes(order="C"))
        if has_labels:
            fh.write(np.asarray(labels, dtype="<u4").tobytes())


def read_embeddings_binary(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: bad magic bytes, not an embedding file")
    if len(blob) < 17:
        raise DataError(f"{path}: truncated header")
    version, n, d, has_labels = struct.unpack("<IIIB", blob[4:17])
    if version not in (_VERSION_PLAIN, _VERSION_SUPPORT):
        raise DataError(f"{path}: unsupported version {version}")
    need = 17 + 4 * n * d + (4 * n if has_labels else 0)
    if len(blob) != need:
        raise DataError(f"{path}: expected {need} bytes, found {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", count=n * d, offset=17).reshape(n, d)
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=17 + 4 * n * d).astype(np.int64)
    return EmbeddingMatrix(data), labels


def write_embeddings_text(path, matrix: EmbeddingMatrix, labels=None) -> None:
    has_labels = labels is not None
    if has_labels and len(labels) != matrix.n:
        raise DataError(f"label count {len(labels)} does not match row count {matrix.n}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# dim={matrix.d} labeled={int(has_labels)}\n")
        for i in range(matrix.n):
            parts = [repr(float(v)) for v in matrix.data[i]]
            if has_labels:
                parts.append(str(int(labels[i])))
            fh.write(",".join(parts) + "\n")


def read_embeddings_text(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("# dim="):
        raise DataError(f"{path}:1: missing '# dim=<D> labeled=<0|1>' header")
    try:
        head = dict(item.split("=", 1) for item in lines[0][2:].split())
        dim = int(head["dim"])
        has_labels = bool(int(head["labeled"]))
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}:1: malformed header {lines[0]!r}") from exc
    expected = dim + (1 if has_labels else 0)
    rows, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != expected:
            raise DataError(f"{path}:{lineno}: expected {expected} fields, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts[:dim]])
            if has_labels:
                labels.append(int(parts[dim]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-numeric field") from exc
    if not rows:
        raise DataError(f"{path}: no data rows")
    matrix = EmbeddingMatrix(np.asarray(rows, dtype=np.float32))
    return matrix, (np.asarray(labels, dtype=np.int64) if has_labels else None)
