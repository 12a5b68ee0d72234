"""Shared domain types: embedding matrices, the global category registry,
stage datasets, and run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

PROVENANCE_LABELED = "labeled"
PROVENANCE_DISCOVERED = "discovered"


class IgcdError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(IgcdError):
    """Invalid configuration, arguments, or usage."""


class DataError(IgcdError):
    """Malformed input data or files."""


class StateError(IgcdError):
    """Operation invoked on an object in an invalid state."""


class EmbeddingMatrix:
    """N x D dense feature vectors, the currency between all modules.

    Stored as a write-locked row-major float32 array. Entries must be finite,
    with n >= 1 and d >= 2.
    """

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 2:
            raise DataError(f"embedding matrix must be 2-D, got shape {arr.shape}")
        n, d = arr.shape
        if n < 1:
            raise DataError("embedding matrix needs at least one row")
        if d < 2:
            raise DataError(f"embedding dimension must be >= 2, got {d}")
        if not np.all(np.isfinite(arr)):
            raise DataError("embedding matrix contains non-finite values")
        arr.setflags(write=False)
        self.data = arr

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def rows(self, indices) -> np.ndarray:
        return self.data[np.asarray(indices, dtype=np.int64)]

    def __eq__(self, other) -> bool:
        return isinstance(other, EmbeddingMatrix) and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"EmbeddingMatrix(n={self.n}, d={self.d})"


class CategoryRegistry:
    """Issues dense, never-reused category ids across an entire run.

    Ids are global across stages; a discovered id can later be linked to a
    ground-truth id, but its integer value never changes.
    """

    def __init__(self) -> None:
        self.next_id: int = 0
        self.origin: dict[int, tuple[int, str]] = {}
        self.names: dict[int, str] = {}
        self.links: dict[int, int] = {}

    def register(self, count: int, provenance: str, stage: int) -> list[int]:
        if count < 1:
            raise ConfigurationError(f"category count must be >= 1, got {count}")
        if provenance not in (PROVENANCE_LABELED, PROVENANCE_DISCOVERED):
            raise ConfigurationError(f"unknown provenance {provenance!r}")
        ids = list(range(self.next_id, self.next_id + count))
        for cid in ids:
            self.origin[cid] = (stage, provenance)
        self.next_id += count
        return ids

    def link(self, discovered_id: int, truth_id: int) -> None:
        """Record that a discovered id refers to an existing ground-truth id."""
        if discovered_id not in self.origin:
            raise StateError(f"unknown category id {discovered_id}")
        if truth_id not in self.origin:
            raise StateError(f"unknown link target id {truth_id}")
        if self.origin[discovered_id][1] != PROVENANCE_DISCOVERED:
            raise StateError(f"category {discovered_id} is not a discovered id")
        self.links[discovered_id] = truth_id

    def resolve(self, category_id: int) -> int:
        """Follow the link table; unlinked ids resolve to themselves."""
        seen = set()
        while category_id in self.links and category_id not in seen:
            seen.add(category_id)
            category_id = self.links[category_id]
        return category_id

    def __contains__(self, category_id: int) -> bool:
        return 0 <= category_id < self.next_id


def register_categories(registry: CategoryRegistry, count: int, provenance: str, stage: int) -> list[int]:
    return registry.register(count, provenance, stage)


@dataclass(frozen=True)
class StageDataset:
    """One incremental stage: labeled (index, category) pairs, unlabeled
    indices, ground truth for the unlabeled part (evaluator-only), and an
    optional disjoint held-out evaluation split."""

    stage: int
    labeled: tuple[tuple[int, int], ...]
    unlabeled: tuple[int, ...]
    ground_truth: dict[int, int]
    heldout: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        lab = {i for i, _ in self.labeled}
        unlab = set(self.unlabeled)
        if lab & unlab:
            raise DataError(f"stage {self.stage}: labeled and unlabeled indices overlap")
        if set(self.ground_truth) != unlab:
            raise DataError(f"stage {self.stage}: ground truth must cover exactly the unlabeled indices")

    @property
    def labeled_categories(self) -> set[int]:
        return {c for _, c in self.labeled}

    @property
    def unlabeled_categories(self) -> set[int]:
        return set(self.ground_truth.values())

    def with_labeled(self, labeled: list[tuple[int, int]]) -> "StageDataset":
        return replace(self, labeled=tuple(labeled))

    def validate_against(self, registry: CategoryRegistry) -> None:
        for _, cid in self.labeled:
            if cid not in registry:
                raise DataError(f"stage {self.stage}: labeled category {cid} not registered")


@dataclass(frozen=True)
class RunConfig:
    """All knobs for one run. Temperatures must be positive; the weighting
    factors live in [0, 1]."""

    k_density: int = 10
    k_iou: int = 20
    iou_threshold: float = 0.6
    tau_snn: float = 0.1
    tau_u: float = 0.07
    tau_c: float = 0.07
    tau_sharp: float = 0.04
    lambda_rep: float = 0.35
    lambda_cls: float = 0.5
    epsilon: float = 2.0
    support_per_category: int = 5
    replay_per_category: int = 3
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs_initial: int = 100
    epochs_stage: int = 40
    aug_sigma: float = 0.05
    proj_dim: int = 16
    novelty_threshold: float = 0.7
    support_select: str = "density"
    replay_select: str = "density"
    seed: int = 0

    def validate(self) -> None:
        for name in ("tau_snn", "tau_u", "tau_c", "tau_sharp"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be strictly positive")
        if self.k_density < 1:
            raise ConfigurationError("k_density must be >= 1")
        if self.k_iou < 1:
            raise ConfigurationError("k_iou must be >= 1")
        if not 0 < self.iou_threshold <= 1:
            raise ConfigurationError("iou_threshold must be in (0, 1]")
        for name in ("lambda_rep", "lambda_cls"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1]")
        if self.support_per_category < 1:
            raise ConfigurationError("support_per_category must be >= 1")
        if self.replay_per_category < 0:
            raise ConfigurationError("replay_per_category must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.proj_dim < 2:
            raise ConfigurationError("proj_dim must be >= 2")
        for name in ("lr", "momentum", "weight_decay", "aug_sigma"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        for name in ("epochs_initial", "epochs_stage"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.support_select not in ("density", "random"):
            raise ConfigurationError("support_select must be 'density' or 'random'")
        if self.replay_select not in ("density", "centroid"):
            raise ConfigurationError("replay_select must be 'density' or 'centroid'")
        if not 0.0 < self.novelty_threshold < 1.0:
            raise ConfigurationError("novelty_threshold must be in (0, 1)")


def config_field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}
