"""Multi-stage orchestration: initial training, per-stage fine-tuning,
novel-category discovery, support-set extension, replay-buffer maintenance,
and the label-reveal transition between stages.

The support set stores projection-space snapshots taken when entries are
inserted; they are constants during training, so the classifier losses pull
current projections of each category toward where that category used to
live. Replay keeps old categories in the training stream, which is what
stops the projector from drifting away from those snapshots.

Training reads embeddings only through an access-audited view restricted to
the current stage's rows; earlier stages are reachable only via the support
set and the replay buffer. Evaluation reads the full matrix directly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    CategoryRegistry,
    ConfigurationError,
    DataError,
    EmbeddingMatrix,
    PROVENANCE_DISCOVERED,
    PROVENANCE_LABELED,
    RunConfig,
    StageDataset,
    StateError,
)
from .discovery import PeakSet, pseudo_label_peaks, select_peaks
from .evaluate import (StageReport, clustering_accuracy, final_discovery,
                       max_forgetting, stage_report)
from .losses import Batch, MODE_IGCD_L, MODE_IGCD_U, Projector, sgd_step, total_loss
from .neighbors import build_knn_graph
from .snn import (SupportSet, extend_support, predict_categories,
                  select_representative_indices)

MODES = (MODE_IGCD_L, MODE_IGCD_U)


class StageAccessError(StateError):
    """Training code touched embedding rows outside the current stage."""


class TrainingView:
    """Access-audited window onto the embedding matrix: only the wrapped
    stage's rows are readable, and every access is recorded."""

    def __init__(self, embeddings: EmbeddingMatrix, allowed, stage: int) -> None:
        self._data = embeddings.data
        self.allowed = frozenset(int(i) for i in allowed)
        self.stage = stage
        self.accessed: set[int] = set()

    def rows(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        bad = set(idx.tolist()) - self.allowed
        if bad:
            raise StageAccessError(
                f"stage {self.stage} training tried to read rows {sorted(bad)[:5]} "
                f"outside its dataset"
            )
        self.accessed.update(idx.tolist())
        return self._data[idx]


class ReplayBuffer:
    """Representative labeled exemplars carried across stages. Entries are
    never evicted; per-category growth is capped at insertion time."""

    def __init__(self, per_category_budget: int) -> None:
        self.per_category_budget = per_category_budget
        self.entries: list[tuple[np.ndarray, int, int]] = []

    def __len__(self) -> int:
        return len(self.entries)

    def category_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for _, cat, _ in self.entries:
            counts[cat] = counts.get(cat, 0) + 1
        return counts

    def room(self, category: int) -> int:
        if self.per_category_budget <= 0:
            return 0
        return self.per_category_budget - self.category_counts().get(category, 0)

    def add(self, vectors: np.ndarray, category: int, stage: int) -> int:
        take = min(len(vectors), self.room(category))
        for i in range(take):
            vec = np.array(vectors[i], dtype=np.float32)
            vec.setflags(write=False)
            self.entries.append((vec, int(category), int(stage)))
        return take

    def pool(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.entries:
            return np.empty((0, 0), dtype=np.float32), np.empty(0, dtype=np.int64)
        vecs = np.vstack([v for v, _, _ in self.entries])
        labels = np.array([c for _, c, _ in self.entries], dtype=np.int64)
        return vecs, labels


@dataclass(frozen=True)
class StageRecord:
    """Evaluator-side memory of one stage: category sets and held-out pool."""

    stage: int
    cats_labeled: frozenset[int]
    cats_unlabeled: frozenset[int]
    eval_indices: tuple[int, ...]
    eval_truth: tuple[int, ...]

    @property
    def categories(self) -> frozenset[int]:
        return self.cats_labeled | self.cats_unlabeled


@dataclass
class EngineState:
    embeddings: EmbeddingMatrix
    registry: CategoryRegistry
    projector: Projector
    velocity: np.ndarray
    support: SupportSet
    replay: ReplayBuffer
    stage: int
    rng_batch: np.random.Generator
    rng_aug: np.random.Generator
    rng_select: np.random.Generator
    history: list[StageRecord] = field(default_factory=list)
    last_flags: tuple[str, ...] = ()


def init_state(embeddings: EmbeddingMatrix, registry: CategoryRegistry, config: RunConfig) -> EngineState:
    config.validate()
    streams = {name: np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(i,)))
               for i, name in enumerate(("init", "batch", "aug", "select"))}
    projector = Projector.init(embeddings.d, config.proj_dim, streams["init"])
    return EngineState(
        embeddings=embeddings,
        registry=registry,
        projector=projector,
        velocity=np.zeros_like(projector.weights),
        support=SupportSet([], config.support_per_category),
        replay=ReplayBuffer(config.replay_per_category),
        stage=-1,
        rng_batch=streams["batch"],
        rng_aug=streams["aug"],
        rng_select=streams["select"],
    )


def _perturb(rows: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(rows, dtype=np.float64)
    if sigma > 0:
        x = x + sigma * rng.standard_normal(x.shape)
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    return x / norms


class _Cycler:
    """Reshuffling round-robin over a pool; wraps when exhausted."""

    def __init__(self, n: int, rng: np.random.Generator) -> None:
        self.n = n
        self.rng = rng
        self.perm: np.ndarray | None = None
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        if self.n == 0:
            return np.empty(0, dtype=np.int64)
        out = []
        while count > 0:
            if self.perm is None or self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.perm[self.pos:self.pos + min(count, self.n - self.pos)]
            out.append(chunk)
            self.pos += len(chunk)
            count -= len(chunk)
        return np.concatenate(out)


def _snapshot_entries(state: EngineState, config: RunConfig,
                      vectors: np.ndarray, samples, categories=None):
    """Support entries for the given (row, label) samples: raw embeddings
    plus projection-space snapshots, selected by density in projection space."""
    z = state.projector.project(vectors)
    use = samples if categories is None else [s for s in samples if s[1] in categories]
    picked = select_representative_indices(z, [(i, c) for i, c in use],
                                           config.support_per_category, config.k_density,
                                           mode=config.support_select, rng=state.rng_select)
    entries = [(vectors[i], c) for i, c in picked]
    proj = np.vstack([z[i] for i, _ in picked]) if picked else None
    return entries, proj


def _support_with_added(support: SupportSet, new_entries, new_proj) -> SupportSet:
    if not new_entries:
        return support
    if len(support):
        entries = support.entries() + new_entries
        proj = np.vstack([support.matrix, new_proj])
    else:
        entries, proj = new_entries, new_proj
    return SupportSet(entries, support.per_category_budget, projections=proj)


def _add_replay_from(state: EngineState, config: RunConfig, vectors: np.ndarray,
                     samples, stage: int) -> None:
    """Select replay exemplars per category in projection space under the
    current head; stores the raw embeddings."""
    if config.replay_per_category <= 0:
        return
    by_cat: dict[int, list[int]] = {}
    for i, c in samples:
        by_cat.setdefault(int(c), []).append(int(i))
    z = state.projector.project(vectors)
    mode = "centroid" if config.replay_select == "centroid" else "density"
    for cat in sorted(by_cat):
        room = state.replay.room(cat)
        if room <= 0:
            continue
        picked = select_representative_indices(z, [(i, cat) for i in by_cat[cat]],
                                               room, config.k_density, mode=mode)
        rows = np.array([i for i, _ in picked], dtype=np.int64)
        state.replay.add(vectors[rows], cat, stage)


def _training_loop(state: EngineState, config: RunConfig, mode: str,
                   labeled_vectors: np.ndarray, labeled_labels: np.ndarray,
                   unlabeled_vectors: np.ndarray, epochs: int,
                   refresh_support=None) -> list[str]:
    flags: list[str] = []
    n_l, n_u = len(labeled_labels), len(unlabeled_vectors)
    half = config.batch_size // 2 if n_u > 0 else config.batch_size
    if 0 < n_l < half:
        flags.append("labeled_sampled_with_replacement")
    if 0 < n_u < half:
        flags.append("unlabeled_sampled_with_replacement")
    steps_per_epoch = max(1, int(np.ceil(max(n_l, n_u, 1) / half)))
    total_steps = epochs * steps_per_epoch
    lab_cycler = _Cycler(n_l, state.rng_batch)
    unlab_cycler = _Cycler(n_u, state.rng_batch)
    step = 0
    for _ in range(epochs):
        if refresh_support is not None:
            refresh_support()
        for _ in range(steps_per_epoch):
            li = lab_cycler.take(half) if n_l else np.empty(0, dtype=np.int64)
            ui = unlab_cycler.take(half) if n_u else np.empty(0, dtype=np.int64)
            lv = labeled_vectors[li] if n_l else np.empty((0, state.embeddings.d))
            uv = unlabeled_vectors[ui] if n_u else np.empty((0, state.embeddings.d))
            batch = Batch(
                labeled_view_a=_perturb(lv, config.aug_sigma, state.rng_aug) if n_l else lv,
                labeled_view_b=_perturb(lv, config.aug_sigma, state.rng_aug) if n_l else lv,
                labels=labeled_labels[li] if n_l else np.empty(0, dtype=np.int64),
                unlabeled_view_a=_perturb(uv, config.aug_sigma, state.rng_aug) if n_u else uv,
                unlabeled_view_b=_perturb(uv, config.aug_sigma, state.rng_aug) if n_u else uv,
            )
            result = total_loss(batch, state.support, state.projector, config, mode)
            state.projector, state.velocity = sgd_step(
                state.projector, state.velocity, result.grad_weights, config, step, total_steps)
            step += 1
    return flags


def train_initial(state: EngineState, stage0: StageDataset, config: RunConfig) -> EngineState:
    """Supervised training on the fully labeled initial stage, then support
    and replay population."""
    if state.stage != -1:
        raise StateError("train_initial must run on a fresh state")
    if not stage0.labeled:
        raise ConfigurationError("the initial stage has no labeled data")
    if stage0.unlabeled:
        raise ConfigurationError("the initial stage must be labeled-only")
    stage0.validate_against(state.registry)

    view = TrainingView(state.embeddings, [i for i, _ in stage0.labeled], stage0.stage)
    rows = np.array([i for i, _ in stage0.labeled], dtype=np.int64)
    labels = np.array([c for _, c in stage0.labeled], dtype=np.int64)
    vectors = view.rows(rows)
    local_samples = list(enumerate(labels.tolist()))

    def refresh():
        entries, proj = _snapshot_entries(state, config, vectors, local_samples)
        state.support = SupportSet(entries, config.support_per_category, projections=proj)

    refresh()
    flags = _training_loop(state, config, MODE_IGCD_L, vectors, labels,
                           np.empty((0, state.embeddings.d)), config.epochs_initial,
                           refresh_support=refresh)
    refresh()
    _add_replay_from(state, config, vectors, local_samples, stage0.stage)

    eval_idx, eval_truth = _eval_pool(stage0)
    state.history.append(StageRecord(stage=stage0.stage,
                                     cats_labeled=frozenset(labels.tolist()),
                                     cats_unlabeled=frozenset(),
                                     eval_indices=eval_idx, eval_truth=eval_truth))
    state.stage = stage0.stage
    state.last_flags = tuple(flags)
    return state


def _eval_pool(stage: StageDataset) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if stage.heldout:
        items = sorted(stage.heldout.items())
    elif stage.unlabeled:
        items = sorted(stage.ground_truth.items())
    else:
        items = sorted(stage.labeled)
    return tuple(i for i, _ in items), tuple(c for _, c in items)


def _predict_rows(state: EngineState, config: RunConfig, rows) -> np.ndarray:
    z = state.projector.project(state.embeddings.rows(rows))
    raw = predict_categories(z, state.support, config.tau_snn)
    return np.array([state.registry.resolve(int(c)) for c in raw], dtype=np.int64)


def _history_report(state: EngineState, config: RunConfig, stage: int,
                    cats_labeled: set[int], cats_unlabeled: set[int],
                    estimated: int, flags: tuple[str, ...]) -> StageReport:
    idx = np.concatenate([np.array(r.eval_indices, dtype=np.int64) for r in state.history])
    truth = np.concatenate([np.array(r.eval_truth, dtype=np.int64) for r in state.history])
    stages = np.concatenate([np.full(len(r.eval_indices), r.stage, dtype=np.int64)
                             for r in state.history])
    pred = _predict_rows(state, config, idx)
    history_cats = {r.stage: set(r.categories) for r in state.history}
    return stage_report(pred, truth, stages, stage, cats_labeled, cats_unlabeled,
                        history_cats, estimated_category_count=estimated, flags=flags)


def stage_zero_report(state: EngineState, config: RunConfig) -> StageReport:
    record = state.history[0]
    return _history_report(state, config, record.stage, set(record.cats_labeled),
                           set(), 0, getattr(state, "last_flags", ()))


def _ensure_support_coverage(state: EngineState, config: RunConfig,
                             vectors: np.ndarray, samples) -> None:
    covered = set(state.support.category_ids)
    missing = sorted({c for _, c in samples} - covered)
    if not missing:
        return
    entries, proj = _snapshot_entries(state, config, vectors, samples,
                                      categories=set(missing))
    state.support = _support_with_added(state.support, entries, proj)


def _refresh_labeled_support(state: EngineState, config: RunConfig,
                             vectors: np.ndarray, samples) -> None:
    """Re-select support entries for every category with labeled data this
    stage, replacing that category's previous entries; other categories keep
    their snapshots."""
    refresh_cats = {c for _, c in samples}
    if not refresh_cats:
        return
    support = state.support
    keep = [i for i in range(len(support)) if int(support.labels[i]) not in refresh_cats]
    entries = [(support.raw_matrix[i], int(support.labels[i])) for i in keep]
    proj_rows = [support.matrix[i] for i in keep]
    new_entries, new_proj = _snapshot_entries(state, config, vectors, samples,
                                              categories=refresh_cats)
    entries.extend(new_entries)
    if new_proj is not None:
        proj_rows.extend(new_proj)
    proj = np.vstack(proj_rows) if proj_rows else None
    state.support = SupportSet(entries, support.per_category_budget, projections=proj)


def run_stage(state: EngineState, stage_t: StageDataset, config: RunConfig,
              mode: str = MODE_IGCD_L) -> tuple[EngineState, StageReport]:
    """Train on one incremental stage, discover novel categories in its
    unlabeled data, grow support and replay, and report."""
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}")
    if state.stage != stage_t.stage - 1:
        raise StateError(f"engine is at stage {state.stage}, cannot run stage {stage_t.stage}")
    if not stage_t.unlabeled:
        raise ConfigurationError(f"stage {stage_t.stage} has no unlabeled data")
    flags: list[str] = []

    labeled_pairs = list(stage_t.labeled)
    if mode == MODE_IGCD_U and labeled_pairs:
        flags.append("labeled_ignored_igcd_u")
        labeled_pairs = []
    allowed = [i for i, _ in labeled_pairs] + list(stage_t.unlabeled)
    view = TrainingView(state.embeddings, allowed, stage_t.stage)

    stage_rows = np.array([i for i, _ in labeled_pairs], dtype=np.int64)
    stage_labels = np.array([c for _, c in labeled_pairs], dtype=np.int64)
    stage_vectors = (view.rows(stage_rows) if len(stage_rows)
                     else np.empty((0, state.embeddings.d), dtype=np.float32))
    replay_vectors, replay_labels = state.replay.pool()
    # replay labels may be discovered ids later linked to revealed categories
    replay_labels = np.array([state.registry.resolve(int(c)) for c in replay_labels],
                             dtype=np.int64)
    if len(replay_labels):
        if len(stage_rows):
            pool_vectors = np.vstack([stage_vectors, replay_vectors])
            pool_labels = np.concatenate([stage_labels, replay_labels])
        else:
            pool_vectors, pool_labels = replay_vectors, replay_labels
    else:
        pool_vectors, pool_labels = stage_vectors, stage_labels

    if mode == MODE_IGCD_L and len(stage_labels):
        # categories with revealed labeled data get fresh support entries;
        # replay-only categories keep their snapshots (filled if missing)
        _refresh_labeled_support(state, config, stage_vectors,
                                 list(enumerate(stage_labels.tolist())))
    if len(pool_labels):
        _ensure_support_coverage(state, config, pool_vectors,
                                 list(enumerate(pool_labels.tolist())))

    unlabeled_rows = np.array(stage_t.unlabeled, dtype=np.int64)
    unlabeled_vectors = view.rows(unlabeled_rows)

    flags += _training_loop(state, config, mode, pool_vectors, pool_labels,
                            unlabeled_vectors, config.epochs_stage)

    # discovery on the projected unlabeled set; novelty decided in raw space,
    # where cluster separation does not depend on the state of the head
    z_u = state.projector.project(unlabeled_vectors)
    fresh: list[tuple[int, int]] = []
    estimated = 0
    if len(z_u) > config.k_density:
        z_matrix = EmbeddingMatrix(z_u)
        kept = select_peaks(z_matrix, config)
        raw = np.asarray(unlabeled_vectors, dtype=np.float64)
        raw = raw / np.maximum(np.linalg.norm(raw, axis=1, keepdims=True), 1e-12)
        raw_sims = raw @ state.support.raw_matrix.T if len(state.support) else None
        novel: list[tuple[int, float]] = []
        accepted_rows: list[np.ndarray] = []
        for i, dens in kept.peaks:
            if raw_sims is not None and float(raw_sims[i].max()) >= config.novelty_threshold:
                continue  # the peak re-finds a category the support already covers
            if any(float(raw[i] @ v) >= config.novelty_threshold for v in accepted_rows):
                continue  # duplicate peak of a cluster already accepted this stage
            novel.append((i, dens))
            accepted_rows.append(raw[i])
        kept_novel = PeakSet(peaks=tuple(novel))
        estimated = len(kept_novel)
        if len(kept_novel):
            graph = build_knn_graph(z_matrix, config.k_density)
            m = min(config.support_per_category - 1, graph.k)
            fresh = pseudo_label_peaks(kept_novel, graph, m, state.registry, stage_t.stage)
            state.support = extend_support(state.support, fresh, unlabeled_vectors,
                                           projections=z_u)
            fresh_map = dict(fresh)
            for peak, _ in kept_novel.peaks:
                state.replay.add(unlabeled_vectors[peak][None, :], fresh_map[peak], stage_t.stage)

    if mode == MODE_IGCD_L and len(stage_rows):
        _add_replay_from(state, config, stage_vectors,
                         list(enumerate(stage_labels.tolist())), stage_t.stage)

    cats_labeled = set(stage_labels.tolist())
    cats_unlabeled = set(stage_t.ground_truth.values())
    eval_idx, eval_truth = _eval_pool(stage_t)
    state.history.append(StageRecord(stage=stage_t.stage,
                                     cats_labeled=frozenset(cats_labeled),
                                     cats_unlabeled=frozenset(cats_unlabeled),
                                     eval_indices=eval_idx, eval_truth=eval_truth))
    state.stage = stage_t.stage
    report = _history_report(state, config, stage_t.stage, cats_labeled,
                             cats_unlabeled, estimated, tuple(flags))
    return state, report


def advance_stage_igcd_l(state: EngineState, stage_t: StageDataset,
                         config: RunConfig) -> list[tuple[int, int]]:
    """Reveal stage t's unlabeled ground truth as the next stage's labeled
    set, linking discovered ids to their matched ground-truth ids."""
    if not stage_t.unlabeled:
        return []
    missing = [i for i in stage_t.unlabeled if i not in stage_t.ground_truth]
    if missing:
        raise StateError(f"ground truth missing for indices {missing[:5]}")

    pred = _predict_rows(state, config, np.array(stage_t.unlabeled, dtype=np.int64))
    truth = np.array([stage_t.ground_truth[i] for i in stage_t.unlabeled], dtype=np.int64)
    _, assignment = clustering_accuracy(pred, truth)
    for pred_id, truth_id in sorted(assignment.items()):
        origin = state.registry.origin.get(pred_id)
        if (origin is not None and origin[1] == PROVENANCE_DISCOVERED
                and pred_id not in state.registry.links and pred_id != truth_id):
            state.registry.link(pred_id, truth_id)

    support = state.support
    relabeled = [(support.raw_matrix[i], support.matrix[i],
                  state.registry.resolve(int(support.labels[i])))
                 for i in range(len(support))]
    kept = _trim_to_budget(relabeled, support.per_category_budget)
    state.support = SupportSet([(r, c) for r, _, c in kept], support.per_category_budget,
                               projections=np.vstack([z for _, z, _ in kept]) if kept else None)
    return [(i, stage_t.ground_truth[i]) for i in stage_t.unlabeled]


def _trim_to_budget(triples, budget: int):
    """Keep at most `budget` (raw, projection, label) triples per category,
    in canonical order; merged categories lose their overflow."""
    triples = sorted(((np.asarray(r, dtype=np.float64), np.asarray(z, dtype=np.float64), int(c))
                      for r, z, c in triples),
                     key=lambda e: (e[2], e[0].tobytes()))
    kept, counts = [], {}
    for raw, proj, cat in triples:
        if counts.get(cat, 0) < budget:
            kept.append((raw, proj, cat))
            counts[cat] = counts.get(cat, 0) + 1
    return kept


def run_benchmark(embeddings: EmbeddingMatrix, stages: list[StageDataset],
                  registry: CategoryRegistry, config: RunConfig,
                  mode: str = MODE_IGCD_L):
    """Full pipeline: initial training, then every incremental stage.

    Returns (final state, [stage reports], M_f, M_d).
    """
    state = init_state(embeddings, registry, config)
    state = train_initial(state, stages[0], config)
    reports = [stage_zero_report(state, config)]
    for t in range(1, len(stages)):
        stage_t = stages[t]
        if mode == MODE_IGCD_L:
            labeled = advance_stage_igcd_l(state, stages[t - 1], config)
            stage_t = stage_t.with_labeled(labeled)
        state, report = run_stage(state, stage_t, config, mode)
        reports.append(report)
    m_f = None
    if len(reports) >= 2:
        m_f = max_forgetting(reports)
    idx = np.concatenate([np.array(r.eval_indices, dtype=np.int64) for r in state.history])
    truth = np.concatenate([np.array(r.eval_truth, dtype=np.int64) for r in state.history])
    m_d = final_discovery(_predict_rows(state, config, idx), truth)
    return state, reports, m_f, m_d


_CKPT_MAGIC = b"IGCDCKPT"


def _pack_section(name: str, payload: bytes) -> bytes:
    raw = name.encode("ascii")
    return struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload


def _rng_state_bytes(rng: np.random.Generator) -> bytes:
    st = rng.bit_generator.state
    return struct.pack("<B", 1) + st["state"]["state"].to_bytes(16, "little") + \
        st["state"]["inc"].to_bytes(16, "little") + \
        struct.pack("<IQ", st["has_uint32"], st["uinteger"])


def _rng_from_bytes(blob: bytes) -> np.random.Generator:
    if blob[0] != 1:
        raise DataError("unsupported rng state record")
    state = int.from_bytes(blob[1:17], "little")
    inc = int.from_bytes(blob[17:33], "little")
    has_uint32, uinteger = struct.unpack("<IQ", blob[33:45])
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {"bit_generator": "PCG64",
                               "state": {"state": state, "inc": inc},
                               "has_uint32": has_uint32, "uinteger": uinteger}
    return rng


def _matrix_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return struct.pack("<II", *arr.shape) + arr.tobytes()


def _matrix_from(blob: bytes, offset: int = 0):
    """Parse a matrix record; returns (array, bytes consumed)."""
    n, d = struct.unpack("<II", blob[offset:offset + 8])
    arr = np.frombuffer(blob, dtype=np.float64, count=n * d, offset=offset + 8).reshape(n, d).copy()
    return arr, 8 + 8 * n * d


def save_checkpoint(state: EngineState, config: RunConfig, path) -> None:
    sections: list[tuple[str, bytes]] = []
    sections.append(("meta", struct.pack("<iI", state.stage, state.registry.next_id)))
    sections.append(("proj", _matrix_bytes(state.projector.weights)))
    sections.append(("veloc", _matrix_bytes(state.velocity)))
    sup = state.support
    sections.append(("supp", struct.pack("<I", sup.per_category_budget) +
                     _matrix_bytes(sup.raw_matrix if len(sup) else np.empty((0, 0))) +
                     _matrix_bytes(sup.matrix if len(sup) else np.empty((0, 0))) +
                     np.asarray(sup.labels, dtype="<u4").tobytes()))
    rep_vec, rep_lab = state.replay.pool()
    rep_stage = np.array([s for _, _, s in state.replay.entries], dtype="<u4")
    sections.append(("repl", struct.pack("<I", state.replay.per_category_budget) +
                     _matrix_bytes(rep_vec if len(rep_lab) else np.empty((0, 0))) +
                     np.asarray(rep_lab, dtype="<u4").tobytes() + rep_stage.tobytes()))
    reg = state.registry
    reg_blob = struct.pack("<I", reg.next_id)
    for cid in range(reg.next_id):
        stage, prov = reg.origin[cid]
        link = reg.links.get(cid, 0xFFFFFFFF)
        reg_blob += struct.pack("<iBI", stage, 1 if prov == PROVENANCE_DISCOVERED else 0, link)
    sections.append(("regis", reg_blob))
    hist_blob = struct.pack("<I", len(state.history))
    for rec in state.history:
        for group in (sorted(rec.cats_labeled), sorted(rec.cats_unlabeled)):
            hist_blob += struct.pack("<I", len(group)) + np.asarray(group, dtype="<u4").tobytes()
        hist_blob += struct.pack("<iI", rec.stage, len(rec.eval_indices))
        hist_blob += np.asarray(rec.eval_indices, dtype="<u4").tobytes()
        hist_blob += np.asarray(rec.eval_truth, dtype="<u4").tobytes()
    sections.append(("hist", hist_blob))
    for name, rng in (("rngb", state.rng_batch), ("rnga", state.rng_aug), ("rngs", state.rng_select)):
        sections.append((name, _rng_state_bytes(rng)))
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", 1, len(sections)))
        for name, payload in sections:
            fh.write(_pack_section(name, payload))


def load_checkpoint(path, embeddings: EmbeddingMatrix, config: RunConfig) -> EngineState:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, n_sections = struct.unpack("<II", blob[8:16])
    if version != 1:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    sections: dict[str, bytes] = {}
    for _ in range(n_sections):
        (name_len,) = struct.unpack("<I", blob[pos:pos + 4])
        pos += 4
        name = blob[pos:pos + name_len].decode("ascii")
        pos += name_len
        (length,) = struct.unpack("<Q", blob[pos:pos + 8])
        pos += 8
        sections[name] = blob[pos:pos + length]
        pos += length

    stage, next_id = struct.unpack("<iI", sections["meta"])
    registry = CategoryRegistry()
    reg_blob = sections["regis"]
    (count,) = struct.unpack("<I", reg_blob[:4])
    off = 4
    links = {}
    for cid in range(count):
        st, disc, link = struct.unpack("<iBI", reg_blob[off:off + 9])
        off += 9
        registry.register(1, PROVENANCE_DISCOVERED if disc else PROVENANCE_LABELED, st)
        if link != 0xFFFFFFFF:
            links[cid] = link
    for cid, target in links.items():
        registry.link(cid, target)

    weights, _ = _matrix_from(sections["proj"])
    velocity, _ = _matrix_from(sections["veloc"])

    sup_blob = sections["supp"]
    (budget,) = struct.unpack("<I", sup_blob[:4])
    raw_matrix, used = _matrix_from(sup_blob, 4)
    proj_matrix, used2 = _matrix_from(sup_blob, 4 + used)
    n_rows = raw_matrix.shape[0]
    lab_off = 4 + used + used2
    labels = np.frombuffer(sup_blob, dtype="<u4", count=n_rows, offset=lab_off).astype(np.int64)
    support = (SupportSet(list(zip(raw_matrix, labels)), budget, projections=proj_matrix)
               if n_rows else SupportSet([], budget))

    rep_blob = sections["repl"]
    (rep_budget,) = struct.unpack("<I", rep_blob[:4])
    rep_matrix, used = _matrix_from(rep_blob, 4)
    n_rep = rep_matrix.shape[0]
    off = 4 + used
    rep_labels = np.frombuffer(rep_blob, dtype="<u4", count=n_rep, offset=off).astype(np.int64)
    rep_stages = np.frombuffer(rep_blob, dtype="<u4", count=n_rep, offset=off + 4 * n_rep)
    replay = ReplayBuffer(rep_budget)
    for i in range(n_rep):
        replay.entries.append((rep_matrix[i].astype(np.float32), int(rep_labels[i]), int(rep_stages[i])))

    hist_blob = sections["hist"]
    (n_hist,) = struct.unpack("<I", hist_blob[:4])
    off = 4
    history = []
    for _ in range(n_hist):
        groups = []
        for _ in range(2):
            (g,) = struct.unpack("<I", hist_blob[off:off + 4])
            off += 4
            groups.append(frozenset(np.frombuffer(hist_blob, dtype="<u4", count=g, offset=off).tolist()))
            off += 4 * g
        rec_stage, n_eval = struct.unpack("<iI", hist_blob[off:off + 8])
        off += 8
        idx = np.frombuffer(hist_blob, dtype="<u4", count=n_eval, offset=off)
        off += 4 * n_eval
        truth = np.frombuffer(hist_blob, dtype="<u4", count=n_eval, offset=off)
        off += 4 * n_eval
        history.append(StageRecord(stage=rec_stage, cats_labeled=groups[0],
                                   cats_unlabeled=groups[1],
                                   eval_indices=tuple(int(i) for i in idx),
                                   eval_truth=tuple(int(t) for t in truth)))

    state = EngineState(embeddings=embeddings, registry=registry,
                        projector=Projector(weights=weights), velocity=velocity,
                        support=support, replay=replay, stage=stage,
                        rng_batch=_rng_from_bytes(sections["rngb"]),
                        rng_aug=_rng_from_bytes(sections["rnga"]),
                        rng_select=_rng_from_bytes(sections["rngs"]),
                        history=history)
    return state
