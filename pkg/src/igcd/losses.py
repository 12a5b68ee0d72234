"""The training loss stack over a linear projection head, with analytic
gradients throughout.

Losses are evaluated on projected, renormalized embeddings z = Wt h / |Wt h|.
The unlabeled consistency loss distills a sharp soft target from one view
into the other; targets are treated as constants (no gradient flows through
them), so callers that need finite-difference agreement can pin the targets
of one evaluation and re-evaluate under perturbed weights.

Batch reductions sort their terms before summing, which makes every loss
value exactly invariant to sample order within the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError, IgcdError, RunConfig
from .snn import SupportSet, snn_predict_batch

MODE_IGCD_L = "igcd_l"
MODE_IGCD_U = "igcd_u"

_TINY = 1e-300


class DegenerateBatchError(IgcdError):
    """A batch that cannot support the requested loss (e.g. no positive pairs)."""


def _osum(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Order-canonical sum: sorting first makes the result a function of the
    multiset of terms only."""
    return np.sort(values, axis=axis).sum(axis=axis)


def _omean(values: np.ndarray, axis: int = -1) -> np.ndarray:
    return _osum(values, axis=axis) / values.shape[axis]


@dataclass(frozen=True)
class Projector:
    """Linear head with output normalization: z = normalize(Wt h)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] < 2:
            raise ConfigurationError("projector weights must be D x D' with D' >= 2")
        if not np.all(np.isfinite(w)):
            raise ConfigurationError("projector weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    def project(self, rows: np.ndarray) -> np.ndarray:
        v = np.asarray(rows, dtype=np.float64) @ self.weights
        norms = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
        return v / norms

    @staticmethod
    def init(in_dim: int, out_dim: int, rng: np.random.Generator) -> "Projector":
        w = rng.normal(size=(in_dim, out_dim)) / np.sqrt(in_dim)
        return Projector(weights=w)


def _project_forward(projector: Projector, rows: np.ndarray):
    h = np.asarray(rows, dtype=np.float64)
    v = h @ projector.weights
    norms = np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    z = v / norms
    return z, (h, z, norms)


def _project_backward(cache, grad_z: np.ndarray) -> np.ndarray:
    """Chain dL/dz back to dL/dW through the row normalization."""
    h, z, norms = cache
    grad_v = (grad_z - z * (z * grad_z).sum(axis=1, keepdims=True)) / norms
    return h.T @ grad_v


@dataclass(frozen=True)
class Batch:
    """Two index-aligned views of a labeled half-batch and an unlabeled
    half-batch; row i of view a and view b is the same sample."""

    labeled_view_a: np.ndarray
    labeled_view_b: np.ndarray
    labels: np.ndarray
    unlabeled_view_a: np.ndarray
    unlabeled_view_b: np.ndarray

    def __post_init__(self):
        if self.labeled_view_a.shape != self.labeled_view_b.shape:
            raise ConfigurationError("labeled views must be index-aligned")
        if self.unlabeled_view_a.shape != self.unlabeled_view_b.shape:
            raise ConfigurationError("unlabeled views must be index-aligned")
        if len(self.labels) != self.labeled_view_a.shape[0]:
            raise ConfigurationError("labels must align with the labeled views")

    @property
    def n_labeled(self) -> int:
        return self.labeled_view_a.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.unlabeled_view_a.shape[0]

    @staticmethod
    def empty_labeled(dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        e = np.empty((0, dim))
        return e, e.copy(), np.empty(0, dtype=np.int64)


def selfcon_loss(z_a: np.ndarray, z_b: np.ndarray, tau_u: float):
    """Cross-view InfoNCE: the positive of row i in view a is row i of view b,
    the candidate pool is every view-b row. Returns (loss, grad_a, grad_b)."""
    if tau_u <= 0:
        raise ConfigurationError("tau_u must be strictly positive")
    n = z_a.shape[0]
    if n < 2:
        raise ConfigurationError("selfcon needs a batch of at least 2")
    logits = (z_a @ z_b.T) / tau_u
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    lse = m[:, 0] + np.log(_osum(e, axis=1))
    per_anchor = lse - np.diag(logits)
    loss = float(_omean(per_anchor, axis=0))
    beta = e / e.sum(axis=1, keepdims=True)
    grad_a = (beta @ z_b - z_b) / (n * tau_u)
    grad_b = (beta.T @ z_a - z_a) / (n * tau_u)
    return loss, grad_a, grad_b


def supcon_loss(z_a: np.ndarray, z_b: np.ndarray, labels: np.ndarray, tau_c: float):
    """Supervised contrastive loss: anchors in view a, positives are view-b
    rows of other same-label samples, candidates are all view-b rows except
    the anchor's own. Anchors without positives are skipped and counted.

    Returns (loss, grad_a, grad_b, skipped_count).
    """
    if tau_c <= 0:
        raise ConfigurationError("tau_c must be strictly positive")
    n = z_a.shape[0]
    lab = np.asarray(labels)
    same = lab[:, None] == lab[None, :]
    np.fill_diagonal(same, False)
    m_sizes = same.sum(axis=1)
    part = m_sizes > 0
    n_part = int(part.sum())
    skipped = n - n_part
    if n_part == 0:
        raise DegenerateBatchError("no sample in the batch has a same-label partner")

    logits = (z_a @ z_b.T) / tau_c
    neg_mask = ~np.eye(n, dtype=bool)
    masked = np.where(neg_mask, logits, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    e = np.where(neg_mask, np.exp(masked - m), 0.0)
    lse = m[:, 0] + np.log(_osum(e, axis=1))
    pos_mean = np.zeros(n)
    pos_mean[part] = np.array([
        _omean(logits[i, same[i]], axis=0) for i in np.flatnonzero(part)
    ])
    per_anchor = np.where(part, lse - pos_mean, 0.0)
    loss = float(_osum(per_anchor[part], axis=0) / n_part)

    alpha = e / e.sum(axis=1, keepdims=True)
    p_mat = np.where(same, 1.0, 0.0)
    p_mat[part] /= m_sizes[part, None]
    alpha[~part] = 0.0
    p_mat[~part] = 0.0
    grad_a = (alpha - p_mat) @ z_b / (n_part * tau_c)
    grad_b = (alpha - p_mat).T @ z_a / (n_part * tau_c)
    return loss, grad_a, grad_b, skipped


def _snn_query_grad(queries: np.ndarray, support: SupportSet, tau: float,
                    weights: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Chain dL/dp back to the query vectors through the support softmax."""
    gy = grad_p @ support._onehot.T
    gbar = (weights * gy).sum(axis=1, keepdims=True)
    return (weights * (gy - gbar)) @ support.matrix / tau


def _snn_forward(queries: np.ndarray, support: SupportSet, tau: float):
    logits = (np.asarray(queries, dtype=np.float64) @ support.matrix.T) / tau
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ support._onehot, w


@dataclass(frozen=True)
class ClassifierLossResult:
    l_l: float
    l_u: float
    entropy: float
    grad_labeled_a: np.ndarray
    grad_unlabeled_a: np.ndarray
    targets: np.ndarray | None
    flags: tuple[str, ...]


def classifier_losses(batch: Batch, support: SupportSet, config: RunConfig,
                      targets: np.ndarray | None = None) -> ClassifierLossResult:
    """Supervised and consistency cross-entropy through the SNN classifier.

    The consistency target is the sharpened prediction of view b (temperature
    tau_sharp), gradient-blocked; pass `targets` to pin it across evaluations.
    The entropy of the mean batch prediction is subtracted with weight epsilon.
    """
    if len(support) == 0:
        raise ConfigurationError("classifier losses need a non-empty support set")
    flags: list[str] = []
    cat_col = {c: j for j, c in enumerate(support.category_ids)}

    n_l = batch.n_labeled
    grad_labeled = np.zeros_like(np.asarray(batch.labeled_view_a, dtype=np.float64))
    l_l = 0.0
    if n_l == 0:
        flags.append("no_labeled")
    else:
        p, w = _snn_forward(batch.labeled_view_a, support, config.tau_snn)
        t = np.zeros_like(p)
        for i, c in enumerate(np.asarray(batch.labels)):
            j = cat_col.get(int(c))
            if j is None:
                raise ConfigurationError(f"label {int(c)} has no support entries")
            t[i, j] = 1.0
        ce = -(t * np.log(np.maximum(p, _TINY))).sum(axis=1)
        l_l = float(_omean(ce, axis=0))
        grad_p = -(t / np.maximum(p, _TINY)) / n_l
        grad_labeled = _snn_query_grad(batch.labeled_view_a, support, config.tau_snn, w, grad_p)

    n_u = batch.n_unlabeled
    grad_unlabeled = np.zeros_like(np.asarray(batch.unlabeled_view_a, dtype=np.float64))
    l_u = 0.0
    entropy = 0.0
    used_targets = targets
    if n_u == 0:
        flags.append("no_unlabeled")
    else:
        p_hat, w_hat = _snn_forward(batch.unlabeled_view_a, support, config.tau_snn)
        if used_targets is None:
            used_targets, _ = _snn_forward(batch.unlabeled_view_b, support, config.tau_sharp)
        p_tilde = used_targets
        ce = -(p_tilde * np.log(np.maximum(p_hat, _TINY))).sum(axis=1)
        ce_mean = float(_omean(ce, axis=0))
        stacked = np.vstack([p_tilde, p_hat])
        p_bar = _osum(stacked, axis=0) / (2 * n_u)
        entropy = float(-(p_bar * np.log(np.maximum(p_bar, _TINY))).sum())
        l_u = ce_mean - config.epsilon * entropy
        grad_p = -(p_tilde / np.maximum(p_hat, _TINY)) / n_u
        grad_p = grad_p + (config.epsilon / (2 * n_u)) * (np.log(np.maximum(p_bar, _TINY)) + 1.0)
        grad_unlabeled = _snn_query_grad(batch.unlabeled_view_a, support, config.tau_snn, w_hat, grad_p)

    return ClassifierLossResult(l_l=l_l, l_u=l_u, entropy=entropy,
                                grad_labeled_a=grad_labeled,
                                grad_unlabeled_a=grad_unlabeled,
                                targets=used_targets, flags=tuple(flags))


@dataclass(frozen=True)
class TotalLossResult:
    loss: float
    grad_weights: np.ndarray
    supcon: float
    selfcon: float
    l_l: float
    l_u: float
    entropy: float
    targets: np.ndarray | None
    skipped_supcon: int
    flags: tuple[str, ...]


def total_loss(batch: Batch, support: SupportSet, projector: Projector,
               config: RunConfig, mode: str = MODE_IGCD_L,
               targets: np.ndarray | None = None) -> TotalLossResult:
    """Weighted sum of the representation and classifier losses, with the
    analytic gradient of everything with respect to the projector weights.

    In igcd_u mode the supervised terms are dropped and the remaining two
    terms enter with unit weight.
    """
    if mode not in (MODE_IGCD_L, MODE_IGCD_U):
        raise ConfigurationError(f"unknown mode {mode!r}")
    supervised = mode == MODE_IGCD_L
    w_sup = config.lambda_rep if supervised else 0.0
    w_self = (1.0 - config.lambda_rep) if supervised else 1.0
    w_ll = config.lambda_cls if supervised else 0.0
    w_lu = (1.0 - config.lambda_cls) if supervised else 1.0

    n_l, n_u = batch.n_labeled, batch.n_unlabeled
    use_labeled = supervised and n_l > 0
    flags: list[str] = []
    if supervised and n_l == 0:
        flags.append("no_labeled")
    if n_u == 0:
        flags.append("no_unlabeled")

    grad_w = np.zeros_like(projector.weights)
    parts = {"supcon": 0.0, "selfcon": 0.0, "l_l": 0.0, "l_u": 0.0, "entropy": 0.0}
    skipped = 0
    used_targets = targets
    total = 0.0

    caches = {}
    z = {}
    if use_labeled:
        z["la"], caches["la"] = _project_forward(projector, batch.labeled_view_a)
        z["lb"], caches["lb"] = _project_forward(projector, batch.labeled_view_b)
    if n_u > 0:
        z["ua"], caches["ua"] = _project_forward(projector, batch.unlabeled_view_a)
        z["ub"], caches["ub"] = _project_forward(projector, batch.unlabeled_view_b)

    grad_z = {key: np.zeros_like(val) for key, val in z.items()}

    if use_labeled and w_sup > 0.0:
        sup, ga, gb, skipped = supcon_loss(z["la"], z["lb"], np.asarray(batch.labels), config.tau_c)
        parts["supcon"] = sup
        total += w_sup * sup
        grad_z["la"] += w_sup * ga
        grad_z["lb"] += w_sup * gb
    if n_u > 0 and w_self > 0.0:
        selfc, ga, gb = selfcon_loss(z["ua"], z["ub"], config.tau_u)
        parts["selfcon"] = selfc
        total += w_self * selfc
        grad_z["ua"] += w_self * ga
        grad_z["ub"] += w_self * gb

    if (use_labeled and w_ll > 0.0) or (n_u > 0 and w_lu > 0.0):
        dim = projector.out_dim
        la = z["la"] if use_labeled else np.empty((0, dim))
        lb = z["lb"] if use_labeled else np.empty((0, dim))
        labels = np.asarray(batch.labels) if use_labeled else np.empty(0, dtype=np.int64)
        ua = z["ua"] if n_u > 0 else np.empty((0, dim))
        ub = z["ub"] if n_u > 0 else np.empty((0, dim))
        projected = Batch(labeled_view_a=la, labeled_view_b=lb, labels=labels,
                          unlabeled_view_a=ua, unlabeled_view_b=ub)
        cls = classifier_losses(projected, support, config, targets=used_targets)
        used_targets = cls.targets
        parts["l_l"], parts["l_u"], parts["entropy"] = cls.l_l, cls.l_u, cls.entropy
        if use_labeled and w_ll > 0.0:
            total += w_ll * cls.l_l
            grad_z["la"] += w_ll * cls.grad_labeled_a
        if n_u > 0 and w_lu > 0.0:
            total += w_lu * cls.l_u
            grad_z["ua"] += w_lu * cls.grad_unlabeled_a

    for key in ("la", "lb", "ua", "ub"):
        if key in grad_z:
            grad_w += _project_backward(caches[key], grad_z[key])

    return TotalLossResult(loss=float(total), grad_weights=grad_w,
                           supcon=parts["supcon"], selfcon=parts["selfcon"],
                           l_l=parts["l_l"], l_u=parts["l_u"], entropy=parts["entropy"],
                           targets=used_targets, skipped_supcon=skipped, flags=tuple(flags))


def cosine_lr(lr0: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return lr0
    frac = min(max(step, 0), total_steps) / total_steps
    return lr0 * 0.5 * (1.0 + np.cos(np.pi * frac))


def sgd_step(projector: Projector, velocity: np.ndarray, grad: np.ndarray,
             config: RunConfig, step: int, total_steps: int):
    """Momentum SGD with decoupled weight decay under a cosine learning-rate
    schedule. Returns (new projector, new velocity)."""
    for name in ("lr", "momentum", "weight_decay"):
        if getattr(config, name) < 0:
            raise ConfigurationError(f"{name} must be nonnegative")
    lr = cosine_lr(config.lr, step, total_steps)
    velocity = config.momentum * velocity + grad
    weights = projector.weights - lr * (velocity + config.weight_decay * projector.weights)
    return Projector(weights=weights), velocity
