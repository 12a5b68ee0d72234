"""Clustering accuracy under the optimal cluster-to-category assignment, the
All/Old/New and absent-category (S-t) breakdowns, and the run-level summary
metrics: maximum forgetting and final discovery accuracy.

One global assignment is computed per report and reused for every group
breakdown, so group scores are consistent with the overall score.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ConfigurationError


def clustering_accuracy(pred, truth):
    """Accuracy under the best injective map from predicted clusters to
    ground-truth categories (maximum-weight assignment on the confusion
    matrix). Returns (accuracy, {cluster id -> category id})."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ConfigurationError("pred and truth must be equal-length 1-D sequences")
    if len(pred) == 0:
        raise ConfigurationError("cannot score empty predictions")
    pred_ids = sorted(set(pred.tolist()))
    truth_ids = sorted(set(truth.tolist()))
    p_col = {c: j for j, c in enumerate(pred_ids)}
    t_col = {c: j for j, c in enumerate(truth_ids)}
    confusion = np.zeros((len(pred_ids), len(truth_ids)), dtype=np.int64)
    for p, t in zip(pred.tolist(), truth.tolist()):
        confusion[p_col[p], t_col[t]] += 1
    rows, cols = linear_sum_assignment(confusion, maximize=True)
    assignment = {pred_ids[r]: truth_ids[c] for r, c in zip(rows, cols)}
    correct = int(confusion[rows, cols].sum())
    return correct / len(pred), assignment


@dataclass(frozen=True)
class StageReport:
    """Per-stage evaluation summary. Group accuracies are None when the group
    has no evaluation samples; acc_stage0 tracks the initial categories for
    the forgetting metric."""

    stage: int
    acc_all: float | None
    acc_old: float | None
    acc_new: float | None
    acc_s: dict[int, float]
    acc_stage0: float | None
    estimated_category_count: int
    assignment: dict[int, int]
    flags: tuple[str, ...] = ()


def _group_accuracy(mask: np.ndarray, hits: np.ndarray) -> float | None:
    if not mask.any():
        return None
    return float(hits[mask].mean())


def stage_report(pred, truth, sample_stages, stage: int,
                 cats_labeled: set[int], cats_unlabeled: set[int],
                 history_cats: dict[int, set[int]],
                 estimated_category_count: int = 0,
                 flags: tuple[str, ...] = ()) -> StageReport:
    """Score one stage's evaluation pool (all stages' samples up to `stage`).

    `history_cats[t]` holds the categories present at stage t; S-t groups are
    that stage's samples whose categories are absent from the current stage.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    sample_stages = np.asarray(sample_stages)
    if not (pred.shape == truth.shape == sample_stages.shape):
        raise ConfigurationError("pred, truth, and sample stages must align")
    acc, assignment = clustering_accuracy(pred, truth)
    mapped = np.array([assignment.get(p, -1) for p in pred.tolist()])
    hits = mapped == truth

    current = sample_stages == stage
    present = cats_labeled | cats_unlabeled
    seen_before = set()
    for t, cats in history_cats.items():
        if t < stage:
            seen_before |= cats
    new_cats = cats_unlabeled - seen_before

    acc_all = _group_accuracy(current, hits) if cats_labeled else None
    acc_old = _group_accuracy(current & np.isin(truth, sorted(cats_labeled)), hits) if cats_labeled else None
    acc_new = _group_accuracy(current & np.isin(truth, sorted(new_cats)), hits) if new_cats else None

    acc_s: dict[int, float] = {}
    for t in sorted(history_cats):
        if t >= stage:
            continue
        absent = history_cats[t] - present
        if not absent:
            continue
        mask = (sample_stages == t) & np.isin(truth, sorted(absent))
        value = _group_accuracy(mask, hits)
        if value is not None:
            acc_s[t] = value

    stage0 = history_cats.get(0, set())
    mask0 = (sample_stages == 0) & np.isin(truth, sorted(stage0))
    acc_stage0 = _group_accuracy(mask0, hits)
    if stage == 0 and acc_all is not None:
        acc_stage0 = acc_all

    return StageReport(stage=stage, acc_all=acc_all, acc_old=acc_old, acc_new=acc_new,
                       acc_s=acc_s, acc_stage0=acc_stage0,
                       estimated_category_count=estimated_category_count,
                       assignment=assignment, flags=flags)


def max_forgetting(reports: list[StageReport]) -> float:
    """Largest drop of initial-category accuracy at any later stage."""
    if len(reports) < 2:
        raise ConfigurationError("max_forgetting needs at least two stage reports")
    base = reports[0].acc_stage0
    if base is None:
        raise ConfigurationError("stage-0 report lacks initial-category accuracy")
    drops = [base - r.acc_stage0 for r in reports[1:] if r.acc_stage0 is not None]
    if not drops:
        raise ConfigurationError("no later report carries initial-category accuracy")
    return float(max(drops))


def final_discovery(final_pred, all_truth) -> float:
    """Final-model clustering accuracy over the union evaluation split."""
    acc, _ = clustering_accuracy(final_pred, all_truth)
    return acc


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def report_to_lines(report: StageReport) -> list[str]:
    lines = [f"stage={report.stage}"]
    for key in ("acc_all", "acc_old", "acc_new"):
        value = getattr(report, key)
        if value is not None:
            lines.append(f"{key}={_fmt(value)}")
    for t in sorted(report.acc_s):
        lines.append(f"acc_s_{t}={_fmt(report.acc_s[t])}")
    if report.acc_stage0 is not None:
        lines.append(f"acc_stage0={_fmt(report.acc_stage0)}")
    lines.append(f"estimated_category_count={report.estimated_category_count}")
    pairs = ";".join(f"{p}:{t}" for p, t in sorted(report.assignment.items()))
    lines.append(f"assignment={pairs}")
    if report.flags:
        lines.append("flags=" + ",".join(report.flags))
    return lines


def reports_to_text(reports: list[StageReport]) -> str:
    blocks = ["\n".join(report_to_lines(r)) for r in reports]
    return ("\n---\n").join(blocks) + "\n"


def reports_to_csv(reports: list[StageReport], m_f: float | None, m_d: float | None) -> str:
    s_stages = sorted({t for r in reports for t in r.acc_s})
    header = ["stage", "all", "old", "new"] + [f"s-{t}" for t in s_stages] + ["m_f", "m_d"]
    rows = [",".join(header)]
    for i, r in enumerate(reports):
        last = i == len(reports) - 1
        cells = [str(r.stage), _fmt(r.acc_all), _fmt(r.acc_old), _fmt(r.acc_new)]
        cells += [_fmt(r.acc_s.get(t)) for t in s_stages]
        cells.append(_fmt(m_f) if last and m_f is not None else "")
        cells.append(_fmt(m_d) if last and m_d is not None else "")
        rows.append(",".join(cells))
    return "\n".join(rows) + "\n"
