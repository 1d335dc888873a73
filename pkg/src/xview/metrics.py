"""Detection metrics: greedy tIoU labelling, 101-point interpolated AUPRC, average tIoU."""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

THRESHOLDS = (0.3, 0.5, 0.7)
CLASSES = ("error", "correct")


@dataclass(frozen=True)
class ScoredPrediction:
    video_id: str
    t_st: float
    t_ed: float
    confidence: float
    label: str  # "error" or "correct"


@dataclass(frozen=True)
class GTSegment:
    video_id: str
    t_st: float
    t_ed: float
    label: str


def tiou(a: tuple[float, float], b: tuple[float, float]) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def label_predictions(
    preds: Sequence[ScoredPrediction],
    gts: Sequence[GTSegment],
    threshold: float,
    positive: str = "error",
) -> tuple[np.ndarray, np.ndarray, int]:
    """Greedy one-to-one TP/FP labelling in descending confidence order.

    Returns (scores, labels) in the order processed and the number of
    positive-class GT segments P. A prediction is a TP when its class is the
    positive class and it reaches ``threshold`` tIoU with a still-unmatched
    positive GT of the same video (the best such GT is consumed).
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    pos_gts: dict[str, list[GTSegment]] = {}
    for g in gts:
        if g.label == positive:
            pos_gts.setdefault(g.video_id, []).append(g)
    used: dict[str, list[bool]] = {v: [False] * len(gs) for v, gs in pos_gts.items()}
    scores = np.empty(len(preds))
    labels = np.zeros(len(preds), dtype=np.int64)
    for rank, i in enumerate(order):
        p = preds[i]
        scores[rank] = p.confidence
        if p.label != positive:
            continue
        best, best_j = -1.0, -1
        for j, g in enumerate(pos_gts.get(p.video_id, [])):
            if used[p.video_id][j]:
                continue
            iou = tiou((p.t_st, p.t_ed), (g.t_st, g.t_ed))
            if iou >= threshold and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            used[p.video_id][best_j] = True
            labels[rank] = 1
    n_pos = sum(len(v) for v in pos_gts.values())
    return scores, labels, n_pos


def auprc(scores: Sequence[float], labels: Sequence[int], n_pos: int) -> float:
    """Interpolated AP over 101 recall points (r = 0, 0.01, ..., 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_pos == 0:
        warnings.warn("no positive ground truth; AUPRC defined as 0", RuntimeWarning)
        return 0.0
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    y = labels[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    precision = tp / np.maximum(1, tp + fp)
    recall = tp / max(1, n_pos)
    for k in range(len(precision) - 2, -1, -1):
        precision[k] = max(precision[k], precision[k + 1])
    total = 0.0
    for j in range(101):
        r = j / 100
        hit = np.nonzero(recall >= r)[0]
        total += precision[hit[0]] if hit.size else 0.0
    return total / 101


def avg_tiou(preds: Sequence[ScoredPrediction], gts: Sequence[GTSegment], side: str = "gt") -> float | None:
    """Class-agnostic mean of best-match tIoU; ``side='gt'`` averages over GT segments."""
    by_video: dict[str, list[ScoredPrediction]] = {}
    for p in preds:
        by_video.setdefault(p.video_id, []).append(p)
    gts_by_video: dict[str, list[GTSegment]] = {}
    for g in gts:
        gts_by_video.setdefault(g.video_id, []).append(g)
    if side == "gt":
        if not gts:
            return None
        vals = [
            max((tiou((p.t_st, p.t_ed), (g.t_st, g.t_ed)) for p in by_video.get(g.video_id, [])), default=0.0)
            for g in gts
        ]
    elif side == "pred":
        if not preds:
            return None
        vals = [
            max((tiou((p.t_st, p.t_ed), (g.t_st, g.t_ed)) for g in gts_by_video.get(p.video_id, [])), default=0.0)
            for p in preds
        ]
    else:
        raise ValueError(f"unknown avg_tiou side {side!r}")
    return float(np.mean(vals))


@dataclass
class EvalReport:
    auprc: dict[str, dict[float, float]] = field(default_factory=dict)  # class -> threshold -> AP
    avg_tiou: float | None = None
    prevalence: dict[str, float] = field(default_factory=dict)

    def mean_auprc(self, cls: str = "error") -> float:
        return mean_auprc([self.auprc[cls][t] for t in THRESHOLDS])

    def to_text(self) -> str:
        lines = []
        for cls in self.auprc:
            for t in THRESHOLDS:
                lines.append(f"auprc.{cls}@{t}: {self.auprc[cls][t]:.6f}")
            lines.append(f"auprc.{cls}.mean: {self.mean_auprc(cls):.6f}")
        for cls, v in self.prevalence.items():
            lines.append(f"no_skill.{cls}: {v:.6f}")
        lines.append("avg_tiou: " + ("null" if self.avg_tiou is None else f"{self.avg_tiou:.6f}"))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "class", "auprc", "avg_tiou"])
        tiou_s = "" if self.avg_tiou is None else f"{self.avg_tiou:.6f}"
        for cls in self.auprc:
            for t in THRESHOLDS:
                w.writerow([t, cls, f"{self.auprc[cls][t]:.6f}", tiou_s])
            w.writerow(["mean", cls, f"{self.mean_auprc(cls):.6f}", tiou_s])
        return buf.getvalue()


def mean_auprc(values: Iterable[float]) -> float:
    values = list(values)
    return float(sum(values) / len(values))


def evaluate_predictions(
    preds_by_class: dict[str, Sequence[ScoredPrediction]],
    gts: Sequence[GTSegment],
    localization_preds: Sequence[ScoredPrediction],
    tiou_side: str = "gt",
) -> EvalReport:
    """AUPRC per class and threshold; ``preds_by_class`` holds class-specific confidences."""
    report = EvalReport()
    n_total = len(gts)
    for cls, preds in preds_by_class.items():
        report.auprc[cls] = {}
        for t in THRESHOLDS:
            scores, labels, n_pos = label_predictions(preds, gts, t, cls)
            report.auprc[cls][t] = auprc(scores, labels, n_pos) if n_pos else 0.0
        n_cls = sum(1 for g in gts if g.label == cls)
        report.prevalence[cls] = n_cls / n_total if n_total else 0.0
    report.avg_tiou = avg_tiou(localization_preds, gts, tiou_side)
    return report
