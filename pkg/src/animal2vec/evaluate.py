"""Per-event scoring: boundary extraction, IOU matching, PR curves and interpolated AP."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import MetricError
from .corpus import ClassTable, FrameTargets, LabelEvent


@dataclass(frozen=True)
class EventPrediction:
    class_id: int
    onset_s: float
    offset_s: float
    likelihood: float


@dataclass
class MatchResult:
    true_positives: list = field(default_factory=list)  # (prediction, truth, iou)
    false_positives: list = field(default_factory=list)
    false_negatives: list = field(default_factory=list)

    @property
    def tp_scores(self) -> list[float]:
        return [p.likelihood for p, _, _ in self.true_positives]

    @property
    def fp_scores(self) -> list[float]:
        return [p.likelihood for p in self.false_positives]

    @property
    def n_truth(self) -> int:
        return len(self.true_positives) + len(self.false_negatives)

    def extend(self, other: "MatchResult") -> "MatchResult":
        self.true_positives += other.true_positives
        self.false_positives += other.false_positives
        self.false_negatives += other.false_negatives
        return self


@dataclass
class PRCurve:
    points: list  # (threshold, precision, recall), thresholds descending
    ap: float
    n_truth: int = 0
    n_tp: int = 0
    n_fp: int = 0

    @property
    def n_fn(self) -> int:
        return self.n_truth - self.n_tp


# ---------------------------------------------------------------------------
# boundaries


def moving_average(x, width: int) -> np.ndarray:
    """Centered mean over ``width`` frames, renormalized where the window leaves the trace.

    Frame t averages frames [t - (width-1)//2, t + width//2].
    """
    x = np.asarray(x, dtype=np.float64)
    if width <= 1:
        return x.copy()
    T = len(x)
    csum = np.concatenate([[0.0], np.cumsum(x)])
    t = np.arange(T)
    lo = np.clip(t - (width - 1) // 2, 0, T)
    hi = np.clip(t + width // 2 + 1, 0, T)
    return (csum[hi] - csum[lo]) / (hi - lo)


def binary_runs(mask) -> list[tuple[int, int]]:
    """Maximal runs of True as (first, last) inclusive frame indices."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    edges = np.flatnonzero(np.diff(m.astype(np.int8)))
    return [(int(a), int(b) - 1) for a, b in zip(edges[::2], edges[1::2])]


def extract_events(likelihoods, frame_rate: float, pool_width_s: float = 0.1,
                   threshold: float = 0.5, time_offset_s: float = 0.0):
    """Pool, binarize (pooled >= threshold) and turn runs into (onset, offset, mean).

    The mean is over the raw likelihoods inside the run; ``time_offset_s`` shifts all
    times, e.g. to the model's frame-center offset.
    """
    raw = np.asarray(likelihoods, dtype=np.float64)
    width = max(1, int(round(pool_width_s * frame_rate)))
    pooled = moving_average(raw, width)
    events = []
    for a, b in binary_runs(pooled >= threshold):
        events.append((time_offset_s + a / frame_rate, time_offset_s + (b + 1) / frame_rate,
                       float(raw[a:b + 1].mean())))
    return events


def iou(a, b) -> float:
    inter = min(a[1], b[1]) - max(a[0], b[0])
    if inter <= 0:
        return 0.0
    union = max(a[1], b[1]) - min(a[0], b[0])
    return inter / union


def match_events(predictions: Sequence[EventPrediction], truth: Sequence[LabelEvent],
                 class_id: int, iou_min: float = 0.5) -> MatchResult:
    """Greedy one-to-one matching by descending IOU; pairs need IOU > iou_min."""
    preds = [p for p in predictions if p.class_id == class_id]
    gts = [t for t in truth if t.class_id == class_id]
    pairs = []
    for i, p in enumerate(preds):
        for j, t in enumerate(gts):
            v = iou((p.onset_s, p.offset_s), (t.onset_s, t.offset_s))
            if v > iou_min:
                pairs.append((-v, i, j))
    pairs.sort()
    used_p, used_t = set(), set()
    result = MatchResult()
    for neg, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        result.true_positives.append((preds[i], gts[j], -neg))
    result.false_positives = [p for i, p in enumerate(preds) if i not in used_p]
    result.false_negatives = [t for j, t in enumerate(gts) if j not in used_t]
    return result


# ---------------------------------------------------------------------------
# curves


def pr_curve(tp_scores, fp_scores, n_truth: int, n_levels: int = 101) -> PRCurve:
    """Precision/recall at every distinct final likelihood used as a threshold.

    A prediction counts at threshold θ when its likelihood is >= θ; a true positive that
    drops out becomes a false negative. The first point (θ = inf, no predictions) has
    precision 1 by convention and is ignored by :func:`average_precision`.
    """
    if n_truth <= 0:
        raise MetricError("no ground-truth events; average precision is undefined")
    tp = np.sort(np.asarray(tp_scores, dtype=np.float64))[::-1]
    fp = np.sort(np.asarray(fp_scores, dtype=np.float64))[::-1]
    if len(tp) > n_truth:
        raise MetricError(f"{len(tp)} true positives for {n_truth} ground-truth events")
    thresholds = np.unique(np.concatenate([tp, fp]))[::-1]
    points = [(math.inf, 1.0, 0.0)]
    # counts of scores >= θ via searchsorted on ascending copies
    tp_asc, fp_asc = tp[::-1], fp[::-1]
    for th in thresholds:
        n_tp = len(tp_asc) - np.searchsorted(tp_asc, th, side="left")
        n_fp = len(fp_asc) - np.searchsorted(fp_asc, th, side="left")
        points.append((float(th), n_tp / (n_tp + n_fp), n_tp / n_truth))
    curve = PRCurve(points, 0.0, n_truth, len(tp), len(fp))
    curve.ap = average_precision(curve, n_levels)
    return curve


def average_precision(curve: PRCurve, n_levels: int = 101) -> float:
    """Mean over evenly spaced recall levels of the best precision at recall >= level."""
    if n_levels < 2:
        raise ValueError("n_levels must be >= 2")
    pts = [(p, r) for th, p, r in curve.points if math.isfinite(th)]
    if not pts:
        return 0.0
    prec = np.array([p for p, _ in pts])
    rec = np.array([r for _, r in pts])
    order = np.argsort(rec)
    rec, prec = rec[order], prec[order]
    # running max from the right gives the interpolated precision envelope
    env = np.maximum.accumulate(prec[::-1])[::-1]
    levels = np.linspace(0.0, 1.0, n_levels)
    idx = np.searchsorted(rec, levels - 1e-12, side="left")
    interp = np.where(idx < len(rec), env[np.minimum(idx, len(rec) - 1)], 0.0)
    return float(interp.mean())


def aggregate(per_class: Mapping[int, MatchResult], table: ClassTable, n_levels: int = 101):
    """Micro curve over pooled non-focal events and the macro mean of non-focal APs.

    Classes without ground-truth events are left out of the macro mean.
    Returns (micro_curve, macro_ap, per_class_curves).
    """
    scored = [c for c in table.scored_classes if c in per_class]
    if not scored:
        raise MetricError("no non-focal class to aggregate")
    curves = {c: pr_curve(m.tp_scores, m.fp_scores, m.n_truth, n_levels)
              for c, m in per_class.items() if m.n_truth > 0}
    pooled = MatchResult()
    for c in scored:
        pooled.extend(MatchResult(list(per_class[c].true_positives),
                                  list(per_class[c].false_positives),
                                  list(per_class[c].false_negatives)))
    micro = pr_curve(pooled.tp_scores, pooled.fp_scores, pooled.n_truth, n_levels)
    macro_aps = [curves[c].ap for c in scored if c in curves]
    macro = float(np.mean(macro_aps)) if macro_aps else float("nan")
    return micro, macro, curves


def frame_binary_scores(likelihoods, truth_frames, threshold: float = 0.5):
    """Class-agnostic frame scoring: a frame is positive if any class is.

    Precision is 0 when nothing is predicted.
    """
    lik = np.asarray(likelihoods)
    truth = truth_frames.frames if isinstance(truth_frames, FrameTargets) else truth_frames
    truth = np.asarray(truth)
    if lik.shape != truth.shape:
        raise ValueError(f"likelihood shape {lik.shape} != truth shape {truth.shape}")
    pred = (lik > threshold).any(axis=1)
    true = (truth > 0.5).any(axis=1)
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


# ---------------------------------------------------------------------------
# clip-level pipeline


def predict_events(likelihoods, frame_rate: float, threshold: float = 0.5,
                   pool_width_s: float = 0.1, time_offset_s: float = 0.0,
                   classes: Sequence[int] | None = None) -> list[EventPrediction]:
    lik = np.asarray(likelihoods)
    classes = range(lik.shape[1]) if classes is None else classes
    out = []
    for c in classes:
        for on, off, mean in extract_events(lik[:, c], frame_rate, pool_width_s, threshold,
                                            time_offset_s):
            out.append(EventPrediction(c, on, off, mean))
    return out


def score_clips(likelihoods: Mapping[str, np.ndarray], truth: Mapping[str, Sequence[LabelEvent]],
                table: ClassTable, frame_rate: float, threshold: float = 0.5,
                pool_width_s: float = 0.1, time_offset_s: float = 0.0,
                iou_min: float = 0.5) -> dict[int, MatchResult]:
    """Extract, match and pool events of every clip, per class.

    Focal flags are expanded into events of the focal class when the table has one.
    """
    per_class = {c: MatchResult() for c in range(len(table))}
    for cid in sorted(likelihoods):
        events = list(truth.get(cid, []))
        if table.focal_index is not None:
            events += [LabelEvent(table.focal_index, e.onset_s, e.offset_s, True)
                       for e in events if e.focal and e.class_id != table.focal_index]
        preds = predict_events(likelihoods[cid], frame_rate, threshold, pool_width_s,
                               time_offset_s)
        for c in range(len(table)):
            per_class[c].extend(match_events(preds, events, c, iou_min))
    return per_class


def extraction_sweep_curve(likelihoods, truth, table: ClassTable, frame_rate: float,
                           thresholds=None, classes=None, **kw) -> PRCurve:
    """PR curve from re-running extraction at each binarization threshold.

    Pools the given classes (default: non-focal). Each threshold yields one point.
    """
    thresholds = np.linspace(0.05, 0.95, 19) if thresholds is None else thresholds
    classes = table.scored_classes if classes is None else classes
    points = [(math.inf, 1.0, 0.0)]
    n_truth = None
    for th in sorted(thresholds, reverse=True):
        per_class = score_clips(likelihoods, truth, table, frame_rate, threshold=th, **kw)
        tp = sum(len(per_class[c].true_positives) for c in classes)
        fp = sum(len(per_class[c].false_positives) for c in classes)
        n_truth = sum(per_class[c].n_truth for c in classes)
        if n_truth == 0:
            raise MetricError("no ground-truth events; average precision is undefined")
        if tp + fp:
            points.append((float(th), tp / (tp + fp), tp / n_truth))
    curve = PRCurve(points, 0.0, n_truth or 0)
    curve.ap = average_precision(curve)
    return curve


# ---------------------------------------------------------------------------
# reports


def metrics_csv(curves: Mapping[int, PRCurve], per_class: Mapping[int, MatchResult],
                table: ClassTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "ap", "n_truth", "n_tp", "n_fp", "n_fn"])
    for c in range(len(table)):
        m = per_class[c]
        ap = curves[c].ap if c in curves else float("nan")
        w.writerow([table.names[c], f"{ap:.6f}", m.n_truth, len(m.true_positives),
                    len(m.false_positives), len(m.false_negatives)])
    return buf.getvalue()


def pr_points_csv(curves: Mapping, table: ClassTable, micro: PRCurve | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "threshold", "precision", "recall"])
    items = [(table.names[c], curves[c]) for c in sorted(curves)]
    if micro is not None:
        items.append(("micro", micro))
    for name, curve in items:
        for th, p, r in curve.points:
            w.writerow([name, "inf" if math.isinf(th) else f"{th:.6f}", f"{p:.6f}", f"{r:.6f}"])
    return buf.getvalue()


def summary(micro: PRCurve, macro_ap: float, curves: Mapping[int, PRCurve],
            per_class: Mapping[int, MatchResult], table: ClassTable) -> dict:
    classes = []
    for c in range(len(table)):
        m = per_class[c]
        classes.append({"name": table.names[c],
                        "ap": curves[c].ap if c in curves else None,
                        "n_truth": m.n_truth, "n_tp": len(m.true_positives),
                        "n_fp": len(m.false_positives), "n_fn": len(m.false_negatives),
                        "focal": c == table.focal_index})
    return {"micro_ap": micro.ap, "macro_ap": macro_ap, "classes": classes}
