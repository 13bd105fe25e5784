"""Exhaustive reference implementations of the event metrics, written for clarity."""
from fractions import Fraction
import itertools
import math

import numpy as np

from animal2vec.corpus import LabelEvent
from animal2vec.evaluate import EventPrediction


def interval_iou(a, b):
    lo, hi = max(a[0], b[0]), min(a[1], b[1])
    if hi <= lo:
        return 0.0
    return (hi - lo) / (max(a[1], b[1]) - min(a[0], b[0]))


def brute_match(preds, truths, iou_min=0.5):
    """Best one-to-one assignment over all subsets of admissible pairs.

    Maximizes the number of pairs, then the summed IOU. Returns (tp pairs as index
    tuples, fp indices, fn indices).
    """
    cand = [(i, j, interval_iou((p.onset_s, p.offset_s), (t.onset_s, t.offset_s)))
            for i, p in enumerate(preds) for j, t in enumerate(truths)]
    cand = [c for c in cand if c[2] > iou_min]
    best, best_key = (), (-1, -1.0)
    for r in range(len(cand), -1, -1):
        if r < best_key[0]:
            break
        for combo in itertools.combinations(cand, r):
            if len({c[0] for c in combo}) < r or len({c[1] for c in combo}) < r:
                continue
            key = (r, sum(c[2] for c in combo))
            if key > best_key:
                best, best_key = combo, key
    used_p = {c[0] for c in best}
    used_t = {c[1] for c in best}
    return (sorted((c[0], c[1]) for c in best),
            [i for i in range(len(preds)) if i not in used_p],
            [j for j in range(len(truths)) if j not in used_t])


def brute_points(tp_scores, fp_scores, n_truth):
    pts = []
    for th in sorted(set(tp_scores) | set(fp_scores), reverse=True):
        n_tp = sum(1 for s in tp_scores if s >= th)
        n_fp = sum(1 for s in fp_scores if s >= th)
        pts.append((th, n_tp / (n_tp + n_fp), n_tp / n_truth, n_tp))
    return pts


def brute_ap(tp_scores, fp_scores, n_truth, n_levels=101):
    """Mean over levels i/(n-1) of max precision among points with recall >= level.

    Recall comparisons are exact in integers: n_tp/n_truth >= i/(n-1).
    """
    pts = brute_points(tp_scores, fp_scores, n_truth)
    total = 0.0
    for i in range(n_levels):
        level = Fraction(i, n_levels - 1)
        ok = [p for _, p, _, k in pts if Fraction(k, n_truth) >= level]
        total += max(ok) if ok else 0.0
    return total / n_levels


def random_intervals(rng, n, horizon=10.0):
    """n disjoint intervals inside [0, horizon]."""
    if n == 0:
        return []
    cuts = np.sort(rng.uniform(0, horizon, 2 * n))
    return [(float(cuts[2 * k]), float(cuts[2 * k + 1])) for k in range(n)
            if cuts[2 * k + 1] > cuts[2 * k]]


def random_instance(rng, max_events=20, n_classes=None):
    """Per-class disjoint truths and disjoint predictions, some jittered from the truths."""
    n_classes = n_classes or int(rng.integers(1, 4))
    while True:
        truths, preds = [], []
        budget = max_events
        for c in range(n_classes):
            nt = int(rng.integers(0, min(5, budget // 2) + 1))
            ts = random_intervals(rng, nt)
            budget -= len(ts)
            truths += [LabelEvent(c, a, b) for a, b in ts]
            ps = []
            for a, b in ts:
                if rng.random() < 0.6:
                    j = (b - a) * rng.uniform(-0.3, 0.3, 2)
                    ps.append((a + j[0], max(a + j[0] + 1e-3, b + j[1])))
            ps += random_intervals(rng, int(rng.integers(0, 3)))
            ps.sort()
            disjoint = []
            for a, b in ps:
                if not disjoint or a >= disjoint[-1][1]:
                    disjoint.append((a, b))
            disjoint = disjoint[:max(0, budget)]
            budget -= len(disjoint)
            for a, b in disjoint:
                score = round(float(rng.uniform(0, 1)), int(rng.integers(1, 4)))
                preds.append(EventPrediction(c, a, b, score))
        if truths:
            return truths, preds, n_classes
