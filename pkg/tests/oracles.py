"""Slow, obviously-correct reference implementations used only by the tests."""

import itertools
import math

import numpy as np


def brute_force_assignment(cost):
    """Minimum total cost over every injective map of the smaller side into the larger.

    Totals are exactly rounded sums, so equal entry sets give bit-identical totals.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n <= m:
        return min(math.fsum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(math.fsum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def scalar_iou(a, b, bin=0.5):
    inter = union = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        pa, pb = x > bin, y > bin
        inter += pa and pb
        union += pa or pb
    return 1.0 if union == 0 else inter / union


def scalar_errors(a, b):
    a, b = np.ravel(a), np.ravel(b)
    sad = sq = 0.0
    for x, y in zip(a, b):
        sad += abs(float(x) - float(y))
        sq += (float(x) - float(y)) ** 2
    return sad, sq / len(a), sad / len(a)


def best_eval_matching(preds, gts, bin=0.5):
    """Brute-force maximum-total-IoU matching; returns (total IoU, pairs)."""
    ious = [[scalar_iou(p, g, bin) for g in gts] for p in preds]
    n, m = len(preds), len(gts)
    best, best_pairs = -1.0, []
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            pairs = [(i, perm[i]) for i in range(n)]
            total = sum(ious[i][j] for i, j in pairs)
            if total > best + 1e-12:
                best, best_pairs = total, pairs
    else:
        for perm in itertools.permutations(range(n), m):
            pairs = sorted((perm[j], j) for j in range(m))
            total = sum(ious[i][j] for i, j in pairs)
            if total > best + 1e-12:
                best, best_pairs = total, pairs
    return max(best, 0.0), [(i, j, ious[i][j]) for i, j in best_pairs]


def scalar_instance_metrics(images, th, bin=0.5):
    """Pooled ACC/REC/EMSE/EMAD given per-image (preds, gts, pairs) triples."""
    n_pred = n_gt = 0
    sq, ab = [], []
    for preds, gts, pairs in images:
        n_pred += len(preds)
        n_gt += len(gts)
        for i, j, iou in pairs:
            if iou > th:
                _, mse, mad = scalar_errors(preds[i], gts[j])
                sq.append(mse)
                ab.append(mad)
    n = len(sq)
    return {
        "ACC": n / n_pred if n_pred else None,
        "REC": n / n_gt if n_gt else None,
        "EMSE": sum(sq) / n if n else None,
        "EMAD": sum(ab) / n if n else None,
    }


def scalar_focal_bce(logits, targets, gamma=2.0):
    total = 0.0
    for z, t in zip(np.ravel(logits), np.ravel(targets)):
        p = 1 / (1 + math.exp(-float(z)))
        pt = p if t else 1 - p
        total += -((1 - pt) ** gamma) * math.log(pt)
    return total / np.size(logits)


def scalar_dice(prob, target, eps=1.0):
    p, t = np.ravel(prob).astype(float), np.ravel(target).astype(float)
    return 1 - (2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps)
