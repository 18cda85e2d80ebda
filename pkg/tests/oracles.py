"""Independent scalar re-evaluations of the objectives (plain ``math``, no torch)."""

import math


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def info_nce(zq, zk, queue, tau):
    pos = math.exp(dot(zq, zk) / tau)
    neg = sum(math.exp(dot(zq, m) / tau) for m in queue)
    return -math.log(pos / (pos + neg))


def similarity_distribution(z, queue, tau):
    e = [math.exp(dot(z, m) / tau) for m in queue]
    s = sum(e)
    return [v / s for v in e]


def kd_loss(zq, zk, queue, tau_q, tau_k):
    p_t = similarity_distribution(zk, queue, tau_k)
    p_s = similarity_distribution(zq, queue, tau_q)
    return -sum(a * math.log(b) for a, b in zip(p_t, p_s))


def mask_loss(s, s_hat, mask):
    """``s``/``s_hat`` nested lists [T][V][C], ``mask`` [T][V] with 0 = hidden."""
    total, count = 0.0, 0
    for t, row in enumerate(mask):
        for v, keep in enumerate(row):
            if keep == 0:
                for c in range(len(s[t][v])):
                    total += (s[t][v][c] - s_hat[t][v][c]) ** 2
                    count += 1
    return total / count


def interval_iou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def brute_force_ap(proposals, ground_truth, threshold):
    """AP from the PR curve, re-matching every ranked prefix from scratch.

    ``proposals`` and ``ground_truth`` are ``(start, end)`` tuples; proposals
    are already ranked.
    """
    if not ground_truth:
        return 0.0

    def true_positives(k):
        used, tp = set(), 0
        for p in proposals[:k]:
            cands = [(interval_iou(p, g), j) for j, g in enumerate(ground_truth) if j not in used]
            cands = [c for c in cands if c[0] >= threshold]
            if cands:
                best = max(c[0] for c in cands)
                used.add(min(j for iou, j in cands if iou == best))
                tp += 1
        return tp

    ap, prev_recall = 0.0, 0.0
    for k in range(1, len(proposals) + 1):
        tp = true_positives(k)
        recall = tp / len(ground_truth)
        ap += (recall - prev_recall) * (tp / k)
        prev_recall = recall
    return ap
