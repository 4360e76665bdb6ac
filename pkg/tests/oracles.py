"""Slow, obviously-correct reference implementations used as test oracles.

Nothing here imports gazevlp; each function is written from the definition
with plain loops.
"""
import math

import numpy as np

BINARY_TABLE = {"BLANK": 0, "NEGATIVE": 0, "UNCERTAIN": 1, "POSITIVE": 1}


def positive_matrix(ids):
    b = len(ids)
    out = [[0.0] * b for _ in range(b)]
    for i in range(b):
        total = sum(1 for k in range(b) if ids[k] == ids[i])
        for j in range(b):
            if ids[j] == ids[i]:
                out[i][j] = 1.0 / total
    return np.array(out)


def js(p, q):
    total = 0.0
    for a, b in zip(p, q):
        m = (a + b) / 2
        if a > 0:
            total += 0.5 * a * math.log(a / m)
        if b > 0:
            total += 0.5 * b * math.log(b / m)
    return total


def auroc_pairwise(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def retrieval_at_k(sim, labels, k):
    """Brute-force P@K and hit-rate / fraction R@K; ties go to the lower index."""
    n = len(labels)
    precisions, hits, fractions = [], [], []
    for i in range(n):
        order = sorted(range(n), key=lambda j: (-sim[i][j], j))[:k]
        rel = [labels[j] == labels[i] for j in order]
        n_rel = sum(1 for j in range(n) if labels[j] == labels[i])
        precisions.append(sum(rel) / k)
        hits.append(1.0 if any(rel) else 0.0)
        fractions.append(sum(rel) / n_rel)
    return (sum(precisions) / n, sum(hits) / n, sum(fractions) / n)


def softmax(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max())
    return e / e.sum()


def contrastive(sim_scaled, p):
    """Mean over rows of the two-directional cross-entropy to target p."""
    b = len(p)
    total = 0.0
    for i in range(b):
        qi = softmax(sim_scaled[i])
        qr = softmax([sim_scaled[j][i] for j in range(b)])
        for j in range(b):
            if p[i][j] > 0:
                total -= p[i][j] * (math.log(qi[j]) + math.log(qr[j]))
    return total / (2 * b)


def focal(logits, labels, counts, beta, gamma, alpha):
    b, c = len(logits), len(logits[0])
    total = 0.0
    for i in range(b):
        for l in range(c):
            w = 1.0 if counts[l] == 0 else (1 - beta) / (1 - beta ** counts[l])
            p = 1 / (1 + math.exp(-logits[i][l]))
            pt = p if labels[i][l] else 1 - p
            at = alpha if labels[i][l] else 1 - alpha
            total += -w * at * (1 - pt) ** gamma * math.log(pt)
    return total / (b * c)
