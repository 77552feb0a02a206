"""Slow, loop-based reference implementations used only by the tests."""

import math

import numpy as np


def knn_oracle(ref_vecs, ref_labels, query_vecs, k):
    preds = []
    for q in query_vecs:
        dists = sorted((math.dist(q, r), i) for i, r in enumerate(ref_vecs))[:k]
        votes, sums = {}, {}
        for d, i in dists:
            c = int(ref_labels[i])
            votes[c] = votes.get(c, 0) + 1
            sums[c] = sums.get(c, 0.0) + d
        top = max(votes.values())
        tied = [c for c in votes if votes[c] == top]
        preds.append(min(tied, key=lambda c: (sums[c], c)))
    return preds


def k_rule_oracle(object_ids, class_ids):
    per_class = {}
    for o, c in zip(object_ids, class_ids):
        objs, imgs = per_class.get(c, (set(), 0))
        objs.add(o)
        per_class[c] = (objs, imgs + 1)
    return min((len(objs), imgs) for objs, imgs in per_class.values())[1]


def recall_oracle(vecs, labels, ks):
    n = len(vecs)
    out = {}
    for K in ks:
        hits = 0
        for i in range(n):
            others = sorted((math.dist(vecs[i], vecs[j]), j) for j in range(n) if j != i)[:K]
            hits += any(labels[j] == labels[i] for _, j in others)
        out[K] = hits / n
    return out


def best_two_partition_inertia(X):
    n = len(X)
    best = math.inf
    for mask in range(1, 2 ** (n - 1)):
        a = np.array([(mask >> i) & 1 for i in range(n)])
        best = min(best, sum(float(((X[a == c] - X[a == c].mean(0)) ** 2).sum()) for c in (0, 1)))
    return best


def mixture_instance(seed, n=12):
    rng = np.random.default_rng([4, seed])
    lab = rng.integers(0, 2, n)
    centers = rng.normal(0, 2, (2, 2))
    return centers[lab] + rng.standard_normal((n, 2))
