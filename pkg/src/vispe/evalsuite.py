"""Open-set evaluation of learned embeddings.

Distances are always computed in float64; on unit vectors squared Euclidean
distance is ``2 - 2 cos``, so neighbour order is the cosine order.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataio, embedder
from .dataio import MultiviewDataset, ObjectRecord

log = logging.getLogger(__name__)

RECALL_KS = (1, 2, 4, 8)
FEW_SHOT_KS = (1, 3, 5)

# k for KNN on the original benchmarks (ModelNet, ShapeNet, ModelNet-S).
# Reference only; synthetic runs apply the same rule to their own data.
REFERENCE_KNN_K = {"modelnet": 960, "shapenet": 468, "modelnet-s": 500}


@dataclass
class EmbeddedSet:
    vectors: np.ndarray
    object_ids: np.ndarray
    class_ids: np.ndarray
    splits: np.ndarray

    def __len__(self) -> int:
        return len(self.vectors)

    def select(self, mask) -> EmbeddedSet:
        mask = np.asarray(mask)
        return EmbeddedSet(self.vectors[mask], self.object_ids[mask], self.class_ids[mask], self.splits[mask])


@dataclass
class EvalReport:
    knn_accuracy: float
    k_used: int
    recall_at: dict[int, float]
    nmi: float
    few_shot: dict[int, float]
    split: str = "unseen"
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["knn_accuracy_" + self.split] = self.knn_accuracy
        d["recall_at"] = {str(k): v for k, v in self.recall_at.items()}
        d["few_shot"] = {str(k): v for k, v in self.few_shot.items()}
        return d


def embed_dataset(params: embedder.EmbedderParams, ds: MultiviewDataset) -> EmbeddedSet:
    flat, _ = ds.flat_views()
    counts = ds.view_counts
    rep = lambda values: np.repeat(np.asarray(values), counts)  # noqa: E731
    return EmbeddedSet(
        embedder.embed_batch(params, flat),
        rep([o.object_id for o in ds.objects]),
        rep([o.class_id for o in ds.objects]),
        rep([o.split for o in ds.objects]),
    )


def sq_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def knn_k_rule(reference: EmbeddedSet) -> int:
    """Image count of the class with the fewest objects (smallest such count on ties)."""
    best = None
    for c in np.unique(reference.class_ids):
        mask = reference.class_ids == c
        key = (len(np.unique(reference.object_ids[mask])), int(mask.sum()))
        best = key if best is None or key < best else best
    return best[1]


def knn_classify(reference: EmbeddedSet, queries: EmbeddedSet, k: int | None = None):
    """Majority vote among the ``k`` nearest references.

    Vote ties go to the class whose voters have the smaller summed distance,
    then to the smaller class id.  Returns ``(predictions, accuracy, k)``.
    """
    if len(reference) == 0:
        raise ValueError("empty reference set")
    if k is None:
        k = knn_k_rule(reference)
    if not 1 <= k <= len(reference):
        raise ValueError(f"k={k} outside [1, {len(reference)}]")
    d = np.sqrt(sq_distances(queries.vectors, reference.vectors))
    classes = np.unique(reference.class_ids)
    ref_cls = np.searchsorted(classes, reference.class_ids)
    preds = np.empty(len(queries), dtype=reference.class_ids.dtype)
    for q in range(len(queries)):
        # stable sort: equidistant references resolve by index
        nn = np.argsort(d[q], kind="stable")[:k]
        votes = np.bincount(ref_cls[nn], minlength=len(classes))
        dist = np.bincount(ref_cls[nn], weights=d[q, nn], minlength=len(classes))
        tied = np.flatnonzero(votes == votes.max())
        winner = tied[np.lexsort((classes[tied], dist[tied]))[0]]
        preds[q] = classes[winner]
    acc = float(np.mean(preds == queries.class_ids)) if len(queries) else 0.0
    return preds, acc, k


def recall_at_k(items: EmbeddedSet, ks=RECALL_KS) -> dict[int, float]:
    """Fraction of items with a same-class item among their K nearest others."""
    ks = tuple(sorted(ks))
    n = len(items)
    if n < ks[-1] + 1:
        raise ValueError(f"need at least {ks[-1] + 1} items, got {n}")
    d = sq_distances(items.vectors, items.vectors)
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, : ks[-1]]
    same = items.class_ids[order] == items.class_ids[:, None]
    first_hit = np.where(same.any(axis=1), same.argmax(axis=1), ks[-1])
    return {k: float(np.mean(first_hit < k)) for k in ks}


def _kmeans_pp(X, n_clusters, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, n_clusters):
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _lloyd(X, centers, max_iter, tol):
    n_clusters = len(centers)
    trace = []
    for _ in range(max_iter):
        d = sq_distances(X, centers)
        assign = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(len(X)), assign].sum()))
        empty = np.flatnonzero(np.bincount(assign, minlength=n_clusters) == 0)
        if len(empty):
            point_d = d[np.arange(len(X)), assign]
            for c in empty:
                far = int(np.argmax(point_d))
                assign[far] = c
                point_d[far] = -np.inf
        new = np.array([X[assign == c].mean(axis=0) for c in range(n_clusters)])
        shift = float(np.max(np.sqrt(np.sum((new - centers) ** 2, axis=1))))
        centers = new
        if shift < tol:
            break
    d = sq_distances(X, centers)
    assign = np.argmin(d, axis=1)
    return assign, float(d[np.arange(len(X)), assign].sum()), trace


def kmeans(X, n_clusters: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6,
           return_inertia: bool = False, inertia_trace: list | None = None, n_init: int = 10):
    """Lloyd's algorithm with k-means++ seeding, best of ``n_init`` restarts.

    An emptied cluster is re-seeded with the point farthest from its
    current centroid.  ``inertia_trace`` receives the per-iteration inertia
    of the returned run.
    """
    X = np.asarray(X.vectors if isinstance(X, EmbeddedSet) else X, dtype=np.float64)
    if not 1 <= n_clusters <= len(X):
        raise ValueError(f"n_clusters={n_clusters} outside [1, {len(X)}]")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _lloyd(X, _kmeans_pp(X, n_clusters, rng), max_iter, tol)
        if best is None or run[1] < best[1]:
            best = run
    assign, inertia, trace = best
    if inertia_trace is not None:
        inertia_trace.extend(trace)
    return (assign, inertia) if return_inertia else assign


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(assignments, labels) -> float:
    """``2 I(A; C) / (H(A) + H(C))`` in nats."""
    a = np.unique(np.asarray(assignments), return_inverse=True)[1]
    c = np.unique(np.asarray(labels), return_inverse=True)[1]
    if a.shape != c.shape:
        raise ValueError("assignments and labels differ in length")
    if len(a) == 0:
        return 0.0
    table = np.zeros((a.max() + 1, c.max() + 1))
    np.add.at(table, (a, c), 1.0)
    # identical partitions up to relabelling: exactly one nonzero per row and column
    if table.shape[0] == table.shape[1] and np.all((table > 0).sum(0) == 1) and np.all((table > 0).sum(1) == 1):
        return 1.0
    ha, hc = _entropy(table.sum(1)), _entropy(table.sum(0))
    if ha == 0.0 or hc == 0.0:
        return 0.0
    n = len(a)
    pij = table / n
    outer = np.outer(table.sum(1), table.sum(0)) / (n * n)
    nz = pij > 0
    mi = float(np.sum(pij[nz] * np.log(pij[nz] / outer[nz])))
    return float(min(max(2.0 * mi / (ha + hc), 0.0), 1.0))


def train_linear_svm(X, y, n_classes: int, lam: float = 1e-3, steps: int = 1000, lr0: float = 0.1):
    """One-vs-rest linear max-margin classifiers by subgradient descent.

    Objective per class: ``lam/2 |w|^2 + mean(hinge(y * (w.x + b)))``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.where(np.arange(n_classes)[None, :] == np.asarray(y)[:, None], 1.0, -1.0)
    W = np.zeros((n_classes, X.shape[1]))
    b = np.zeros(n_classes)
    n = len(X)
    for step in range(1, steps + 1):
        margin = Y * (X @ W.T + b)
        viol = (margin < 1.0) * Y
        gW = lam * W - viol.T @ X / n
        gb = -viol.sum(0) / n
        lr = lr0 / np.sqrt(step)
        W -= lr * gW
        b -= lr * gb
    return W, b


def few_shot_eval(labelled: EmbeddedSet, test: EmbeddedSet, k_shots=FEW_SHOT_KS, trials: int = 10,
                  seed: int = 0, lam: float = 1e-3, steps: int = 1000) -> dict[int, float]:
    """Mean test accuracy of a linear probe trained on ``k`` labelled items per class."""
    classes = np.unique(labelled.class_ids)
    if len(classes) == 1:
        warnings.warn("few-shot probe on a single class is trivially correct")
        return {k: 1.0 for k in k_shots}
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(labelled.class_ids == c) for c in classes]
    out = {}
    for k in k_shots:
        if min(len(ix) for ix in by_class) <= k:
            raise ValueError(f"every class needs more than {k} labelled items")
        accs = []
        for _ in range(trials):
            pick = np.concatenate([rng.choice(ix, size=k, replace=False) for ix in by_class])
            y = np.searchsorted(classes, labelled.class_ids[pick])
            W, b = train_linear_svm(labelled.vectors[pick], y, len(classes), lam, steps)
            pred = classes[np.argmax(test.vectors @ W.T + b, axis=1)]
            accs.append(float(np.mean(pred == test.class_ids)))
        out[k] = float(np.mean(accs))
    return out


def evaluate(params: embedder.EmbedderParams, part: MultiviewDataset, split: str = "unseen",
             seed: int = 0, trials: int = 10, knn_k: int | None = None) -> EvalReport:
    """Full protocol on one class partition.

    Train-tagged objects are the KNN reference and the few-shot labelled
    pool; test-tagged objects are the queries.  Recall and NMI use every
    view in the partition.
    """
    items = embed_dataset(params, part)
    ref = items.select(items.splits == "train")
    qry = items.select(items.splits != "train")
    _, acc, k = knn_classify(ref, qry, knn_k)
    n_classes = len(np.unique(items.class_ids))
    assign = kmeans(items.vectors, n_classes, seed)
    return EvalReport(
        knn_accuracy=acc,
        k_used=k,
        recall_at=recall_at_k(items),
        nmi=nmi(assign, items.class_ids),
        few_shot=few_shot_eval(ref, qry, trials=trials, seed=seed),
        split=split,
        config={"seed": seed, "trials": trials, "svm_lambda": 1e-3, "svm_steps": 1000,
                "svm_lr0": 0.1, "kmeans_clusters": n_classes, "kmeans_restarts": 10},
    )


def knn_accuracy(params, part: MultiviewDataset, k: int | None = None) -> float:
    items = embed_dataset(params, part)
    return knn_classify(items.select(items.splits == "train"), items.select(items.splits != "train"), k)[1]


def export_embeddings(params: embedder.EmbedderParams, ds: MultiviewDataset, path) -> None:
    """Write view embeddings in the dataset directory format (D = embedding size)."""
    objects = []
    for o in ds.objects:
        vecs = embedder.embed_batch(params, o.views).astype(np.float32)
        objects.append(ObjectRecord(o.object_id, o.class_id, vecs, o.view_angles, o.split))
    out = MultiviewDataset(objects, params.arch.embed_dim, ds.seen_classes,
                           {"source_spec": ds.spec, "kind": "embeddings"})
    dataio.save(out, path)
    labels = [{"object_id": o.object_id, "class_id": o.class_id, "split": o.split,
               "seen": o.class_id in ds.seen_classes, "rows": o.n_views} for o in ds.objects]
    (Path(path) / "labels.json").write_text(json.dumps(labels, indent=1))


def load_embeddings(path) -> EmbeddedSet:
    ds = dataio.load(path)
    flat, _ = ds.flat_views()
    counts = ds.view_counts
    return EmbeddedSet(
        flat,
        np.repeat([o.object_id for o in ds.objects], counts),
        np.repeat([o.class_id for o in ds.objects], counts),
        np.repeat([o.split for o in ds.objects], counts),
    )
