import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import normalized_mutual_info_score

from vispe import embedder, evalsuite, trainer
from vispe.evalsuite import EmbeddedSet

from conftest import unit_rows
from oracles import (best_two_partition_inertia, k_rule_oracle, knn_oracle, mixture_instance,
                     recall_oracle)


def eset(vecs, classes, objects=None, splits=None):
    n = len(vecs)
    objects = np.arange(n) if objects is None else np.asarray(objects)
    splits = np.array(["train"] * n) if splits is None else np.asarray(splits)
    return EmbeddedSet(np.asarray(vecs, dtype=np.float64), objects, np.asarray(classes), splits)


def test_knn_identical_query():
    rng = np.random.default_rng(0)
    ref = eset(unit_rows(rng, 6, 3), [0, 1, 2, 0, 1, 2])
    preds, acc, k = evalsuite.knn_classify(ref, eset(ref.vectors[[4]], [1]), k=1)
    assert preds[0] == 1 and acc == 1.0 and k == 1


def test_knn_hand_built():
    ref = eset([[0, 0], [0.1, 0], [0, 0.2], [5, 5], [5.1, 5], [9, 9]], [0, 0, 1, 1, 1, 2])
    q = eset([[0.05, 0.05], [4, 4], [8, 8]], [0, 1, 1])
    preds, acc, _ = evalsuite.knn_classify(ref, q, k=3)
    assert list(preds) == knn_oracle(ref.vectors, ref.class_ids, q.vectors, 3) == [0, 1, 1]
    assert abs(acc - 1.0) < 1e-15


def test_knn_vote_tie_goes_to_closer_class():
    ref = eset([[1.0, 0], [-2.0, 0]], [1, 0])
    assert evalsuite.knn_classify(ref, eset([[0.0, 0]], [0]), k=2)[0][0] == 1
    ref = eset([[1.0, 0], [-1.0, 0]], [1, 0])
    assert evalsuite.knn_classify(ref, eset([[0.0, 0]], [0]), k=2)[0][0] == 0


def test_knn_errors():
    ref = eset([[1.0, 0]], [0])
    with pytest.raises(ValueError):
        evalsuite.knn_classify(ref, ref, k=2)
    with pytest.raises(ValueError):
        evalsuite.knn_classify(eset(np.zeros((0, 2)), []), ref)


def test_k_rule():
    ref = eset(np.zeros((9, 2)), [0, 0, 0, 0, 1, 1, 1, 2, 2], objects=[0, 0, 1, 1, 2, 2, 3, 4, 4])
    # classes 1 and 2 have fewer objects; class 2 has one object with 2 images
    assert evalsuite.knn_k_rule(ref) == 2 == k_rule_oracle(ref.object_ids, ref.class_ids)
    assert evalsuite.REFERENCE_KNN_K == {"modelnet": 960, "shapenet": 468, "modelnet-s": 500}


@pytest.mark.parametrize("seed", range(20))
def test_knn_matches_oracle(seed):
    rng = np.random.default_rng([1, seed])
    n = int(rng.integers(5, 25))
    ref = eset(unit_rows(rng, n, 4), rng.integers(0, 3, n), objects=rng.integers(0, 6, n))
    q = eset(unit_rows(rng, 10, 4), rng.integers(0, 3, 10))
    k = k_rule_oracle(ref.object_ids, ref.class_ids)
    preds, acc, k_used = evalsuite.knn_classify(ref, q)
    assert k_used == k
    assert list(preds) == knn_oracle(ref.vectors, ref.class_ids, q.vectors, k)
    assert acc == np.mean(preds == q.class_ids)


def test_knn_rotation_invariant():
    rng = np.random.default_rng(5)
    ref = eset(unit_rows(rng, 30, 5), rng.integers(0, 4, 30))
    q = eset(unit_rows(rng, 15, 5), rng.integers(0, 4, 15))
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    a = evalsuite.knn_classify(ref, q, k=5)[0]
    b = evalsuite.knn_classify(eset(ref.vectors @ Q, ref.class_ids), eset(q.vectors @ Q, q.class_ids), k=5)[0]
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(20))
def test_recall_matches_oracle_and_is_monotone(seed):
    rng = np.random.default_rng([2, seed])
    items = eset(unit_rows(rng, 20, 3), rng.integers(0, 4, 20))
    r = evalsuite.recall_at_k(items)
    assert r == recall_oracle(items.vectors, items.class_ids, (1, 2, 4, 8))
    assert r[1] <= r[2] <= r[4] <= r[8]


def test_recall_tight_clusters():
    rng = np.random.default_rng(3)
    centers = 10 * np.eye(4)
    labels = np.repeat(np.arange(4), 5)
    items = eset(centers[labels] + 1e-3 * rng.standard_normal((20, 4)), labels)
    assert evalsuite.recall_at_k(items)[1] == 1.0


def test_recall_too_small():
    with pytest.raises(ValueError):
        evalsuite.recall_at_k(eset(np.zeros((8, 2)), np.zeros(8)))


def test_kmeans_every_point_own_cluster():
    X = np.random.default_rng(0).standard_normal((7, 3))
    assign, inertia = evalsuite.kmeans(X, 7, return_inertia=True)
    assert len(set(assign)) == 7 and inertia < 1e-12


def test_kmeans_two_blobs():
    rng = np.random.default_rng(1)
    lab = np.repeat([0, 1], 10)
    X = np.array([[0, 0], [20, 0]])[lab] + rng.standard_normal((20, 2))
    assert evalsuite.nmi(evalsuite.kmeans(X, 2, seed=3), lab) == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_kmeans_matches_exhaustive_oracle(seed):
    X = mixture_instance(seed)
    _, inertia = evalsuite.kmeans(X, 2, seed=seed, return_inertia=True)
    assert abs(inertia - best_two_partition_inertia(X)) <= 1e-9


def test_kmeans_inertia_nonincreasing():
    rng = np.random.default_rng(2)
    for s in range(20):
        trace = []
        evalsuite.kmeans(rng.standard_normal((40, 3)), 4, seed=s, inertia_trace=trace)
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_kmeans_deterministic():
    X = np.random.default_rng(4).standard_normal((30, 2))
    np.testing.assert_array_equal(evalsuite.kmeans(X, 3, seed=9), evalsuite.kmeans(X, 3, seed=9))


def test_nmi_hand_cases():
    assert evalsuite.nmi([2, 2, 0, 0, 1], [0, 0, 1, 1, 2]) == 1.0
    assert evalsuite.nmi([0, 0, 0, 0], [0, 0, 1, 1]) == 0.0
    assert evalsuite.nmi([0, 1, 0, 1], [0, 0, 1, 1]) == 0.0


@pytest.mark.parametrize("seed", range(20))
def test_nmi_matches_reference(seed):
    rng = np.random.default_rng([3, seed])
    n = int(rng.integers(2, 40))
    a, c = rng.integers(0, 4, n), rng.integers(0, 3, n)
    ref = normalized_mutual_info_score(c, a, average_method="arithmetic")
    assert abs(evalsuite.nmi(a, c) - ref) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=30), st.integers(0, 2**32 - 1))
def test_nmi_range_and_relabel_invariance(a, seed):
    rng = np.random.default_rng(seed)
    a = np.array(a)
    c = rng.integers(0, 3, len(a))
    v = evalsuite.nmi(a, c)
    assert 0.0 <= v <= 1.0
    perm = rng.permutation(5)
    assert abs(evalsuite.nmi(perm[a], c) - v) < 1e-12
    assert abs(evalsuite.nmi(c, a) - v) < 1e-12


def test_svm_separable():
    rng = np.random.default_rng(6)
    lab = np.repeat([0, 1], 20)
    X = np.array([[1.0, 0], [-1.0, 0]])[lab] + 0.1 * rng.standard_normal((40, 2))
    items = eset(X, lab)
    for k, acc in evalsuite.few_shot_eval(items, items, trials=3).items():
        assert acc == 1.0, k


def test_few_shot_single_class_warns():
    items = eset(np.random.default_rng(0).standard_normal((6, 2)), np.zeros(6, int))
    with pytest.warns(UserWarning):
        assert evalsuite.few_shot_eval(items, items) == {1: 1.0, 3: 1.0, 5: 1.0}


def test_few_shot_needs_enough_items():
    items = eset(np.random.default_rng(0).standard_normal((6, 2)), [0, 0, 0, 1, 1, 1])
    with pytest.raises(ValueError):
        evalsuite.few_shot_eval(items, items, k_shots=(3,))


def test_evaluate_report(default_parts):
    params = embedder.init(embedder.Arch(64, (128, 64), 32), 0)
    rep = evalsuite.evaluate(params, default_parts[2], "unseen", trials=2)
    d = rep.to_dict()
    assert {"knn_accuracy", "k_used", "recall_at", "nmi", "few_shot", "split", "config"} <= set(d)
    for v in [d["knn_accuracy"], d["nmi"], *d["recall_at"].values(), *d["few_shot"].values()]:
        assert 0.0 <= v <= 1.0
    json.dumps(d)


def test_export_round_trip(tmp_path, tiny_ds):
    params = embedder.init(embedder.Arch(tiny_ds.D, (8,), 5), 1)
    evalsuite.export_embeddings(params, tiny_ds, tmp_path / "emb")
    back = evalsuite.load_embeddings(tmp_path / "emb")
    mem = evalsuite.embed_dataset(params, tiny_ds)
    assert len(back) == tiny_ds.total_views
    np.testing.assert_array_equal(back.vectors, mem.vectors.astype(np.float32))
    np.testing.assert_array_equal(back.class_ids, mem.class_ids)
    assert np.all(np.abs(np.linalg.norm(back.vectors, axis=1) - 1) <= 1e-6)
    labels = json.loads((tmp_path / "emb" / "labels.json").read_text())
    assert sum(r["rows"] for r in labels) == tiny_ds.total_views


def test_few_shot_more_labels_help(default_parts):
    train, _, unseen = default_parts
    k1, k5 = [], []
    for seed in range(5):
        params, _ = trainer.train(trainer.TrainConfig.for_mode("vispe", seed=seed), train)
        items = evalsuite.embed_dataset(params, unseen)
        ref, qry = items.select(items.splits == "train"), items.select(items.splits != "train")
        r = evalsuite.few_shot_eval(ref, qry, k_shots=(1, 5), trials=10, seed=seed)
        k1.append(r[1])
        k5.append(r[5])
    assert np.mean(k5) >= np.mean(k1) - 0.02
