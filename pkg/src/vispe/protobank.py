"""Per-instance prototype views, their randomization schedule, and minibatch plans.

Instances are addressed by position in the training dataset's object list.
View indices are 0-based here (``0 .. V_i - 1``).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .dataio import MultiviewDataset


@dataclass
class PrototypeBank:
    view_index: np.ndarray  # (N,) int64
    threshold: float
    rng: np.random.Generator

    def state_dict(self) -> dict:
        return {
            "view_index": [int(v) for v in self.view_index],
            "threshold": self.threshold,
            "rng": self.rng.bit_generator.state,
        }

    @classmethod
    def from_state(cls, state: dict) -> PrototypeBank:
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng"]
        return cls(np.array(state["view_index"], dtype=np.int64), float(state["threshold"]), rng)


@dataclass
class MinibatchPlan:
    instance_ids: np.ndarray
    anchor_views: np.ndarray
    proto_views_1: np.ndarray
    proto_views_2: np.ndarray


def init_bank(ds: MultiviewDataset, t: float, seed: int) -> PrototypeBank:
    if not 0.0 <= t <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA4C]))
    counts = ds.view_counts
    return PrototypeBank(rng.integers(0, counts), float(t), rng)


def maybe_resample(bank: PrototypeBank, ds: MultiviewDataset) -> int:
    """Redraw each instance's prototype view with probability ``threshold``."""
    counts = ds.view_counts
    u = bank.rng.random(len(counts))
    fresh = bank.rng.integers(0, counts)
    hit = u < bank.threshold
    bank.view_index = np.where(hit, fresh, bank.view_index)
    return int(hit.sum())


def _draw_other(rng, counts, avoid):
    """A uniform view index per instance, different from ``avoid`` where possible."""
    single = counts == 1
    # draw from V_i - 1 slots and skip over the avoided one
    draw = rng.integers(0, np.maximum(counts - 1, 1))
    draw = draw + (draw >= avoid)
    return np.where(single, 0, draw)


def sample_minibatch(ds: MultiviewDataset, bank: PrototypeBank, m: int, rng: np.random.Generator,
                     instance_ids=None, exclude_anchor_proto: bool = False) -> MinibatchPlan:
    """Plan one minibatch.

    Without ``instance_ids``, ``m`` distinct instances are drawn uniformly.
    The first prototype set comes from the bank; the second is a fresh draw
    that differs from the first for every instance with at least two views.
    """
    counts_all = ds.view_counts
    if instance_ids is None:
        if m > len(counts_all):
            raise ValueError(f"minibatch of {m} exceeds {len(counts_all)} instances")
        instance_ids = rng.choice(len(counts_all), size=m, replace=False)
    ids = np.asarray(instance_ids, dtype=np.int64)
    counts = counts_all[ids]
    proto1 = bank.view_index[ids]
    proto2 = _draw_other(rng, counts, proto1)
    if exclude_anchor_proto:
        anchors = _draw_other(rng, counts, proto1)
    else:
        anchors = rng.integers(0, counts)
    return MinibatchPlan(ids, anchors, proto1, proto2)


def prototype_set_count(ds: MultiviewDataset, instance_subset) -> int:
    return math.prod(int(ds.objects[i].n_views) for i in instance_subset)


def enumerate_prototype_sets(ds: MultiviewDataset, instance_subset, cap: int = 10_000):
    """Yield every combination of one view index per instance in the subset."""
    count = prototype_set_count(ds, instance_subset)
    if count > cap:
        raise ValueError(f"{count} prototype sets exceed cap {cap}")
    ranges = [range(ds.objects[i].n_views) for i in instance_subset]
    return itertools.product(*ranges)
