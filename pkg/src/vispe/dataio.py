"""Synthetic multiview object datasets: generation, splitting, subsampling, storage.

Each object is a latent vector drawn around a class center.  A view of the
object is a smooth, angle-modulated nonlinear projection of that latent into
observation space, so the views of one object lie on a closed curve and the
objects of one class share structure.  Viewing angles are kept as metadata
only; nothing downstream is allowed to read them.
"""

from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
VIEWS_BIN = "views.bin"


class DatasetFormatError(ValueError):
    """A dataset directory is malformed or inconsistent."""


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 20
    seen_classes: int = 12
    objects_per_class: int = 15
    views_min: int = 6
    views_max: int = 12
    latent_dim: int = 16
    obs_dim: int = 64
    class_scale: float = 1.0
    object_spread: float = 1.0
    view_noise: float = 0.1
    view_gain: float = 1.0
    train_fraction: float = 0.6
    seed: int = 0

    def validate(self) -> None:
        if self.n_classes < 1 or self.objects_per_class < 1:
            raise ValueError("n_classes and objects_per_class must be >= 1")
        if not 0 < self.seen_classes < self.n_classes:
            raise ValueError("need 0 < seen_classes < n_classes")
        if not 1 <= self.views_min <= self.views_max:
            raise ValueError("need 1 <= views_min <= views_max")
        if self.latent_dim < 1 or self.obs_dim < 1:
            raise ValueError("dimensions must be >= 1")
        if min(self.class_scale, self.object_spread, self.view_noise, self.view_gain) < 0:
            raise ValueError("standard deviations must be nonnegative")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class ObjectRecord:
    object_id: int
    class_id: int
    views: np.ndarray  # (V_i, D) float32
    view_angles: np.ndarray  # (V_i,) float64, metadata only
    split: str = "train"

    @property
    def n_views(self) -> int:
        return int(self.views.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObjectRecord):
            return NotImplemented
        return (
            self.object_id == other.object_id
            and self.class_id == other.class_id
            and self.split == other.split
            and self.views.dtype == other.views.dtype
            and np.array_equal(self.views, other.views)
            and np.array_equal(self.view_angles, other.view_angles)
        )


@dataclass
class MultiviewDataset:
    objects: list[ObjectRecord]
    D: int
    seen_classes: frozenset[int]
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        self.seen_classes = frozenset(int(c) for c in self.seen_classes)

    def __len__(self) -> int:
        return len(self.objects)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultiviewDataset):
            return NotImplemented
        return (
            self.D == other.D
            and self.seen_classes == other.seen_classes
            and self.spec == other.spec
            and self.objects == other.objects
        )

    @property
    def view_counts(self) -> np.ndarray:
        return np.array([o.n_views for o in self.objects], dtype=np.int64)

    @property
    def total_views(self) -> int:
        return int(self.view_counts.sum())

    @property
    def class_ids(self) -> list[int]:
        return sorted({o.class_id for o in self.objects})

    def flat_views(self) -> tuple[np.ndarray, np.ndarray]:
        """All views stacked row-wise, plus the start offset of each object."""
        counts = self.view_counts
        offsets = np.zeros(len(counts), dtype=np.int64)
        np.cumsum(counts[:-1], out=offsets[1:])
        if not self.objects:
            return np.zeros((0, self.D), dtype=np.float32), offsets
        return np.concatenate([o.views for o in self.objects], axis=0), offsets

    def subset(self, keep) -> MultiviewDataset:
        return MultiviewDataset(
            objects=[o for o in self.objects if keep(o)],
            D=self.D,
            seen_classes=self.seen_classes,
            spec=self.spec,
        )


def _mixing_map(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xA11CE]))
    d = spec.latent_dim
    A = rng.normal(0.0, 1.0 / np.sqrt(3 * d), size=(spec.obs_dim, 3 * d))
    A[:, d:] *= spec.view_gain  # the angle-modulated blocks
    b = rng.normal(0.0, 0.5, size=spec.obs_dim)
    return A, b


def _class_centers(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xC1A55]))
    return rng.normal(0.0, spec.class_scale, size=(spec.n_classes, spec.latent_dim))


def _seen_class_ids(spec: SyntheticSpec) -> frozenset[int]:
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x5EE4]))
    return frozenset(int(c) for c in rng.permutation(spec.n_classes)[: spec.seen_classes])


def render_views(latent, angles, A, b) -> np.ndarray:
    """Noise-free observation of one latent at the given angles."""
    angles = np.asarray(angles, dtype=np.float64)
    s = np.sin(angles)[:, None] * latent[None, :]
    c = np.cos(angles)[:, None] * latent[None, :]
    feats = np.concatenate([np.broadcast_to(latent, s.shape), s, c], axis=1)
    return np.tanh(feats @ A.T + b)


def _generate_object(spec, object_id, class_id, center, A, b, split) -> ObjectRecord:
    # one stream per object: generation order and parallelism do not matter
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, object_id]))
    latent = center + spec.object_spread * rng.standard_normal(spec.latent_dim)
    n_views = int(rng.integers(spec.views_min, spec.views_max + 1))
    angles = rng.uniform(0.0, 2 * np.pi, size=n_views)
    x = render_views(latent, angles, A, b)
    x = x + spec.view_noise * rng.standard_normal(x.shape)
    return ObjectRecord(object_id, class_id, x.astype(np.float32), angles, split)


def generate(spec: SyntheticSpec) -> MultiviewDataset:
    """Draw a dataset deterministically from ``spec``.

    Objects are numbered class by class.  Within a class the first
    ``round(train_fraction * objects_per_class)`` objects are tagged
    ``train`` and the rest ``test``.
    """
    spec.validate()
    A, b = _mixing_map(spec)
    centers = _class_centers(spec)
    n_train = max(1, int(round(spec.train_fraction * spec.objects_per_class)))
    objects = []
    for c in range(spec.n_classes):
        for j in range(spec.objects_per_class):
            oid = c * spec.objects_per_class + j
            split = "train" if j < n_train else "test"
            objects.append(_generate_object(spec, oid, c, centers[c], A, b, split))
    return MultiviewDataset(objects, spec.obs_dim, _seen_class_ids(spec), asdict(spec))


def split_seen_unseen(ds: MultiviewDataset, seen_class_ids=None):
    """Partition into (seen train, seen test, unseen) datasets.

    Objects keep their original ids.  The unseen part holds every object of
    every unseen class, whatever its train/test tag.
    """
    seen = ds.seen_classes if seen_class_ids is None else frozenset(seen_class_ids)
    unknown = set(seen) - set(ds.class_ids)
    if unknown:
        raise ValueError(f"unknown class ids: {sorted(unknown)}")
    train = ds.subset(lambda o: o.class_id in seen and o.split == "train")
    seen_test = ds.subset(lambda o: o.class_id in seen and o.split != "train")
    unseen = ds.subset(lambda o: o.class_id not in seen)
    for part in (train, seen_test, unseen):
        part.seen_classes = seen
    return train, seen_test, unseen


def subsample(ds: MultiviewDataset, objects_per_class: int, views_per_object: int, seed: int):
    """Uniformly keep some objects per class and some views per object.

    Requests above what is available are clamped with a warning.
    """
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[ObjectRecord]] = {}
    for o in ds.objects:
        by_class.setdefault(o.class_id, []).append(o)
    clamped = False
    keep: list[ObjectRecord] = []
    for c in sorted(by_class):
        objs = by_class[c]
        n = min(objects_per_class, len(objs))
        clamped |= n < objects_per_class
        idx = np.sort(rng.choice(len(objs), size=n, replace=False))
        for i in idx:
            o = objs[i]
            v = min(views_per_object, o.n_views)
            clamped |= v < views_per_object
            vidx = np.sort(rng.choice(o.n_views, size=v, replace=False))
            keep.append(replace(o, views=o.views[vidx], view_angles=o.view_angles[vidx]))
    if clamped:
        warnings.warn("subsample request exceeds available objects or views; clamped")
    keep.sort(key=lambda o: o.object_id)
    return MultiviewDataset(keep, ds.D, ds.seen_classes, ds.spec)


def save(ds: MultiviewDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    for o in ds.objects:
        entries.append(
            {
                "object_id": o.object_id,
                "class_id": o.class_id,
                "split": o.split,
                "view_count": o.n_views,
                "angles": [float(a) for a in o.view_angles],
                "byte_offset": offset,
            }
        )
        offset += o.n_views * ds.D * 4
    manifest = {
        "format_version": FORMAT_VERSION,
        "D": ds.D,
        "seen_classes": sorted(ds.seen_classes),
        "spec": ds.spec,
        "objects": entries,
    }
    flat, _ = ds.flat_views()
    (path / VIEWS_BIN).write_bytes(np.ascontiguousarray(flat, dtype="<f4").tobytes())
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1))


def load(path) -> MultiviewDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"malformed manifest: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format_version {version!r}")
    try:
        D = int(manifest["D"])
        entries = manifest["objects"]
        seen = manifest["seen_classes"]
    except (KeyError, TypeError) as e:
        raise DatasetFormatError(f"malformed manifest: missing {e}") from e
    blob = (path / VIEWS_BIN).read_bytes()
    expected = sum(int(e["view_count"]) for e in entries) * D * 4
    if len(blob) != expected:
        raise DatasetFormatError(
            f"size mismatch: manifest implies {expected} bytes, views.bin has {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f4").astype(np.float32)
    objects = []
    for e in entries:
        start = int(e["byte_offset"]) // 4
        n = int(e["view_count"])
        if len(e["angles"]) != n:
            raise DatasetFormatError(f"object {e['object_id']}: angle count != view_count")
        views = flat[start : start + n * D].reshape(n, D).copy()
        objects.append(
            ObjectRecord(
                int(e["object_id"]),
                int(e["class_id"]),
                views,
                np.array(e["angles"], dtype=np.float64),
                e.get("split", "train"),
            )
        )
    return MultiviewDataset(objects, D, frozenset(seen), manifest.get("spec", {}))


def parse_spec_file(path) -> SyntheticSpec:
    """Read a ``key = value`` spec file; unknown keys are rejected."""
    fields = SyntheticSpec.__dataclass_fields__
    values = {}
    for key, raw in read_kv_file(path).items():
        if key not in fields:
            raise ValueError(f"unknown spec key {key!r}")
        kind = fields[key].type
        values[key] = float(raw) if kind == "float" else int(raw)
    spec = SyntheticSpec(**values)
    spec.validate()
    return spec


def read_kv_file(path) -> dict[str, str]:
    out = {}
    with open(os.fspath(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in out:
                raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value
    return out
