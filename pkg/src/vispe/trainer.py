"""Plain-SGD training for prototype embeddings and the baseline objectives."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import embedder, losses
from .dataio import MultiviewDataset, read_kv_file
from .embedder import Arch, EmbedderParams, NumericError
from .protobank import PrototypeBank, _draw_other, init_bank, maybe_resample, sample_minibatch

log = logging.getLogger(__name__)

MODES = ("instance", "pe", "mvspe", "vispe", "triplet", "supervised")
PROTOTYPE_MODES = ("pe", "mvspe", "vispe")
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A training configuration violates a mode invariant or cannot be parsed."""


@dataclass
class TrainConfig:
    mode: str = "vispe"
    tau: float = 0.05
    alpha: float = 5.0
    t: float = 0.5
    m: int = 32
    lr: float = 0.05
    epochs: int = 100
    seed: int = 0
    stop_grad_protos: bool = False
    resample_granularity: str = "epoch"
    exclude_anchor_proto: bool = False
    symmetric_kl: bool = False
    margin: float = 1.0
    hidden_dims: tuple = (128, 64)
    embed_dim: int = 32

    def check_ranges(self) -> None:
        """Mode-independent sanity checks; ``train`` relies on these only."""
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if not 0.0 <= self.t <= 1.0:
            raise ConfigError("t must lie in [0, 1]")
        if self.m < 1 or self.epochs < 0 or self.lr < 0:
            raise ConfigError("m must be >= 1, epochs and lr nonnegative")
        if self.resample_granularity not in ("epoch", "iteration"):
            raise ConfigError("resample_granularity must be 'epoch' or 'iteration'")

    def validate(self) -> None:
        self.check_ranges()
        if self.mode == "pe" and (self.t != 0.0 or self.alpha != 0.0):
            raise ConfigError(
                f"mode pe keeps prototypes fixed and has no consistency term; "
                f"got t={self.t}, alpha={self.alpha} (both must be 0)"
            )
        if self.mode == "mvspe" and self.alpha != 0.0:
            raise ConfigError(f"mode mvspe has no consistency term; got alpha={self.alpha}")
        if self.mode == "vispe" and self.alpha <= 0.0:
            raise ConfigError("mode vispe needs alpha > 0")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> TrainConfig:
        """Mode defaults (pe: t=0, alpha=0; mvspe: alpha=0) plus overrides, validated."""
        base = {"mode": mode}
        if mode == "pe":
            base.update(t=0.0, alpha=0.0)
        elif mode == "mvspe":
            base.update(alpha=0.0)
        base.update(overrides)
        cfg = cls(**base)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, mode: str | None = None) -> TrainConfig:
        raw = read_kv_file(path)
        values = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, text in raw.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                values[key] = _parse_value(types[key], text)
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {text!r}") from e
        if mode is not None:
            values["mode"] = mode
        return cls.for_mode(values.pop("mode", "vispe"), **values)

    def arch(self, input_dim: int) -> Arch:
        return Arch(input_dim, tuple(self.hidden_dims), self.embed_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def _parse_value(kind: str, text: str):
    if kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(text)
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "tuple":
        return tuple(int(s) for s in text.replace(",", " ").split())
    return text


@dataclass
class TrainState:
    config: TrainConfig
    params: EmbedderParams
    heads: dict[str, np.ndarray]
    bank: PrototypeBank
    rng: np.random.Generator
    class_index: dict[int, int]
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass
class Batch:
    """Observation rows to embed plus what the mode's loss needs to read them."""

    X: np.ndarray
    m: int
    targets: np.ndarray | None = None


def _glorot(rng, rows, cols):
    a = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def init_state(config: TrainConfig, ds: MultiviewDataset) -> TrainState:
    config.check_ranges()
    arch = config.arch(ds.D)
    params = embedder.init(arch, config.seed)
    head_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x4EAD]))
    heads = {}
    class_index = {c: i for i, c in enumerate(sorted({o.class_id for o in ds.objects}))}
    if config.mode == "instance":
        heads["instance"] = _glorot(head_rng, len(ds), config.embed_dim)
    elif config.mode == "supervised":
        heads["supervised"] = _glorot(head_rng, len(class_index), config.embed_dim)
    bank = init_bank(ds, config.t, config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7EA1]))
    return TrainState(config, params, heads, bank, rng, class_index)


def make_batch(state: TrainState, ds: MultiviewDataset, flat: np.ndarray, offsets: np.ndarray,
               instance_ids) -> Batch:
    """Sample the views one minibatch needs, one anchor view per instance."""
    cfg = state.config
    plan = sample_minibatch(ds, state.bank, len(instance_ids), state.rng, instance_ids,
                            cfg.exclude_anchor_proto)
    ids = plan.instance_ids
    base = offsets[ids]
    anchor_rows = base + plan.anchor_views
    m = len(ids)
    if cfg.mode in PROTOTYPE_MODES:
        rows = np.concatenate([anchor_rows, base + plan.proto_views_1, base + plan.proto_views_2])
        return Batch(flat[rows], m)
    if cfg.mode == "triplet":
        counts = ds.view_counts
        pos_rows = base + _draw_other(state.rng, counts[ids], plan.anchor_views)
        n = len(ds)
        other = state.rng.integers(0, max(n - 1, 1), size=m)
        other = np.where(n > 1, other + (other >= ids), ids)
        neg_rows = offsets[other] + state.rng.integers(0, counts[other])
        return Batch(flat[np.concatenate([anchor_rows, pos_rows, neg_rows])], m)
    if cfg.mode == "instance":
        return Batch(flat[anchor_rows], m, ids)
    labels = np.array([state.class_index[ds.objects[i].class_id] for i in ids])
    return Batch(flat[anchor_rows], m, labels)


def batch_loss(params: EmbedderParams, heads: dict, batch: Batch, config: TrainConfig):
    """Loss, per-term means, and gradients for one minibatch.

    Returns ``(loss, kl, param_grads, head_grads)``.
    """
    m = batch.m
    head_grads = {}
    frozen = None
    kl_out = [0.0]
    mode = config.mode

    if mode in PROTOTYPE_MODES:
        if config.stop_grad_protos:
            frozen = np.arange(m, 3 * m)

        def loss_fn(E):
            total, parts, dA, dP1, dP2 = losses.proto_batch_loss(
                E[:m], E[m : 2 * m], E[2 * m :], config.tau, config.alpha, config.symmetric_kl
            )
            kl_out[0] = parts.L_kl
            for name in ("L_s1", "L_s2", "L_kl"):
                if not math.isfinite(getattr(parts, name)):
                    raise NumericError(f"non-finite {name} term")
            return total, np.concatenate([dA, dP1, dP2])

    elif mode == "triplet":

        def loss_fn(E):
            loss, dA, dP, dN = losses.triplet_batch_loss(E[:m], E[m : 2 * m], E[2 * m :], config.margin)
            return loss, np.concatenate([dA, dP, dN])

    else:
        W = heads[mode]

        def loss_fn(E):
            loss, dF, dW = losses.softmax_head_batch_loss(E, W, batch.targets)
            head_grads[mode] = dW
            return loss, dF

    loss, grads = embedder.loss_and_grads(params, batch.X, loss_fn, frozen)
    return loss, kl_out[0], grads, head_grads


def sgd_step(params: EmbedderParams, grads: EmbedderParams, lr: float) -> EmbedderParams:
    """Vanilla SGD: no momentum, no weight decay."""
    for p, g in zip(params.weights + params.biases, grads.weights + grads.biases):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    return EmbedderParams(
        params.arch,
        [w - lr * g for w, g in zip(params.weights, grads.weights)],
        [b - lr * g for b, g in zip(params.biases, grads.biases)],
    )


def run_epochs(state: TrainState, ds: MultiviewDataset, until_epoch: int, eval_fn=None) -> TrainState:
    """Advance ``state`` to ``until_epoch`` completed epochs."""
    cfg = state.config
    n = len(ds)
    if n == 0:
        raise ValueError("empty training set")
    flat, offsets = ds.flat_views()
    flat = flat.astype(np.float64)
    while state.epoch < until_epoch:
        t0 = time.perf_counter()
        perm = state.rng.permutation(n)
        loss_sum = kl_sum = 0.0
        n_iter = 0
        resampled = 0
        for it, start in enumerate(range(0, n, cfg.m)):
            batch = make_batch(state, ds, flat, offsets, perm[start : start + cfg.m])
            try:
                loss, kl, grads, head_grads = batch_loss(state.params, state.heads, batch, cfg)
            except NumericError as e:
                raise NumericError(f"epoch {state.epoch + 1}, iteration {it + 1}: {e}") from e
            state.params = sgd_step(state.params, grads, cfg.lr)
            for name, g in head_grads.items():
                state.heads[name] = state.heads[name] - cfg.lr * g
            loss_sum += loss
            kl_sum += kl
            n_iter += 1
            if cfg.resample_granularity == "iteration":
                resampled += maybe_resample(state.bank, ds)
        if cfg.resample_granularity == "epoch":
            resampled += maybe_resample(state.bank, ds)
        state.epoch += 1
        entry = {
            "epoch": state.epoch,
            "mean_loss": loss_sum / n_iter,
            "mean_kl": kl_sum / n_iter,
            "resampled": resampled,
            "wall_time": time.perf_counter() - t0,
        }
        if eval_fn is not None:
            entry["unseen_knn_accuracy"] = float(eval_fn(state.params))
        state.history.append(entry)
        log.debug("epoch %d loss %.4f", state.epoch, entry["mean_loss"])
    return state


def train(config: TrainConfig, ds: MultiviewDataset, eval_fn=None):
    """Train from scratch for ``config.epochs``; returns ``(params, history)``."""
    state = init_state(config, ds)
    run_epochs(state, ds, config.epochs, eval_fn)
    return state.params, state.history


# --- checkpoints ---------------------------------------------------------


def _layout(state: TrainState) -> list[dict]:
    items = []
    for i, (W, b) in enumerate(zip(state.params.weights, state.params.biases)):
        items += [(f"W{i}", W.shape), (f"b{i}", b.shape)]
    for name, H in sorted(state.heads.items()):
        items.append((f"head:{name}", H.shape))
    out, offset = [], 0
    for name, shape in items:
        out.append({"name": name, "shape": list(shape), "offset": offset})
        offset += int(np.prod(shape))
    return out


def checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arch = state.params.arch
    theta = [state.params.flat()] + [state.heads[k].ravel() for k in sorted(state.heads)]
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "arch": {**asdict(arch), "hidden_dims": list(arch.hidden_dims)},
        "mode": state.config.mode,
        "config": state.config.to_dict(),
        "epoch": state.epoch,
        "layout": _layout(state),
        "class_index": {str(k): v for k, v in state.class_index.items()},
        "bank": state.bank.state_dict(),
        "rng": state.rng.bit_generator.state,
    }
    (path / "weights.bin").write_bytes(np.concatenate(theta).astype("<f8").tobytes())
    (path / "model.json").write_text(json.dumps(meta, indent=1))
    (path / "history.json").write_text(json.dumps(state.history, indent=1))


def resume(path, ds: MultiviewDataset | None = None) -> TrainState:
    """Rebuild a training state; with ``ds``, check it matches the checkpoint."""
    path = Path(path)
    meta = json.loads((path / "model.json").read_text())
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {meta.get('format_version')!r}")
    cfg_d = dict(meta["config"])
    cfg_d["hidden_dims"] = tuple(cfg_d["hidden_dims"])
    config = TrainConfig(**cfg_d)
    arch_d = dict(meta["arch"])
    arch = Arch(**{**arch_d, "hidden_dims": tuple(arch_d["hidden_dims"])})
    if ds is not None:
        if ds.D != arch.input_dim:
            raise ConfigError(f"dataset D={ds.D} does not match model input_dim={arch.input_dim}")
        if len(ds) != len(meta["bank"]["view_index"]):
            raise ConfigError("dataset instance count does not match checkpoint")
    flat = np.frombuffer((path / "weights.bin").read_bytes(), dtype="<f8").astype(np.float64)
    total = sum(int(np.prod(e["shape"])) for e in meta["layout"])
    if flat.size != total:
        raise ConfigError(f"weights.bin holds {flat.size} values, layout expects {total}")
    k = embedder.n_params(arch)
    params = EmbedderParams.from_flat(arch, flat[:k])
    heads = {}
    for e in meta["layout"]:
        if e["name"].startswith("head:"):
            size = int(np.prod(e["shape"]))
            heads[e["name"][5:]] = flat[e["offset"] : e["offset"] + size].reshape(e["shape"]).copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    history_file = path / "history.json"
    history = json.loads(history_file.read_text()) if history_file.exists() else []
    return TrainState(
        config,
        params,
        heads,
        PrototypeBank.from_state(meta["bank"]),
        rng,
        {int(k): v for k, v in meta["class_index"].items()},
        int(meta["epoch"]),
        history,
    )


def load_params(path) -> EmbedderParams:
    return resume(path).params


# --- gradient checking ---------------------------------------------------


def flat_objective(state: TrainState, batch: Batch):
    """``theta -> (loss, grad)`` over the embedder and any heads, for one fixed batch."""
    arch = state.params.arch
    k = embedder.n_params(arch)
    names = sorted(state.heads)
    shapes = [state.heads[n].shape for n in names]

    def f(theta):
        params = EmbedderParams.from_flat(arch, theta[:k])
        heads, pos = {}, k
        for name, shape in zip(names, shapes):
            size = int(np.prod(shape))
            heads[name] = theta[pos : pos + size].reshape(shape)
            pos += size
        loss, _, grads, head_grads = batch_loss(params, heads, batch, state.config)
        return loss, np.concatenate([grads.flat()] + [head_grads[n].ravel() for n in names])

    theta = np.concatenate([state.params.flat()] + [state.heads[n].ravel() for n in names])
    return f, theta


def check_mode_gradients(ds: MultiviewDataset, config: TrainConfig, eps: float = 1e-5,
                         n_coords: int = 200) -> float:
    """Max relative finite-difference error for one random minibatch of ``config.mode``."""
    state = init_state(config, ds)
    flat, offsets = ds.flat_views()
    ids = state.rng.choice(len(ds), size=min(config.m, len(ds)), replace=False)
    batch = make_batch(state, ds, flat.astype(np.float64), offsets, ids)
    f, theta = flat_objective(state, batch)
    return embedder.gradient_check(f, theta, eps, n_coords, seed=config.seed)
