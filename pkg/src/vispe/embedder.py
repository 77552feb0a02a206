"""Embedding network: a small tanh MLP followed by unit-norm projection.

The forward pass keeps what the backward pass needs; ``backward`` maps a
gradient on the unit-norm outputs back onto every weight and bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericError(FloatingPointError):
    """A non-finite value showed up in a forward or loss computation."""


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "identity": (lambda z: z, lambda a: np.ones_like(a)),
}


@dataclass(frozen=True)
class Arch:
    input_dim: int
    hidden_dims: tuple[int, ...] = (128, 64)
    embed_dim: int = 32
    activation: str = "tanh"
    normalize: bool = True
    norm_epsilon: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if min((self.input_dim, self.embed_dim) + self.hidden_dims) < 1:
            raise ValueError("all layer sizes must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm_epsilon <= 0:
            raise ValueError("norm_epsilon must be positive")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) for each affine layer, input to output."""
        dims = [self.input_dim, *self.hidden_dims, self.embed_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]


@dataclass
class EmbedderParams:
    arch: Arch
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        """Layer order: W0, b0, W1, b1, ... with each W row-major."""
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b.ravel()]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, arch: Arch, theta: np.ndarray) -> EmbedderParams:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != n_params(arch):
            raise ValueError(f"expected {n_params(arch)} parameters, got {theta.size}")
        weights, biases, pos = [], [], 0
        for out_dim, in_dim in arch.layer_dims:
            weights.append(theta[pos : pos + out_dim * in_dim].reshape(out_dim, in_dim).copy())
            pos += out_dim * in_dim
            biases.append(theta[pos : pos + out_dim].copy())
            pos += out_dim
        return cls(arch, weights, biases)

    def copy(self) -> EmbedderParams:
        return EmbedderParams(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def n_params(arch: Arch) -> int:
    return sum(o * i + o for o, i in arch.layer_dims)


def init(arch: Arch, seed: int) -> EmbedderParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE3BED]))
    weights, biases = [], []
    for out_dim, in_dim in arch.layer_dims:
        a = np.sqrt(6.0 / (in_dim + out_dim))
        weights.append(rng.uniform(-a, a, size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim))
    return EmbedderParams(arch, weights, biases)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    activations: list[np.ndarray] = field(default_factory=list)
    pre_norm: np.ndarray | None = None
    norms: np.ndarray | None = None
    degenerate: np.ndarray | None = None


def forward(params: EmbedderParams, X) -> tuple[np.ndarray, ForwardCache]:
    """Embed the rows of ``X``; returns outputs and the backward cache."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim:
        raise ValueError(f"expected input of shape (n, {params.arch.input_dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite input to embedder")
    act, _ = _ACTIVATIONS[params.arch.activation]
    cache = ForwardCache(inputs=X)
    h = X
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        # non-BLAS contraction: each row's result is independent of batch size
        z = np.einsum("ij,kj->ik", h, W, optimize=False) + b
        h = z if i == last else act(z)
        if i != last:
            cache.activations.append(h)
    cache.pre_norm = h
    if not params.arch.normalize:
        return h, cache
    norms = np.sqrt(np.einsum("ij,ij->i", h, h))
    cache.norms = norms
    cache.degenerate = norms == 0.0
    out = h / (norms + params.arch.norm_epsilon)[:, None]
    # exactly-zero pre-norm rows stay zero; callers can inspect cache.degenerate
    out[cache.degenerate] = 0.0
    return out, cache


def backward(params: EmbedderParams, cache: ForwardCache, grad_out: np.ndarray) -> EmbedderParams:
    """Gradient of a scalar w.r.t. all parameters, given d(scalar)/d(outputs)."""
    _, dact = _ACTIVATIONS[params.arch.activation]
    g = np.asarray(grad_out, dtype=np.float64)
    if params.arch.normalize:
        z, n = cache.pre_norm, cache.norms
        denom = n + params.arch.norm_epsilon
        safe_n = np.where(cache.degenerate, 1.0, n)
        proj = np.einsum("ij,ij->i", z, g) / (safe_n * denom * denom)
        g = g / denom[:, None] - z * proj[:, None]
        g[cache.degenerate] = 0.0
    grads_w = [None] * len(params.weights)
    grads_b = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            g = g * dact(cache.activations[i])
        h_in = cache.inputs if i == 0 else cache.activations[i - 1]
        grads_w[i] = g.T @ h_in
        grads_b[i] = g.sum(axis=0)
        if i:
            g = g @ params.weights[i]
    return EmbedderParams(params.arch, grads_w, grads_b)


def embed_batch(params: EmbedderParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("embed_batch expects a 2-D array (ragged input?)")
    return forward(params, X)[0]


def embed(params: EmbedderParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("embed expects a single observation vector")
    return forward(params, x[None, :])[0][0]


def loss_and_grads(params: EmbedderParams, X, loss_fn, frozen_rows=None):
    """Evaluate ``loss_fn`` on the embeddings of ``X`` and backpropagate.

    ``loss_fn(E)`` returns ``(loss, dL/dE)``.  Rows listed in
    ``frozen_rows`` get no gradient (stop-gradient on those embeddings).
    """
    E, cache = forward(params, X)
    loss, dE = loss_fn(E)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss!r}")
    if frozen_rows is not None:
        dE = np.array(dE, dtype=np.float64, copy=True)
        dE[frozen_rows] = 0.0
    return loss, backward(params, cache, dE)


def gradient_check(f, theta, eps: float = 1e-5, n_coords: int | None = 200, seed: int = 0,
                   analytic=None) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``f(theta)`` returns ``(loss, grad)``; ``analytic`` may override the
    gradient under test.  With ``n_coords=None`` every coordinate is checked.
    """
    theta = np.array(theta, dtype=np.float64)
    _, grad = f(theta)
    if analytic is not None:
        grad = analytic
    if n_coords is None or n_coords >= theta.size:
        coords = np.arange(theta.size)
    else:
        coords = np.random.default_rng(seed).choice(theta.size, size=n_coords, replace=False)
    worst = 0.0
    for c in coords:
        orig = theta[c]
        theta[c] = orig + eps
        lp = f(theta)[0]
        theta[c] = orig - eps
        lm = f(theta)[0]
        theta[c] = orig
        fd = (lp - lm) / (2 * eps)
        err = abs(grad[c] - fd) / max(abs(grad[c]), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst
