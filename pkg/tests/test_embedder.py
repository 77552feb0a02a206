import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vispe import embedder
from vispe.embedder import Arch, NumericError


@pytest.fixture
def params():
    return embedder.init(Arch(10, (7, 5), 4), seed=0)


def test_param_count_and_flat_round_trip(params):
    theta = params.flat()
    assert theta.size == embedder.n_params(params.arch) == 10 * 7 + 7 + 7 * 5 + 5 + 5 * 4 + 4
    back = embedder.EmbedderParams.from_flat(params.arch, theta)
    np.testing.assert_array_equal(back.flat(), theta)


def test_glorot_bounds_and_zero_biases(params):
    for W in params.weights:
        fan_out, fan_in = W.shape
        assert np.all(np.abs(W) <= np.sqrt(6.0 / (fan_in + fan_out)))
    assert all(np.all(b == 0) for b in params.biases)


def test_init_deterministic():
    arch = Arch(10, (7,), 3)
    np.testing.assert_array_equal(embedder.init(arch, 4).flat(), embedder.init(arch, 4).flat())
    assert not np.array_equal(embedder.init(arch, 4).flat(), embedder.init(arch, 5).flat())


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
def test_unit_norm(seed, scale):
    params = embedder.init(Arch(10, (7, 5), 4), 0)
    x = scale * np.random.default_rng(seed).standard_normal(10)
    assert abs(np.linalg.norm(embedder.embed(params, x)) - 1.0) < 1e-9


def test_zero_prenorm_is_degenerate():
    arch = Arch(3, (), 2, activation="identity")
    p = embedder.EmbedderParams(arch, [np.zeros((2, 3))], [np.zeros(2)])
    out, cache = embedder.forward(p, np.ones((1, 3)))
    np.testing.assert_array_equal(out, 0.0)
    assert cache.degenerate[0]


def test_scale_sensitive(params):
    x = np.random.default_rng(2).standard_normal(10)
    assert not np.allclose(embedder.embed(params, x), embedder.embed(params, 2 * x))


def test_batch_matches_loop(params):
    X = np.random.default_rng(3).standard_normal((9, 10))
    batch = embedder.embed_batch(params, X)
    loop = np.array([embedder.embed(params, x) for x in X])
    np.testing.assert_array_equal(batch, loop)
    np.testing.assert_array_equal(embedder.embed_batch(params, X[:1])[0], embedder.embed(params, X[0]))
    perm = np.random.default_rng(4).permutation(9)
    np.testing.assert_array_equal(embedder.embed_batch(params, X[perm]), batch[perm])


def test_non_finite_input(params):
    with pytest.raises(NumericError):
        embedder.embed(params, np.full(10, np.nan))


def test_ragged_batch(params):
    with pytest.raises(ValueError):
        embedder.embed_batch(params, np.zeros((3, 9)))


def _quadratic_setup():
    arch = Arch(5, (), 3, activation="identity", normalize=False)
    p = embedder.init(arch, 1)
    X = np.random.default_rng(5).standard_normal((4, 5))
    T = np.random.default_rng(6).standard_normal((4, 3))

    def f(theta):
        q = embedder.EmbedderParams.from_flat(arch, theta)
        out, cache = embedder.forward(q, X)
        r = out - T
        return float(np.sum(r * r)), embedder.backward(q, cache, 2 * r).flat()

    return f, p.flat()


def test_gradcheck_exact_for_quadratic():
    f, theta = _quadratic_setup()
    assert embedder.gradient_check(f, theta, n_coords=None) < 1e-8


def test_gradcheck_catches_corruption():
    f, theta = _quadratic_setup()
    g = f(theta)[1].copy()
    i = int(np.argmax(np.abs(g)))
    g[i] *= 2.0
    assert embedder.gradient_check(f, theta, n_coords=None, analytic=g) > 0.3


def test_backward_through_normalization():
    arch = Arch(6, (5,), 4)
    p = embedder.init(arch, 2)
    X = np.random.default_rng(7).standard_normal((3, 6))
    w = np.random.default_rng(8).standard_normal((3, 4))

    def f(theta):
        q = embedder.EmbedderParams.from_flat(arch, theta)
        out, cache = embedder.forward(q, X)
        return float(np.sum(np.sin(out) * w)), embedder.backward(q, cache, np.cos(out) * w).flat()

    assert embedder.gradient_check(f, p.flat(), n_coords=None) < 1e-6


def test_loss_and_grads_non_finite(params):
    X = np.ones((2, 10))
    with pytest.raises(NumericError):
        embedder.loss_and_grads(params, X, lambda E: (float("nan"), np.zeros_like(E)))
