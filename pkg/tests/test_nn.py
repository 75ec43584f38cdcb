import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from badfu.errors import ConfigError, NumericError, ShapeError
from badfu.nn import (Architecture, Batch, ParamVector, forward, init_params, input_grad, input_grads, loss,
                      loss_and_param_grads, predict, sgd_step)


def naive_forward(p: ParamVector, x: np.ndarray) -> np.ndarray:
    """Loop-based reference forward pass."""
    layers = p.unpack()
    out = np.empty((x.shape[0], p.arch.n_classes))
    for s in range(x.shape[0]):
        a = list(x[s])
        for li, (W, b) in enumerate(layers):
            z = [b[j] + sum(a[i] * W[i, j] for i in range(W.shape[0])) for j in range(W.shape[1])]
            if li < len(layers) - 1:
                z = [max(v, 0.0) if p.arch.activation == "relu" else np.tanh(v) for v in z]
            a = z
        out[s] = a
    return out


def fd_param_grad(p: ParamVector, batch: Batch, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(p.values)
    v = p.values.copy()
    for i in range(v.size):
        old = v[i]
        v[i] = old + h
        up = loss(p.with_values(v), batch)
        v[i] = old - h
        down = loss(p.with_values(v), batch)
        v[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def random_instance(rng, sizes, n, activation="tanh"):
    arch = Architecture(tuple(sizes), activation)
    p = init_params(arch, int(rng.integers(1 << 32)))
    p = p.with_values(p.values + rng.normal(0, 0.1, size=p.values.size))
    x = rng.uniform(0, 1, size=(n, sizes[0]))
    y = rng.integers(0, sizes[-1], size=n)
    return p, Batch(x, y)


class TestArchitectureAndInit:
    def test_rejects_bad_layer_sizes(self):
        with pytest.raises(ConfigError):
            Architecture((3,))
        with pytest.raises(ConfigError):
            Architecture((3, 0, 2))
        with pytest.raises(ConfigError):
            Architecture((3, 2), activation="sigmoid")

    def test_param_count(self):
        assert Architecture((4, 5, 3)).n_params == 4 * 5 + 5 + 5 * 3 + 3

    def test_zero_biases(self):
        for seed in range(5):
            (_, b), = init_params(Architecture((2, 1)), seed).layers()
            assert np.all(b == 0.0)

    def test_deterministic(self):
        a = init_params(Architecture((4, 3, 2)), 7)
        b = init_params(Architecture((4, 3, 2)), 7)
        assert a.values.tobytes() == b.values.tobytes()

    def test_glorot_bound(self):
        (W1, _), _ = init_params(Architecture((4, 3, 2)), 7).layers()
        assert np.all(np.abs(W1) <= np.sqrt(6 / 7))

    def test_layout_round_trip(self):
        p = init_params(Architecture((5, 4, 3)), 1)
        q = ParamVector.pack(p.unpack(), p.arch)
        assert np.array_equal(p.values, q.values)
        W, b = p.unpack()[0]
        assert np.array_equal(p.values[:20], W.ravel()) and np.array_equal(p.values[20:24], b)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ParamVector(np.zeros(3), Architecture((2, 2)))


class TestForward:
    def test_zero_params(self):
        arch = Architecture((3, 4, 2))
        out = forward(ParamVector(np.zeros(arch.n_params), arch), np.ones((2, 3)))
        assert np.all(out == 0.0)

    def test_identity_layer(self):
        arch = Architecture((2, 2))
        p = ParamVector.pack([(np.eye(2), np.zeros(2))], arch)
        assert np.allclose(forward(p, np.array([[0.3, 0.7]])), [[0.3, 0.7]], atol=0)

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_matches_naive_oracle(self, activation):
        rng = np.random.default_rng(3)
        p, batch = random_instance(rng, (6, 5, 4, 3), 7, activation)
        assert np.max(np.abs(forward(p, batch) - naive_forward(p, batch.inputs))) < 1e-12

    def test_input_dim_checked(self):
        p = init_params(Architecture((3, 2)), 0)
        with pytest.raises(ShapeError):
            forward(p, np.ones((1, 4)))


class TestLossAndGradients:
    def test_uniform_softmax_is_ln2(self):
        arch = Architecture((3, 2))
        p = ParamVector(np.zeros(arch.n_params), arch)
        value, _ = loss_and_param_grads(p, Batch(np.random.default_rng(0).uniform(size=(4, 3)), [0, 1, 1, 0]))
        assert value == pytest.approx(np.log(2), abs=1e-15)

    def test_duplication_invariance(self):
        rng = np.random.default_rng(1)
        p, batch = random_instance(rng, (4, 5, 3), 1)
        dup = Batch(np.vstack([batch.inputs, batch.inputs]), np.concatenate([batch.labels, batch.labels]))
        l1, g1 = loss_and_param_grads(p, batch)
        l2, g2 = loss_and_param_grads(p, dup)
        assert l1 == pytest.approx(l2, abs=1e-14)
        assert np.allclose(g1, g2, atol=1e-14)

    def test_finite_difference_small_net(self):
        rng = np.random.default_rng(2)
        p, batch = random_instance(rng, (4, 5, 3), 8)
        _, g = loss_and_param_grads(p, batch)
        assert rel_err(g, fd_param_grad(p, batch)) < 1e-4

    def test_large_logits_are_stable(self):
        arch = Architecture((2, 2))
        p = ParamVector.pack([(np.array([[1e3, -1e3], [0, 0]]), np.zeros(2))], arch)
        value, g = loss_and_param_grads(p, Batch(np.array([[1.0, 0.0]]), [1]))
        assert np.isfinite(value) and value == pytest.approx(2e3)
        assert np.all(np.isfinite(g))

    def test_non_finite_raises(self):
        arch = Architecture((2, 2))
        p = ParamVector(np.full(arch.n_params, np.nan), arch)
        with pytest.raises(NumericError):
            loss_and_param_grads(p, Batch(np.ones((1, 2)), [0]))


class TestInputGrad:
    def test_zero_weights(self):
        arch = Architecture((4, 3, 2))
        p = ParamVector(np.zeros(arch.n_params), arch)
        assert np.all(input_grad(p, np.ones(4), 1) == 0.0)

    def test_linear_closed_form(self):
        rng = np.random.default_rng(4)
        W, b = rng.normal(size=(5, 3)), rng.normal(size=3)
        p = ParamVector.pack([(W, b)], Architecture((5, 3)))
        x = rng.uniform(size=5)
        z = x @ W + b
        s = np.exp(z - z.max())
        s /= s.sum()
        expected = W @ (s - np.eye(3)[2])
        assert np.allclose(input_grad(p, x, 2), expected, atol=1e-13)

    def test_finite_difference(self):
        rng = np.random.default_rng(5)
        p, batch = random_instance(rng, (6, 5, 3), 1)
        x, t, h = batch.inputs[0], int(batch.labels[0]), 1e-5
        fd = np.empty(6)
        for i in range(6):
            e = np.zeros(6)
            e[i] = h
            fd[i] = (loss(p, Batch([x + e], [t])) - loss(p, Batch([x - e], [t]))) / (2 * h)
        assert rel_err(input_grad(p, x, t), fd) < 1e-4

    def test_batched_matches_single(self):
        rng = np.random.default_rng(6)
        p, batch = random_instance(rng, (6, 5, 3), 4)
        many = input_grads(p, batch.inputs, batch.labels)
        for i in range(4):
            assert np.allclose(many[i], input_grad(p, batch.inputs[i], int(batch.labels[i])), atol=1e-15)


class TestSGD:
    def test_zero_grads(self):
        p = init_params(Architecture((3, 2)), 0)
        assert np.array_equal(sgd_step(p, np.zeros_like(p.values), 0.5).values, p.values)

    def test_linear_step(self):
        arch = Architecture((3, 2))
        g = np.arange(arch.n_params, dtype=float)
        q = sgd_step(ParamVector(np.zeros(arch.n_params), arch), g, 0.01)
        assert np.allclose(q.values, -0.01 * g, atol=0)

    def test_does_not_mutate(self):
        p = init_params(Architecture((3, 2)), 0)
        before = p.values.copy()
        sgd_step(p, np.ones_like(p.values), 0.1)
        assert np.array_equal(p.values, before)

    def test_recomputed_steps_differ_from_reused_gradient(self):
        rng = np.random.default_rng(7)
        p, batch = random_instance(rng, (4, 6, 3), 5)
        lr = 0.5
        _, g1 = loss_and_param_grads(p, batch)
        q = sgd_step(p, g1, lr)
        _, g2 = loss_and_param_grads(q, batch)
        two = sgd_step(q, g2, lr)
        one = sgd_step(p, 2 * g1, lr)
        assert np.allclose(two.values, sgd_step(p, g1 + g2, lr).values, atol=1e-15)
        assert np.max(np.abs(two.values - one.values)) > 1e-8

    def test_shape_checked(self):
        p = init_params(Architecture((3, 2)), 0)
        with pytest.raises(ShapeError):
            sgd_step(p, np.zeros(3), 0.1)


def test_predict_ties_go_to_lowest_class():
    arch = Architecture((2, 3))
    p = ParamVector(np.zeros(arch.n_params), arch)
    assert np.all(predict(p, np.ones((4, 2))) == 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6),
       hidden=st.lists(st.integers(1, 6), min_size=0, max_size=2))
def test_gradient_property(seed, n, hidden):
    rng = np.random.default_rng(seed)
    p, batch = random_instance(rng, (3, *hidden, 3), n)
    value, g = loss_and_param_grads(p, batch)
    assert value >= 0 and np.all(np.isfinite(g))
    assert rel_err(g, fd_param_grad(p, batch)) < 1e-4
