import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bacsa import nn
from bacsa.nn import (
    ForwardTrace,
    InvalidSpecError,
    LayerSpec,
    NetworkParams,
    TrainConfig,
    backward,
    evaluate,
    forward,
    init_bacsa,
    init_glorot,
    loss_nll,
    mlp_spec,
    sgd_step,
    train_local,
)


def finite_difference_grads(params, x, y, h=1e-5):
    """Central differences of the batch-mean NLL, one coordinate at a time."""
    out = []
    for group in (params.weights, params.biases):
        grads = []
        for arr in group:
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = arr[i]
                arr[i] = old + h
                up = loss_nll(forward(params, x), y)
                arr[i] = old - h
                down = loss_nll(forward(params, x), y)
                arr[i] = old
                g[i] = (up - down) / (2 * h)
            grads.append(g)
        out.append(grads)
    return out


def max_relative_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max()))
    return worst


def random_net(seed):
    rng = np.random.default_rng(seed)
    dims = [int(rng.integers(2, 9))]
    dims += [int(d) for d in rng.integers(2, 17, size=int(rng.integers(1, 3)))]
    n_classes = int(rng.integers(2, 11))
    spec = mlp_spec(dims[0], dims[1:], n_classes)
    params = init_glorot(spec, seed)
    params.biases = [rng.normal(0, 0.1, b.shape) for b in params.biases]
    x = rng.normal(size=(4, dims[0]))
    y = rng.integers(0, n_classes, size=4)
    return params, x, y


class TestInit:
    def test_bacsa_constant_matches_hand_value(self):
        p = init_bacsa(mlp_spec(4, [16], 3), seed=0)
        assert np.all(p.last_layer == p.last_layer[0, 0])
        assert p.last_layer[0, 0] == pytest.approx(0.072169, abs=1e-6)

    def test_bacsa_identity_case(self):
        p = init_bacsa([LayerSpec(1, 1, "softmax")], seed=3)
        assert p.last_layer[0, 0] == 1.0

    def test_bacsa_hidden_layers(self):
        spec = mlp_spec(4, [16], 3)
        p = init_bacsa(spec, seed=1)
        b = nn.glorot_bound(4, 16)
        assert np.abs(p.weights[0]).max() <= b
        small = init_bacsa(spec, seed=1, hidden="small")
        assert np.abs(small.weights[0]).max() <= nn.bacsa_scale(4, 16, 3)
        assert all(np.all(bias == 0) for bias in p.biases)

    def test_bacsa_and_glorot_share_hidden_draws(self):
        spec = mlp_spec(6, [8, 5], 4)
        a, g = init_bacsa(spec, 9), init_glorot(spec, 9)
        for wa, wg in zip(a.weights[:-1], g.weights[:-1]):
            np.testing.assert_array_equal(wa, wg)

    @pytest.mark.parametrize("init", [init_bacsa, init_glorot])
    def test_deterministic(self, init):
        spec = mlp_spec(5, [7], 3)
        assert init(spec, 42).equals(init(spec, 42))
        assert not init(spec, 42).equals(init(spec, 43))

    def test_glorot_bounds(self):
        assert nn.glorot_bound(2, 1) == pytest.approx(math.sqrt(2), abs=1e-5)
        assert nn.glorot_bound(3, 3) == 1.0
        p = init_glorot([LayerSpec(2, 1, "softmax")], 0)
        assert np.abs(p.weights[0]).max() <= math.sqrt(2)

    @pytest.mark.parametrize(
        "spec",
        [
            [LayerSpec(0, 3, "softmax")],
            [LayerSpec(3, 4, "relu")],
            [LayerSpec(3, 4, "softmax"), LayerSpec(4, 2, "softmax")],
            [LayerSpec(3, 4, "relu"), LayerSpec(5, 2, "softmax")],
            [],
        ],
    )
    def test_invalid_spec(self, spec):
        with pytest.raises(InvalidSpecError):
            init_bacsa(spec, 0)
        with pytest.raises(InvalidSpecError):
            init_glorot(spec, 0)


class TestForwardLoss:
    def test_zero_params_uniform(self):
        spec = mlp_spec(3, [4], 10)
        p = init_glorot(spec, 0)
        p.weights = [np.zeros_like(w) for w in p.weights]
        probs = forward(p, np.ones((2, 3))).probs
        np.testing.assert_allclose(probs, 0.1)

    def test_shapes_and_normalisation(self):
        p = init_glorot(mlp_spec(3, [4, 5], 6), 0)
        tr = forward(p, np.random.default_rng(0).normal(size=(7, 3)))
        assert tr.probs.shape == (7, 6)
        assert len(tr.activations) == 3
        np.testing.assert_allclose(tr.probs.sum(axis=1), 1.0, atol=1e-9)

    def test_dimension_mismatch(self):
        p = init_glorot(mlp_spec(3, [4], 2), 0)
        with pytest.raises(ValueError):
            forward(p, np.ones((2, 4)))

    @given(st.lists(st.floats(-500, 500), min_size=2, max_size=12))
    def test_softmax_rows_sum_to_one(self, logits):
        probs = nn.softmax(np.array([logits]))
        assert abs(probs.sum() - 1.0) <= 1e-9
        assert (probs >= 0).all() and (probs <= 1).all()

    def _trace(self, probs):
        probs = np.atleast_2d(np.asarray(probs, dtype=float))
        return ForwardTrace(inputs=np.zeros((probs.shape[0], 1)), activations=[probs])

    def test_loss_values(self):
        assert loss_nll(self._trace([0.0, 1.0, 0.0]), [1]) == pytest.approx(0.0)
        assert loss_nll(self._trace(np.full(10, 0.1)), [3]) == pytest.approx(2.302585, abs=1e-6)
        assert loss_nll(self._trace([0.5, 0.5]), [0]) == pytest.approx(0.693147, abs=1e-6)

    def test_loss_label_range(self):
        with pytest.raises(ValueError):
            loss_nll(self._trace([0.5, 0.5]), [2])


class TestBackward:
    @pytest.mark.parametrize("seed", range(10))
    def test_matches_finite_differences(self, seed):
        params, x, y = random_net(seed)
        g = backward(params, forward(params, x), y)
        num_w, num_b = finite_difference_grads(params, x, y)
        assert max_relative_error(g.weights + g.biases, num_w + num_b) <= 1e-4

    def test_zero_gradient_when_prediction_exact(self):
        p = init_glorot([LayerSpec(3, 2, "softmax")], 0)
        tr = forward(p, np.ones((1, 3)))
        tr.activations[-1] = np.array([[0.0, 1.0]])
        g = backward(p, tr, [1])
        assert all(np.all(w == 0) for w in g.weights + g.biases)

    def test_present_and_absent_rows_have_opposite_sign(self):
        p = init_bacsa(mlp_spec(5, [6], 4), 2)
        x = np.abs(np.random.default_rng(1).normal(size=(1, 5))) + 0.5
        g = backward(p, forward(p, x), [2])
        a = forward(p, x).activations[0][0]
        assert (a > 0).any()
        present = g.weights[-1][2][a > 0]
        absent = g.weights[-1][0][a > 0]
        assert (present < 0).all() and (absent > 0).all()

    def test_shape_mismatch(self):
        p = init_glorot(mlp_spec(3, [4], 2), 0)
        tr = forward(p, np.ones((2, 3)))
        with pytest.raises(ValueError):
            backward(p, tr, [0, 1, 1])


class TestSgd:
    def _scalar(self, w):
        return NetworkParams([np.array([[w]])], [np.array([0.0])])

    def test_zero_lr_identity(self):
        p = init_glorot(mlp_spec(3, [4], 2), 0)
        g = backward(p, forward(p, np.ones((2, 3))), [0, 1])
        assert sgd_step(p, g, TrainConfig(learning_rate=0.0)).equals(p)

    def test_hand_values(self):
        out = sgd_step(self._scalar(1.0), self._scalar(0.5), TrainConfig(0.1, 0.0))
        assert out.weights[0][0, 0] == pytest.approx(0.95)
        out = sgd_step(self._scalar(1.0), self._scalar(0.0), TrainConfig(0.1, 5e-4))
        assert out.weights[0][0, 0] == pytest.approx(0.99995)

    def test_zero_grad_zero_decay_identity(self):
        p = init_glorot(mlp_spec(3, [4], 2), 0)
        zero = NetworkParams([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases])
        assert sgd_step(p, zero, TrainConfig(0.3, 0.0)).equals(p)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step(self._scalar(1.0), init_glorot(mlp_spec(2, [2], 2), 0), TrainConfig())


def two_blobs(n=200, dim=8, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(size=(n, dim)) + np.where(y[:, None] == 0, -2.0, 2.0)
    return x, y


class TestTrainEvaluate:
    def test_zero_epochs_unchanged(self):
        x, y = two_blobs()
        p = init_bacsa(mlp_spec(8, [16], 2), 0)
        assert train_local(p, x, y, TrainConfig(epochs=0)).equals(p)

    def test_replay_is_bit_identical_and_input_untouched(self):
        x, y = two_blobs()
        p = init_bacsa(mlp_spec(8, [16], 2), 0)
        before = p.copy()
        a = train_local(p, x, y, TrainConfig(), seed=5)
        b = train_local(p, x, y, TrainConfig(), seed=5)
        assert a.equals(b)
        assert p.equals(before)
        assert not a.equals(train_local(p, x, y, TrainConfig(), seed=6))

    def test_learns_separable_blobs(self):
        x, y = two_blobs()
        p = train_local(init_bacsa(mlp_spec(8, [16], 2), 0), x, y, TrainConfig(0.01, 5e-4, 5, 32))
        assert evaluate(p, x, y) >= 0.9

    def test_empty_dataset(self):
        p = init_bacsa(mlp_spec(8, [16], 2), 0)
        with pytest.raises(ValueError):
            train_local(p, np.empty((0, 8)), np.empty(0, dtype=int), TrainConfig())

    def test_zero_params_accuracy_is_one_over_classes(self):
        g = 10
        p = init_glorot(mlp_spec(4, [5], g), 0)
        p.weights = [np.zeros_like(w) for w in p.weights]
        x = np.random.default_rng(0).normal(size=(1000, 4))
        y = np.arange(1000) % g
        acc = evaluate(p, x, y)
        assert acc == pytest.approx(1 / g)
        assert 0.5 / g <= acc <= 2 / g

    def test_memorised_set(self):
        x, y = two_blobs(n=60)
        p = train_local(init_glorot(mlp_spec(8, [16], 2), 0), x, y, TrainConfig(0.05, 0.0, 40, 8))
        assert evaluate(p, x, y) == 1.0

    def test_unseen_classes_score_low(self):
        x, y = two_blobs()
        p = train_local(init_bacsa(mlp_spec(8, [16], 4), 0), x, y, TrainConfig())
        rng = np.random.default_rng(3)
        xt = rng.normal(size=(400, 8))
        yt = np.repeat([2, 3], 200)
        assert evaluate(p, xt, yt) <= 1 / 4

    def test_empty_test_set(self):
        p = init_bacsa(mlp_spec(8, [16], 2), 0)
        with pytest.raises(ValueError):
            evaluate(p, np.empty((0, 8)), np.empty(0))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_train_is_pure(self, seed):
        x, y = two_blobs(n=40, seed=seed % 7)
        p = init_bacsa(mlp_spec(8, [6], 2), seed)
        cfg = TrainConfig(epochs=1, batch_size=16)
        assert train_local(p, x, y, cfg, seed).equals(train_local(p, x, y, cfg, seed))
