import numpy as np
import pytest

from nopeek.errors import RejectedInputError
from nopeek.layers import (
    AvgPool2d,
    BatchNorm,
    BilinearUpsample,
    Conv2d,
    Elu,
    Linear,
    Mode,
    Reshape,
    Sequential,
    Tanh,
    backward,
    forward,
    l1_loss,
)

TRIALS = 100
TOLERANCE = 1e-4
EPS = 1e-6


def _numeric(f, array: np.ndarray, index) -> float:
    original = array[index]
    array[index] = original + EPS
    plus = f()
    array[index] = original - EPS
    minus = f()
    array[index] = original
    return (plus - minus) / (2 * EPS)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    return float(np.linalg.norm(analytic - numeric) / max(scale, 1e-12))


def _sample(rng, shape, count=8):
    flat = rng.choice(int(np.prod(shape)), size=min(count, int(np.prod(shape))), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def _conv(rng):
    return Conv2d((2, 5, 5), 3, kernel_size=3, rng=rng), rng.normal(size=(2, 2, 5, 5)), Mode.TRAIN


def _strided_conv(rng):
    return Conv2d((2, 6, 6), 3, kernel_size=3, stride=2, rng=rng), rng.normal(size=(2, 2, 6, 6)), Mode.TRAIN


def _linear(rng):
    return Linear((7,), 4, rng=rng), rng.normal(size=(3, 7)), Mode.TRAIN


def _pool(rng):
    return AvgPool2d((2, 4, 4), 2), rng.normal(size=(2, 2, 4, 4)), Mode.TRAIN


def _upsample(rng):
    return BilinearUpsample((2, 3, 3), 2), rng.normal(size=(2, 2, 3, 3)), Mode.TRAIN


def _batch_norm_train(rng):
    layer = BatchNorm((3, 4, 4))
    layer.params["gamma"] = rng.uniform(0.5, 1.5, 3)
    layer.params["beta"] = rng.normal(size=3)
    return layer, rng.normal(size=(4, 3, 4, 4)), Mode.TRAIN


def _batch_norm_infer(rng):
    layer = BatchNorm((5,))
    layer.params["gamma"] = rng.uniform(0.5, 1.5, 5)
    layer.buffers["running_mean"] = rng.normal(size=5)
    layer.buffers["running_var"] = rng.uniform(0.5, 2.0, 5)
    return layer, rng.normal(size=(3, 5)), Mode.INFER


def _elu(rng):
    return Elu((3, 4)), rng.normal(size=(2, 3, 4)), Mode.TRAIN


def _tanh(rng):
    return Tanh((6,)), rng.normal(size=(3, 6)), Mode.TRAIN


def _reshape(rng):
    return Reshape((2, 3, 2), (12,)), rng.normal(size=(2, 2, 3, 2)), Mode.TRAIN


LAYERS = [_conv, _strided_conv, _linear, _pool, _upsample, _batch_norm_train, _batch_norm_infer, _elu, _tanh, _reshape]


class TestGradients:
    """
    Finite-difference checks of every layer and of the L1 loss.

    Testing strategy:
    - each layer kind, including strided convolution and both batch-norm modes
    - 100 random trials per layer, 64-bit, central differences on sampled input
      and parameter coordinates
    - L1 loss on random predictions (ties have probability zero)
    """

    @pytest.mark.parametrize("seed", range(TRIALS))
    @pytest.mark.parametrize("factory", LAYERS, ids=lambda f: f.__name__.strip("_"))
    def test_layer_gradient(self, factory, seed):
        rng = np.random.default_rng(seed)
        layer, x, mode = factory(rng)
        upstream = rng.normal(size=(x.shape[0],) + layer.output_shape)

        def objective() -> float:
            return float(np.sum(upstream * forward(layer, x, mode)))

        d_input, d_params = backward(layer, x, upstream, mode)
        assert d_input.shape == x.shape
        assert set(d_params) == set(layer.params)

        indices = _sample(rng, x.shape)
        numeric = np.array([_numeric(objective, x, i) for i in indices])
        analytic = np.array([d_input[i] for i in indices])
        assert _relative_error(analytic, numeric) < TOLERANCE

        for name, param in layer.params.items():
            assert d_params[name].shape == param.shape
            indices = _sample(rng, param.shape, count=4)
            numeric = np.array([_numeric(objective, param, i) for i in indices])
            analytic = np.array([d_params[name][i] for i in indices])
            assert _relative_error(analytic, numeric) < TOLERANCE, name

    @pytest.mark.parametrize("seed", range(TRIALS))
    def test_l1_loss_gradient(self, seed):
        rng = np.random.default_rng(seed)
        prediction = rng.normal(size=(2, 1, 4, 4))
        target = rng.normal(size=(2, 1, 4, 4))
        _, grad = l1_loss(prediction, target)
        indices = _sample(rng, prediction.shape)
        numeric = np.array([_numeric(lambda: l1_loss(prediction, target)[0], prediction, i) for i in indices])
        analytic = np.array([grad[i] for i in indices])
        assert _relative_error(analytic, numeric) < TOLERANCE


class TestLayers:
    """
    Testing strategy:
    - shapes: declared output shapes, rejection of mismatched inputs and gradients
    - batch norm: train vs infer statistics, running-statistic update, epsilon check
    - exactness: pooling and upsampling preserve constants
    - L1 loss value and shape check
    - Sequential: shape chaining, parameter naming, assignment
    """

    def test_conv_preserves_extents_with_stride_one(self):
        layer = Conv2d((1, 8, 8), 4)
        assert layer.output_shape == (4, 8, 8)
        assert forward(layer, np.zeros((2, 1, 8, 8))).shape == (2, 4, 8, 8)

    def test_strided_conv_halves_extents(self):
        assert Conv2d((1, 8, 8), 2, stride=2).output_shape == (2, 4, 4)

    def test_wrong_input_shape_rejected(self):
        layer = Linear((3,), 2)
        with pytest.raises(RejectedInputError):
            forward(layer, np.zeros((1, 4)))

    def test_wrong_gradient_shape_rejected(self):
        layer = Tanh((3,))
        with pytest.raises(RejectedInputError):
            backward(layer, np.zeros((2, 3)), np.zeros((2, 4)))

    def test_empty_batch_rejected(self):
        with pytest.raises(RejectedInputError):
            forward(Tanh((3,)), np.zeros((0, 3)))

    def test_batch_norm_train_uses_batch_statistics(self):
        layer = BatchNorm((2,))
        x = np.random.default_rng(1).normal(3.0, 2.0, size=(50, 2))
        out = forward(layer, x, Mode.TRAIN)
        assert np.allclose(out.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=0), 1.0, atol=1e-3)

    def test_batch_norm_updates_running_statistics_in_train_mode_only(self):
        layer = BatchNorm((2,), momentum=0.5)
        x = np.full((4, 2), 2.0)
        forward(layer, x, Mode.INFER)
        assert np.array_equal(layer.buffers["running_mean"], [0.0, 0.0])
        forward(layer, x, Mode.TRAIN)
        assert np.allclose(layer.buffers["running_mean"], [1.0, 1.0])
        assert np.allclose(layer.buffers["running_var"], [0.5, 0.5])

    def test_batch_norm_infer_is_pure(self):
        layer = BatchNorm((3,))
        x = np.random.default_rng(2).normal(size=(4, 3))
        assert np.array_equal(forward(layer, x, Mode.INFER), forward(layer, x, Mode.INFER))

    @pytest.mark.parametrize("eps", [0.0, -1e-5])
    def test_batch_norm_rejects_nonpositive_epsilon(self, eps):
        with pytest.raises(RejectedInputError):
            BatchNorm((3,), eps=eps)

    def test_pool_and_upsample_preserve_constants(self):
        x = np.full((1, 2, 4, 4), 0.37)
        assert np.array_equal(forward(AvgPool2d((2, 4, 4)), x), np.full((1, 2, 2, 2), 0.37))
        assert np.array_equal(forward(BilinearUpsample((2, 4, 4)), x), np.full((1, 2, 8, 8), 0.37))

    def test_pool_window_must_divide_extents(self):
        with pytest.raises(RejectedInputError):
            AvgPool2d((1, 5, 5), 2)

    def test_activations_stay_finite(self):
        x = np.array([[-1e3, -1.0, 0.0, 1.0, 1e3]])
        assert np.all(np.isfinite(forward(Elu((5,)), x)))
        assert np.all(np.abs(forward(Tanh((5,)), x)) <= 1)

    def test_l1_loss_value(self):
        loss, grad = l1_loss(np.array([1.0, -1.0, 0.5]), np.array([0.0, 0.0, 0.5]))
        assert loss == pytest.approx(2.0 / 3.0)
        assert np.array_equal(grad, np.array([1.0, -1.0, 0.0]) / 3)

    def test_l1_loss_shape_mismatch(self):
        with pytest.raises(RejectedInputError):
            l1_loss(np.zeros(3), np.zeros(4))

    def test_sequential_rejects_mismatched_chain(self):
        with pytest.raises(RejectedInputError):
            Sequential([Linear((3,), 4), Linear((5,), 2)])

    def test_sequential_names_and_assigns_parameters(self):
        chain = Sequential([Linear((3,), 4), BatchNorm((4,)), Tanh((4,))], prefix="enc.")
        assert set(chain.named_params()) == {"enc.0.weight", "enc.0.bias", "enc.1.gamma", "enc.1.beta"}
        assert set(chain.named_buffers()) == {"enc.1.running_mean", "enc.1.running_var"}
        chain.assign("enc.0.bias", np.ones(4))
        assert np.array_equal(chain.layers[0].params["bias"], np.ones(4))
        with pytest.raises(RejectedInputError):
            chain.assign("enc.0.bias", np.ones(5))
        assert chain.parameter_count() == 3 * 4 + 4 + 4 + 4

    def test_sequential_backward_matches_layerwise(self):
        rng = np.random.default_rng(3)
        chain = Sequential([Linear((3,), 4, rng=rng), Elu((4,)), Linear((4,), 2, rng=rng)])
        x = rng.normal(size=(5, 3))
        out, inputs = chain.forward(x, Mode.TRAIN)
        grad = rng.normal(size=out.shape)
        d_input, grads = chain.backward(inputs, grad)
        assert d_input.shape == x.shape
        assert set(grads) == set(chain.named_params())

    def test_identity_one_by_one_conv(self):
        layer = Conv2d((2, 3, 3), 2, kernel_size=1)
        layer.params["weight"] = np.eye(2).reshape(2, 2, 1, 1)
        x = np.random.default_rng(4).normal(size=(1, 2, 3, 3))
        assert np.allclose(forward(layer, x), x)

    def test_pool_takes_window_mean(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        assert forward(AvgPool2d((1, 2, 2)), x)[0, 0, 0, 0] == 2.5

    def test_activation_slopes(self):
        d_elu, _ = backward(Elu((1,)), np.array([[1.0]]), np.array([[1.0]]))
        d_tanh, _ = backward(Tanh((1,)), np.array([[0.0]]), np.array([[1.0]]))
        assert d_elu[0, 0] == pytest.approx(1.0)
        assert d_tanh[0, 0] == pytest.approx(1.0)

    def test_l1_loss_worked_example(self):
        loss, grad = l1_loss(np.array([1.0, -1.0]), np.array([0.0, 0.0]))
        assert loss == 1.0
        assert np.array_equal(grad, [0.5, -0.5])
        assert l1_loss(grad, grad)[0] == 0.0
