import numpy as np
import pytest

from fmnet.core import ops
from fmnet.core.errors import ConfigError, UsageError
from fmnet.core.tensor import Tensor, backward, default_dtype, float64_mode


def test_sum_gradient_is_ones():
    """Testa se d(sum(p))/dp é um tensor de uns."""
    p = Tensor.parameter(np.arange(6.0).reshape(2, 3), "p")
    grads = backward(p.sum())
    np.testing.assert_array_equal(grads["p"].data, np.ones((2, 3)))


def test_mse_gradient_closed_form_at_zero_weight():
    """Testa o gradiente de mse(Wx, y) em W=0: -2·x·yᵀ/m."""
    with float64_mode():
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 4))
        y = rng.normal(size=(1, 3))
        w = Tensor.parameter(np.zeros((4, 3)), "w")
        grads = backward(ops.mse(Tensor(x) @ w, y))
        np.testing.assert_allclose(grads["w"].data, -2.0 * x.T @ y / 3, rtol=1e-12)


def test_broadcast_gradient_is_reduced():
    """Testa se o gradiente de um bias somado por broadcasting volta à forma do bias."""
    x = Tensor(np.ones((2, 5, 3)))
    b = Tensor.parameter(np.zeros(3), "b")
    grads = backward((x + b).sum())
    np.testing.assert_array_equal(grads["b"].data, np.full(3, 10.0))


def test_reused_tensor_accumulates():
    """Testa se um parâmetro usado duas vezes acumula os dois caminhos."""
    p = Tensor.parameter(np.array([2.0, -1.0]), "p")
    grads = backward((p * p + p * 3.0).sum())
    np.testing.assert_allclose(grads["p"].data, 2 * np.array([2.0, -1.0]) + 3.0)


def test_indexing_gradient_scatters():
    """Testa o gradiente de fatiamento básico e de indexação avançada com repetição."""
    p = Tensor.parameter(np.arange(4.0), "p")
    grads = backward(p[1:3].sum() + p[np.array([0, 0, 3])].sum())
    np.testing.assert_array_equal(grads["p"].data, [2.0, 1.0, 1.0, 1.0])


def test_backward_requires_scalar():
    """Testa se backward de uma perda não escalar levanta UsageError."""
    p = Tensor.parameter(np.ones(3), "p")
    with pytest.raises(UsageError):
        backward(p * 2.0)


def test_duplicate_parameter_names_are_rejected():
    """Testa se dois parâmetros distintos com o mesmo nome são detectados."""
    a = Tensor.parameter(np.ones(2), "w")
    b = Tensor.parameter(np.ones(2), "w")
    with pytest.raises(ConfigError):
        backward((a + b).sum())


def test_detach_stops_gradient():
    """Testa se um tensor destacado não propaga gradiente."""
    p = Tensor.parameter(np.ones(2), "p")
    grads = backward((p.detach() * p).sum())
    np.testing.assert_array_equal(grads["p"].data, np.ones(2))


def test_float64_mode_is_scoped():
    """Testa se o modo de 64 bits vale só dentro do bloco."""
    assert default_dtype() == np.float32
    with float64_mode():
        assert Tensor(1.0).dtype == np.float64
    assert Tensor(1.0).dtype == np.float32


@pytest.mark.parametrize("seed", range(5))
def test_composite_matches_finite_differences(grad_check, seed):
    """Testa uma composição de todas as operações contra diferenças finitas."""
    rng = np.random.default_rng(70 + seed)
    x = rng.normal(size=(3, 6, 6, 2))
    target = rng.normal(size=(3, 5, 3, 2))

    def build_loss(p):
        y = ops.conv3d(Tensor(x), p["k3"], spatial_stride=1)
        y = ops.tanh(y)
        y = ops.avg_pool_channels(y, 2)
        y = ops.conv2d(y, p["k2"], stride=1, pad=0)
        y = ops.resample(ops.sigmoid(y), (5, 3))
        flat = y.mean(axis=(-3, -2))
        head = ops.dense(flat, p["w"], p["b"])
        return ops.mse(y, target) + (head * head).mean()

    grad_check(
        build_loss,
        {
            "k3": rng.normal(scale=0.3, size=(3, 3, 3, 2, 4)),
            "k2": rng.normal(scale=0.3, size=(3, 3, 2, 2)),
            "w": rng.normal(size=(2, 3)),
            "b": rng.normal(size=3),
        },
    )
