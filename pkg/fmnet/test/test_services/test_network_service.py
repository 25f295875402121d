import tempfile

import numpy as np
import pytest

from fmnet.core.errors import ConfigError, DataError, UsageError
from fmnet.core.tensor import Tensor, backward, float64_mode
from fmnet.core import ops
from fmnet.services import network_service
from fmnet.services.network_service import (
    build,
    collapse,
    inflate,
    inflation_error,
    load_2d_weights,
    lstm_step,
    tap_shapes,
)


def _sigmoid(v: float) -> float:
    return 1.0 / (1.0 + np.exp(-v))


class TestInflation:
    """Inicialização 2D -> 3D."""

    def test_scalar_kernel_splits_evenly(self):
        """Testa kernel escalar 0.6 com w_t=3: três fatias de 0.2."""
        weights = inflate(np.full((1, 1, 1, 1), 0.6), 3)
        assert weights.shape == (3, 1, 1, 1, 1)
        np.testing.assert_allclose(weights.ravel(), [0.2, 0.2, 0.2])

    def test_wt1_keeps_weights(self):
        """Testa w_t=1: pesos inalterados."""
        w = np.random.default_rng(0).normal(size=(3, 3, 2, 4))
        np.testing.assert_array_equal(inflate(w, 1)[0], w)

    def test_even_wt_is_rejected(self):
        """Testa w_t par."""
        with pytest.raises(ConfigError):
            inflate(np.ones((3, 3, 1, 1)), 2)

    def test_collapse_recovers_dyadic_weights(self):
        """Testa se a soma temporal de um kernel inflado devolve o kernel 2D (valores exatos)."""
        w = 3.0 * np.array([0.5, -0.25, 0.125, 1.0]).reshape(1, 1, 2, 2)
        np.testing.assert_array_equal(collapse(inflate(w, 3)), w)

    def test_inflated_network_matches_2d_network(self, tiny_net_config):
        """Testa a equivalência nos quadros interiores de um clipe constante (32 bits)."""
        net = build(tiny_net_config, seed=5)
        frame = np.random.default_rng(1).uniform(-1, 1, size=(16, 16, 3))
        assert inflation_error(net, frame) <= 1e-5

    @pytest.mark.parametrize("seed", range(20))
    def test_arbitrary_2d_weights(self, tiny_net_config, seed):
        """Testa a equivalência com a rede 2D montada com os próprios kernels 2D de origem."""
        rng = np.random.default_rng(seed)
        with float64_mode():
            net = build(tiny_net_config, seed=0)
            kernels = {
                spec.name: rng.uniform(-0.3, 0.3, size=(spec.k, spec.k, spec.cin, spec.cout)) for spec in net.specs
            }
            load_2d_weights(net, kernels)
            for name, kernel in net.kernels_2d().items():
                np.testing.assert_array_equal(kernel.data, kernels[name])
            assert inflation_error(net, rng.uniform(-1, 1, size=(16, 16, 3))) <= 1e-10

    def test_inflation_without_normalization_fails(self, tiny_net_config, monkeypatch):
        """Testa se replicar o kernel sem dividir por w_t é detectado."""
        monkeypatch.setattr(
            network_service, "inflate", lambda w, w_t: np.repeat(np.asarray(w)[None], w_t, axis=0)
        )
        frame = np.random.default_rng(4).uniform(-1, 1, size=(16, 16, 3))
        with float64_mode():
            net = build(tiny_net_config, seed=1)
            assert inflation_error(net, frame) > 1e-3

    def test_restored_network_uses_temporal_sum(self, tiny_net_config):
        """Testa a referência 2D de uma rede restaurada: soma temporal dos kernels 3D."""
        net = build(tiny_net_config, seed=2)
        restored = network_service.restore(net.state_dict(), {"network": tiny_net_config.model_dump(), "seed": 9})
        assert restored.source_2d is None
        for spec in restored.specs:
            np.testing.assert_array_equal(
                restored.kernels_2d()[spec.name].data, collapse(net.params[f"{spec.name}.weight"].data)
            )


class TestLstm:
    """Célula LSTM."""

    def test_zero_weights_give_zero_hidden(self):
        """Testa pesos e vieses nulos: h' = 0 para qualquer entrada."""
        h, c = lstm_step(
            Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))),
            Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)),
        )
        np.testing.assert_array_equal(h.data, np.zeros((1, 2)))

    def test_two_unit_cell_matches_scalar_formula(self):
        """Testa uma célula de 2 unidades contra as equações escalares."""
        rng = np.random.default_rng(3)
        x, h0, c0 = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
        wx, wh, b = rng.normal(size=(3, 8)), rng.normal(size=(2, 8)), rng.normal(size=8)
        with float64_mode():
            h, c = lstm_step(Tensor(x[None]), Tensor(h0[None]), Tensor(c0[None]), Tensor(wx), Tensor(wh), Tensor(b))
        for u in range(2):
            def gate(offset: int) -> float:
                col = offset * 2 + u
                return sum(x[i] * wx[i, col] for i in range(3)) + sum(h0[i] * wh[i, col] for i in range(2)) + b[col]

            i_g, f_g, o_g, g_g = _sigmoid(gate(0)), _sigmoid(gate(1)), _sigmoid(gate(2)), np.tanh(gate(3))
            c_expected = f_g * c0[u] + i_g * g_g
            assert c.data[0, u] == pytest.approx(c_expected, abs=1e-6)
            assert h.data[0, u] == pytest.approx(o_g * np.tanh(c_expected), abs=1e-6)

    def test_dimension_mismatch(self):
        """Testa pesos incompatíveis com o estado oculto."""
        with pytest.raises(ConfigError):
            lstm_step(
                Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))),
                Tensor(np.zeros((3, 12))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)),
            )

    def test_three_chained_steps_gradient(self, grad_check):
        """Testa o gradiente através de três passos encadeados."""
        rng = np.random.default_rng(4)
        xs = rng.normal(size=(3, 2, 3))

        def build_loss(p):
            h, c = Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2)))
            for t in range(3):
                h, c = lstm_step(Tensor(xs[t]), h, c, p["wx"], p["wh"], p["b"])
            return (h * h).sum() + c.mean()

        grad_check(
            build_loss,
            {"wx": rng.normal(scale=0.5, size=(3, 8)), "wh": rng.normal(scale=0.5, size=(2, 8)), "b": rng.normal(size=8)},
        )


class TestMainNet:
    """Construção e passo à frente da rede principal."""

    def test_same_seed_is_bit_identical(self, tiny_net_config):
        """Testa determinismo da inicialização e diferença entre seeds."""
        a, b, c = build(tiny_net_config, 1), build(tiny_net_config, 1), build(tiny_net_config, 2)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
        assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)

    def test_two_taps_is_config_error(self, tiny_net_config):
        """Testa configuração com apenas dois taps."""
        config = tiny_net_config.model_copy(update={"tap_points": {"stage1": "low", "stage3": "high"}})
        with pytest.raises(ConfigError):
            build(config, 0)

    def test_unknown_tap_layer(self, tiny_net_config):
        """Testa tap apontando para layer inexistente."""
        config = tiny_net_config.model_copy(
            update={"tap_points": {"stage1": "low", "stage2": "middle", "stage9": "high"}}
        )
        with pytest.raises(ConfigError):
            build(config, 0)

    def test_forward_shapes_and_taps(self, tiny_net_config):
        """Testa predições por quadro e taps nos três níveis com as formas previstas."""
        net = build(tiny_net_config, 0)
        clip = np.random.default_rng(5).uniform(-1, 1, size=(2, 3, 16, 16, 3))
        out = net.forward(clip)
        assert out.prediction.shape == (2, 3, 3)
        assert set(out.taps) == {"low", "middle", "high"}
        for level, (h, w, c) in tap_shapes(tiny_net_config).items():
            assert out.taps[level].shape == (2, 3, h, w, c)
        assert out.lstm_state.h.shape == (2, tiny_net_config.lstm_hidden)

    def test_forward_is_pure(self, tiny_net_config):
        """Testa se duas chamadas idênticas dão saídas idênticas."""
        net = build(tiny_net_config, 0)
        clip = np.random.default_rng(6).uniform(-1, 1, size=(3, 16, 16, 3))
        prev = np.array([[0.1, -0.2, 0.3]])
        first = net.forward(clip, prev_state=prev)
        second = net.forward(clip, prev_state=prev)
        np.testing.assert_array_equal(first.prediction.data, second.prediction.data)
        np.testing.assert_array_equal(first.lstm_state.c, second.lstm_state.c)

    def test_previous_state_changes_prediction(self, tiny_net_config):
        """Testa se o estado anterior entra na predição do primeiro quadro."""
        net = build(tiny_net_config, 0)
        clip = np.zeros((3, 16, 16, 3))
        a = net.forward(clip, prev_state=np.zeros((1, 3))).prediction.data
        b = net.forward(clip, prev_state=np.ones((1, 3))).prediction.data
        assert not np.allclose(a[0, 0], b[0, 0])

    def test_forward_rejects_bad_shapes(self, tiny_net_config):
        """Testa clipe de tamanho errado e estado anterior não finito."""
        net = build(tiny_net_config, 0)
        with pytest.raises(UsageError):
            net.forward(np.zeros((4, 16, 16, 3)))
        with pytest.raises(UsageError):
            net.forward(np.zeros((3, 16, 16, 3)), prev_state=np.array([[np.nan, 0.0, 0.0]]))

    def test_without_lstm(self, tiny_net_config):
        """Testa a variante sem LSTM: cabeça densa direto sobre as features."""
        config = tiny_net_config.model_copy(update={"use_lstm": False})
        net = build(config, 0)
        assert "lstm.wx" not in net.params
        assert net.forward(np.zeros((3, 16, 16, 3))).prediction.shape == (1, 3, 3)

    def test_gradient_reaches_every_parameter(self, tiny_net_config):
        """Testa se a perda sobre as predições gera gradiente para todos os parâmetros."""
        net = build(tiny_net_config, 0)
        clip = np.random.default_rng(7).uniform(-1, 1, size=(1, 3, 16, 16, 3))
        out = net.forward(clip)
        grads = backward(ops.mse(out.prediction, np.ones((1, 3, 3))))
        assert set(grads) == set(net.params)
        for name, grad in grads.items():
            assert grad.shape == net.params[name].shape


class TestCheckpoint:
    """Gravação e restauração de checkpoints."""

    def test_round_trip(self, tiny_net_config):
        """Testa se os parâmetros restaurados são idênticos e o manifesto lista formas."""
        net = build(tiny_net_config, 9)
        with tempfile.TemporaryDirectory() as tmp:
            manifest = {"network": tiny_net_config.model_dump(mode="json"), "seed": 9}
            network_service.save_checkpoint(tmp, net.params, manifest)
            arrays, loaded = network_service.load_checkpoint(tmp)
            restored = network_service.restore(arrays, loaded)
        assert {e["name"] for e in loaded["parameters"]} == set(net.params)
        for name, param in net.params.items():
            np.testing.assert_array_equal(restored.params[name].data, param.data)

    def test_missing_manifest(self):
        """Testa diretório sem manifesto."""
        with tempfile.TemporaryDirectory() as tmp:
            with pytest.raises(DataError):
                network_service.load_checkpoint(tmp)
