import numpy as np
import pytest

from fmnet.core.tensor import Tensor, backward, float64_mode
from fmnet.schemas.config import (
    DataConfig,
    MainNetConfig,
    ProviderConfig,
    RunConfig,
    ScenarioParams,
    TrainConfig,
)


@pytest.fixture
def tiny_net_config() -> MainNetConfig:
    """Rede mínima: três estágios de um bloco sobre quadros 16x16."""
    return MainNetConfig(
        block_widths=[4, 6, 8],
        depth=1,
        clip_len=3,
        lstm_hidden=5,
        fc_dim=6,
        temporal_kernel=3,
        input_dims=(16, 16, 3),
    )


@pytest.fixture
def tiny_scenario() -> ScenarioParams:
    return ScenarioParams(render_dims=(16, 16))


@pytest.fixture
def tiny_run(tiny_net_config, tiny_scenario) -> RunConfig:
    """Experimento completo em miniatura com provedores oracle (sem arquivos)."""
    return RunConfig(
        scenario=tiny_scenario,
        data=DataConfig(train_sequences=2, val_sequences=1, clips_per_sequence=2),
        network=tiny_net_config,
        train=TrainConfig(
            batch_size=2, episodes=2, stage1_episodes=1, lr_drop_after=1, paths=["PH", "FL"], seed=3
        ),
        providers=ProviderConfig(kinds={"psp": "oracle", "flow": "oracle"}),
    )


def numeric_gradient(loss_fn, array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Diferenças centrais de `loss_fn()` em relação a cada elemento de `array` (alterado in-place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + eps
        plus = loss_fn()
        array[idx] = original - eps
        minus = loss_fn()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def assert_gradients_match(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-4, floor: float = 1e-8):
    err = np.abs(analytic - numeric)
    ok = (err <= floor) | (err / (np.abs(numeric) + 1e-8) <= rtol)
    assert ok.all(), f"pior erro {err.max():.3e} em {np.unravel_index(err.argmax(), err.shape)}"


@pytest.fixture
def grad_check():
    """Compara o gradiente da fita com diferenças finitas em 64 bits.

    Uso: grad_check(build_loss, {"nome": array}), onde build_loss(params) monta
    a perda escalar a partir de parâmetros Tensor com esses nomes.
    """

    def check(build_loss, arrays: dict[str, np.ndarray]) -> None:
        with float64_mode():
            arrays = {name: np.asarray(a, dtype=np.float64).copy() for name, a in arrays.items()}
            params = {name: Tensor.parameter(a, name) for name, a in arrays.items()}
            grads = backward(build_loss(params))
            for name, param in params.items():

                def loss_value() -> float:
                    probe = {n: Tensor.parameter(p.data, n) for n, p in params.items()}
                    return build_loss(probe).item()

                numeric = numeric_gradient(loss_value, param.data)
                assert_gradients_match(grads[name].data, numeric)

    return check
