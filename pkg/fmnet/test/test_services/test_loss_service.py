import numpy as np
import pytest

from fmnet.core.errors import ConfigError, UsageError
from fmnet.core.tensor import Tensor, float64_mode
from fmnet.schemas.config import LossWeights
from fmnet.services.aux_service import resolve_paths
from fmnet.services.loss_service import (
    ObjectiveWeights,
    TargetNormalizer,
    mimic_loss,
    multi_task_loss,
    steering_loss,
    total_loss,
)


def weights(alpha=(1.0, 1.0), beta=0.2, names=("PH",)) -> ObjectiveWeights:
    return ObjectiveWeights(alpha={"speed": alpha[0], "torque": alpha[1]}, beta={n: beta for n in names})


class TestSteeringLoss:
    """Perda de direção."""

    def test_known_value(self):
        """Testa p̂=(1,3), p=(0,1): 2.5."""
        assert steering_loss(Tensor([1.0, 3.0]), np.array([0.0, 1.0])).item() == 2.5

    def test_quadratic_scaling(self):
        """Testa se dobrar os resíduos quadruplica a perda."""
        base = steering_loss(Tensor([0.5, -1.0]), np.zeros(2)).item()
        assert steering_loss(Tensor([1.0, -2.0]), np.zeros(2)).item() == pytest.approx(4 * base)

    def test_empty_batch(self):
        """Testa lote vazio."""
        with pytest.raises(UsageError):
            steering_loss(Tensor(np.zeros(0)), np.zeros(0))


class TestMultiTaskLoss:
    """Perda multitarefa ponderada por alpha."""

    def test_weighted_sum(self):
        """Testa perdas (0.5, 0.5) com alpha=(1, 1): 1.0."""
        preds = [Tensor([1.0, 0.0]), Tensor([0.0, 1.0])]
        terms, total = multi_task_loss(preds, [np.zeros(2), np.zeros(2)], [1.0, 1.0])
        assert [t.item() for t in terms] == [0.5, 0.5]
        assert total.item() == 1.0

    def test_zero_alpha(self):
        """Testa alpha nulo: soma ponderada 0."""
        _, total = multi_task_loss([Tensor([3.0]), Tensor([4.0])], [np.zeros(1), np.zeros(1)], [0.0, 0.0])
        assert total.item() == 0.0

    def test_length_mismatch(self):
        """Testa listas de tamanhos diferentes."""
        with pytest.raises(ConfigError):
            multi_task_loss([Tensor([1.0])], [np.zeros(1), np.zeros(1)], [1.0, 1.0])


class TestMimicLoss:
    """Perda de mimetismo por caminho."""

    def test_single_path_contribution(self):
        """Testa beta=0.2 com MSE bruto 2.0: contribuição 0.4."""
        terms, total = mimic_loss({"PH": Tensor([2.0, 0.0])}, {"PH": Tensor([0.0, 0.0])}, {"PH": 0.2})
        assert terms["PH"].item() == 2.0
        assert total.item() == pytest.approx(0.4)

    def test_equal_outputs_give_zero(self):
        """Testa Φ igual a Ψ em todos os caminhos."""
        x = Tensor(np.ones((2, 3)))
        _, total = mimic_loss({"PH": x, "FL": x}, {"PH": x, "FL": x}, {"PH": 0.2, "FL": 0.2})
        assert total.item() == 0.0

    def test_disabling_a_path_removes_its_term(self):
        """Testa se remover um caminho tira exatamente sua contribuição."""
        with float64_mode():
            phi = {"PH": Tensor([1.0, 2.0]), "FL": Tensor([0.5, 0.0])}
            psi = {"PH": Tensor([0.0, 0.0]), "FL": Tensor([0.0, 0.0])}
            beta = {"PH": 0.2, "FL": 0.3}
            _, both = mimic_loss(phi, psi, beta)
            _, only = mimic_loss({"PH": phi["PH"]}, {"PH": psi["PH"]}, beta)
        assert both.item() - only.item() == pytest.approx(0.3 * 0.125, abs=1e-12)

    def test_shape_mismatch(self):
        """Testa Φ e Ψ com formas diferentes."""
        with pytest.raises(ConfigError):
            mimic_loss({"PH": Tensor(np.ones(3))}, {"PH": Tensor(np.ones(4))}, {"PH": 0.2})

    def test_path_mismatch(self):
        """Testa conjuntos de caminhos divergentes."""
        with pytest.raises(ConfigError):
            mimic_loss({"PH": Tensor(np.ones(3))}, {"FL": Tensor(np.ones(3))}, {"PH": 0.2})


class TestTotalLoss:
    """Composição da perda total."""

    def test_known_total(self):
        """Testa steer=1.0, multi ponderado=1.0, mimetismo ponderado=0.4: total 2.4."""
        steer = steering_loss(Tensor([1.0, 1.0]), np.array([0.0, 2.0]))
        multi, _ = multi_task_loss([Tensor([1.0, 0.0]), Tensor([0.0, 1.0])], [np.zeros(2), np.zeros(2)], [1.0, 1.0])
        mimic, _ = mimic_loss({"PH": Tensor([2.0, 0.0])}, {"PH": Tensor([0.0, 0.0])}, {"PH": 0.2})
        breakdown = total_loss(steer, multi, mimic, weights())
        assert breakdown.steer == 1.0
        assert breakdown.weighted_multi() == 1.0
        assert breakdown.weighted_mimic() == pytest.approx(0.4)
        assert breakdown.total == pytest.approx(2.4, rel=1e-6)

    def test_zero_weights_give_steer(self):
        """Testa alpha=beta=0: total igual à perda de direção."""
        steer = steering_loss(Tensor([0.3, -0.2]), np.zeros(2))
        multi = [Tensor(5.0), Tensor(7.0)]
        breakdown = total_loss(steer, multi, {"PH": Tensor(3.0)}, weights(alpha=(0.0, 0.0), beta=0.0))
        assert breakdown.total == breakdown.steer

    def test_recomputed_total_matches(self):
        """Testa a decomposição recalculada a partir dos termos (64 bits, 1e-12)."""
        rng = np.random.default_rng(0)
        with float64_mode():
            steer = steering_loss(Tensor(rng.normal(size=8)), rng.normal(size=8))
            multi = [Tensor(rng.uniform()), Tensor(rng.uniform())]
            mimic = {"PH": Tensor(rng.uniform()), "FL": Tensor(rng.uniform())}
            breakdown = total_loss(steer, multi, mimic, weights(alpha=(0.7, 1.3), names=("PH", "FL")))
        assert abs(breakdown.recompute_total() - breakdown.total) <= 1e-12

    def test_gradient_of_total(self, grad_check):
        """Testa o gradiente do objetivo completo contra diferenças finitas."""
        rng = np.random.default_rng(1)
        target = rng.normal(size=(4, 3))
        psi = rng.normal(size=(4, 2))
        w = weights(alpha=(0.5, 2.0), beta=0.2)

        def build_loss(p):
            pred = p["pred"]
            steer = steering_loss(pred[:, 0], target[:, 0])
            multi, _ = multi_task_loss([pred[:, 1], pred[:, 2]], [target[:, 1], target[:, 2]], [0.5, 2.0])
            mimic, _ = mimic_loss({"PH": p["phi"]}, {"PH": Tensor(psi)}, w.beta)
            return total_loss(steer, multi, mimic, w).objective

        grad_check(build_loss, {"pred": rng.normal(size=(4, 3)), "phi": rng.normal(size=(4, 2))})

    def test_missing_beta(self):
        """Testa caminho de mimetismo sem beta."""
        with pytest.raises(ConfigError):
            total_loss(Tensor(1.0), [Tensor(0.0), Tensor(0.0)], {"FL": Tensor(1.0)}, weights())


class TestWeightsAndNormalizer:
    """Pesos resolvidos e normalização dos alvos."""

    def test_weights_from_config(self):
        """Testa alpha por tarefa e beta por caminho a partir da configuração."""
        config = LossWeights(alpha=[0.5, 2.0], beta={"psp": 0.1, "flow": 0.3})
        resolved = ObjectiveWeights.from_config(config, resolve_paths("udacity", ["PH", "FL"], config))
        assert resolved.alpha == {"speed": 0.5, "torque": 2.0}
        assert resolved.beta == {"PH": 0.1, "FL": 0.3}

    def test_wrong_alpha_length(self):
        """Testa alpha com número de valores diferente do número de tarefas."""
        with pytest.raises(ConfigError):
            ObjectiveWeights.from_config(LossWeights(alpha=[1.0, 1.0, 1.0]), [])

    def test_normalizer_round_trip(self):
        """Testa normalização z-score, coluna constante e serialização."""
        states = np.array([[0.1, 20.0, 1.0], [-0.1, 24.0, 1.0], [0.3, 22.0, 1.0]])
        normalizer = TargetNormalizer.fit(states)
        z = normalizer.normalize(states)
        np.testing.assert_allclose(z[:, :2].mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(z[:, :2].std(axis=0), 1.0)
        assert normalizer.std[2] == 1.0
        restored = TargetNormalizer.from_dict(normalizer.to_dict())
        np.testing.assert_allclose(restored.denormalize(z), states)

    def test_fit_on_empty(self):
        """Testa ajuste sem estados."""
        with pytest.raises(UsageError):
            TargetNormalizer.fit(np.zeros((0, 3)))
