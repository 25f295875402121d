"""Perdas de treino: direção, multitarefa (velocidade, torque) e mimetismo de features."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from fmnet.core import ops
from fmnet.core.errors import ConfigError, UsageError
from fmnet.core.tensor import Tensor
from fmnet.schemas.config import LossWeights, MimicPath
from fmnet.schemas.records import STATE_FIELDS, TASKS, LossBreakdown

logger = logging.getLogger(__name__)


@dataclass
class TargetNormalizer:
    """Padronização z-score dos três alvos com estatísticas do conjunto de treino."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray) -> "TargetNormalizer":
        states = np.asarray(states, dtype=np.float64).reshape(-1, len(STATE_FIELDS))
        if states.shape[0] == 0:
            raise UsageError("impossível ajustar a normalização sem estados")
        std = states.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        return cls(mean=states.mean(axis=0), std=std)

    @classmethod
    def identity(cls) -> "TargetNormalizer":
        return cls(mean=np.zeros(len(STATE_FIELDS)), std=np.ones(len(STATE_FIELDS)))

    def normalize(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, body: dict[str, list[float]]) -> "TargetNormalizer":
        return cls(mean=np.asarray(body["mean"], dtype=np.float64), std=np.asarray(body["std"], dtype=np.float64))


@dataclass
class ObjectiveWeights:
    """Pesos resolvidos: alpha por tarefa auxiliar e beta por caminho de mimetismo."""

    alpha: dict[str, float]
    beta: dict[str, float]

    @classmethod
    def from_config(cls, weights: LossWeights, paths: list[MimicPath]) -> "ObjectiveWeights":
        if len(weights.alpha) != len(TASKS):
            raise ConfigError(f"alpha deve ter {len(TASKS)} valores ({TASKS}), recebeu {weights.alpha}")
        return cls(alpha=dict(zip(TASKS, weights.alpha)), beta={p.name: p.beta for p in paths})


def steering_loss(prediction: Tensor, target: np.ndarray | Tensor) -> Tensor:
    """MSE do ângulo sobre todos os quadros do lote."""
    if prediction.numel == 0:
        raise UsageError("lote vazio na perda de direção")
    return ops.mse(prediction, target)


def multi_task_loss(
    predictions: list[Tensor], targets: list[np.ndarray | Tensor], alpha: list[float]
) -> tuple[list[Tensor], Tensor]:
    """Perdas por tarefa e a soma ponderada por alpha."""
    if not (len(predictions) == len(targets) == len(alpha)):
        raise ConfigError(
            f"multitarefa com tamanhos diferentes: {len(predictions)} predições, "
            f"{len(targets)} alvos, {len(alpha)} pesos"
        )
    terms = [ops.mse(p, t) for p, t in zip(predictions, targets)]
    total = Tensor.wrap(np.zeros((), dtype=predictions[0].dtype)) if terms else Tensor(0.0)
    for term, weight in zip(terms, alpha):
        total = total + term * weight
    return terms, total


def mimic_loss(
    phi_outputs: dict[str, Tensor], psi_outputs: dict[str, Tensor], beta: dict[str, float]
) -> tuple[dict[str, Tensor], Tensor]:
    """MSE entre Φ(e_j) e Ψ(f_k^j) por caminho, e a soma ponderada por beta."""
    if set(phi_outputs) != set(psi_outputs):
        raise ConfigError(
            f"caminhos divergentes entre Φ {sorted(phi_outputs)} e Ψ {sorted(psi_outputs)}"
        )
    terms: dict[str, Tensor] = {}
    for name, phi in phi_outputs.items():
        psi = psi_outputs[name]
        if phi.shape != psi.shape:
            raise ConfigError(f"{name}: Φ {phi.shape} e Ψ {psi.shape} com formas diferentes")
        terms[name] = ops.mse(phi, psi)
    total = Tensor(0.0)
    for name, term in terms.items():
        total = total + term * beta[name]
    return terms, total


def total_loss(
    steer: Tensor, multi: list[Tensor], mimic: dict[str, Tensor], weights: ObjectiveWeights
) -> LossBreakdown:
    """Combina os termos: L_steer + Σ alpha_i L_multi,i + Σ beta_k L_mimic,k.

    A soma segue a mesma ordem de `LossBreakdown.recompute_total`, de modo que o
    total registrado é reproduzível a partir dos termos.
    """
    if len(multi) != len(weights.alpha):
        raise ConfigError(f"esperado {len(weights.alpha)} termos multitarefa, recebeu {len(multi)}")
    missing = [name for name in mimic if name not in weights.beta]
    if missing:
        raise ConfigError(f"beta ausente para os caminhos {missing}")

    objective = steer
    for task, term in zip(weights.alpha, multi):
        objective = objective + term * weights.alpha[task]
    for name, term in mimic.items():
        objective = objective + term * weights.beta[name]

    breakdown = LossBreakdown(
        steer=float(steer.item()),
        multi={task: float(term.item()) for task, term in zip(weights.alpha, multi)},
        mimic={name: float(term.item()) for name, term in mimic.items()},
        alpha=dict(weights.alpha),
        beta={name: weights.beta[name] for name in mimic},
        total=float(objective.item()),
        objective=objective,
    )
    if not np.isfinite(breakdown.total):
        logger.warning("Perda total não finita: %s", breakdown)
    return breakdown
