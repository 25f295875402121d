"""Registros de execução: estados do veículo, saídas da rede, perdas e relatórios."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from fmnet.core.tensor import Tensor
from fmnet.schemas.config import ScenarioParams

STATE_FIELDS: tuple[str, ...] = ("angle", "speed", "torque")
TASKS: tuple[str, ...] = ("speed", "torque")


@dataclass(frozen=True)
class VehicleState:
    """Ângulo de esterçamento (rad), velocidade (m/s) e torque do volante (N·m)."""

    angle: float
    speed: float
    torque: float

    def __post_init__(self) -> None:
        if self.speed < 0:
            raise ValueError(f"velocidade negativa: {self.speed}")

    def as_array(self) -> np.ndarray:
        return np.array([self.angle, self.speed, self.torque])

    @classmethod
    def from_array(cls, values: np.ndarray) -> "VehicleState":
        angle, speed, torque = (float(v) for v in values)
        return cls(angle=angle, speed=speed, torque=torque)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden: int, dtype=np.float32) -> "LstmState":
        return cls(np.zeros((batch, hidden), dtype=dtype), np.zeros((batch, hidden), dtype=dtype))

    def select(self, rows: np.ndarray) -> "LstmState":
        return LstmState(self.h[rows], self.c[rows])


@dataclass
class NetOutput:
    """Predições por quadro (B, N, 3) em unidades normalizadas, taps e_j e estado do LSTM."""

    prediction: Tensor
    taps: dict[str, Tensor]
    lstm_state: LstmState

    @property
    def last_state(self) -> np.ndarray:
        return self.prediction.data[:, -1, :]


@dataclass
class SceneTrack:
    """Trajetória analítica de uma sequência: pose no mundo e cinemática por quadro."""

    x: np.ndarray
    z: np.ndarray
    heading: np.ndarray
    curvature: np.ndarray
    speed: np.ndarray
    distance: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def slice(self, start: int, stop: int) -> "SceneTrack":
        return SceneTrack(
            *(getattr(self, name)[start:stop] for name in ("x", "z", "heading", "curvature", "speed", "distance"))
        )

    def as_array(self) -> np.ndarray:
        return np.stack([self.x, self.z, self.heading, self.curvature, self.speed, self.distance], axis=-1)

    @classmethod
    def from_array(cls, values: np.ndarray) -> "SceneTrack":
        return cls(*(values[:, i] for i in range(6)))


@dataclass
class Clip:
    """N quadros em [-1, 1], N estados verdadeiros e alvos auxiliares por caminho."""

    clip_id: str
    frames: np.ndarray
    states: np.ndarray
    seed: int
    sequence_id: str
    index: int
    aux_targets: dict[str, np.ndarray] = field(default_factory=dict)
    scene: SceneTrack | None = None
    params: ScenarioParams | None = None
    directory: Path | None = None

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass
class LossBreakdown:
    """Decomposição da perda total em direção, multitarefa e mimetismo."""

    steer: float
    multi: dict[str, float]
    mimic: dict[str, float]
    alpha: dict[str, float]
    beta: dict[str, float]
    total: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def recompute_total(self) -> float:
        total = self.steer
        for task, value in self.multi.items():
            total = total + self.alpha[task] * value
        for path, value in self.mimic.items():
            total = total + self.beta[path] * value
        return total

    def weighted_multi(self) -> float:
        return sum(self.alpha[t] * v for t, v in self.multi.items())

    def weighted_mimic(self) -> float:
        return sum(self.beta[p] * v for p, v in self.mimic.items())


class ResidualSummary(BaseModel):
    clips: int
    frames: int
    mean_abs_min: float
    mean_abs_median: float
    mean_abs_max: float


class EvalReport(BaseModel):
    mae: float
    rmse: float
    unit: str = "deg"
    residuals: ResidualSummary
    fingerprint: str
