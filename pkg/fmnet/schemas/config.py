"""Modelos de configuração do experimento (documento JSON único)."""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

Level = Literal["low", "middle", "high"]
LEVELS: tuple[str, ...] = ("low", "middle", "high")
ProviderKind = Literal["fixture", "frozen-random", "oracle"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScenarioParams(StrictModel):
    """Parâmetros do gerador procedural de estrada."""

    curvature_profile: list[float] | None = None
    num_knots: int = Field(default=4, ge=2)
    max_curvature: float = Field(default=0.02, gt=0)
    base_speed: float = Field(default=22.0, ge=0)
    speed_jitter: float = Field(default=3.0, ge=0)
    min_speed: float = Field(default=15.0, ge=0)
    lighting: float = Field(default=0.8, ge=0, le=1)
    lane_width: float = Field(default=3.6, gt=0)
    noise_amplitude: float = Field(default=0.02, ge=0)
    frame_dt: float = Field(default=0.1, gt=0)
    wheelbase: float = Field(default=2.7, gt=0)
    torque_gain: float = 5.0
    render_dims: tuple[int, int] = (64, 64)

    @model_validator(mode="after")
    def _bounded_curvature(self) -> "ScenarioParams":
        if self.curvature_profile is not None:
            if len(self.curvature_profile) < 2:
                raise ValueError("curvature_profile precisa de ao menos 2 nós")
            peak = max(abs(k) for k in self.curvature_profile)
            if peak > self.max_curvature:
                raise ValueError(
                    f"curvatura {peak} excede max_curvature {self.max_curvature}"
                )
        return self

    def mirrored(self) -> "ScenarioParams":
        if self.curvature_profile is None:
            raise ValueError("espelhamento exige curvature_profile explícito")
        return self.model_copy(update={"curvature_profile": [-k for k in self.curvature_profile]})


class MainNetConfig(StrictModel):
    block_widths: list[int] = Field(default_factory=lambda: [8, 16, 32], min_length=1)
    depth: int = Field(default=2, ge=1)
    clip_len: int = Field(default=10, ge=1)
    lstm_hidden: int = Field(default=32, ge=1)
    fc_dim: int = Field(default=32, ge=1)
    temporal_kernel: int = Field(default=3, ge=1)
    input_dims: tuple[int, int, int] = (64, 64, 3)
    use_lstm: bool = True
    tap_points: dict[str, Level] = Field(
        default_factory=lambda: {"stage1": "low", "stage2": "middle", "stage3": "high"}
    )

    @model_validator(mode="after")
    def _positive_widths(self) -> "MainNetConfig":
        if any(w < 1 for w in self.block_widths):
            raise ValueError("block_widths devem ser >= 1")
        return self


class LossWeights(StrictModel):
    alpha: list[float] = Field(default_factory=lambda: [1.0, 1.0])
    beta: dict[str, float] = Field(default_factory=lambda: {"psp": 0.2, "flow": 0.2})

    @model_validator(mode="after")
    def _non_negative(self) -> "LossWeights":
        if any(a < 0 for a in self.alpha) or any(b < 0 for b in self.beta.values()):
            raise ValueError("pesos da perda devem ser >= 0")
        return self


class MimicPath(StrictModel):
    """Um par (rede auxiliar k, nível) com dimensões alvo (w, w', c) e peso beta."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    aux_id: str
    level: Level
    target_dims: tuple[int, int, int]
    beta: float = Field(default=0.2, ge=0)
    main_tap: Level
    aux_layer: str

    @model_validator(mode="after")
    def _positive_dims(self) -> "MimicPath":
        if any(d < 1 for d in self.target_dims):
            raise ValueError(f"target_dims devem ser >= 1: {self.target_dims}")
        return self

    @property
    def spatial(self) -> tuple[int, int]:
        return self.target_dims[0], self.target_dims[1]

    @property
    def channels(self) -> int:
        return self.target_dims[2]

    @property
    def file_stem(self) -> str:
        return f"aux_{self.aux_id}_{self.level}"


class ProviderConfig(StrictModel):
    """Fontes de features auxiliares.

    `kinds` vale no treino; `generate_with` escolhe quem produz os arquivos
    `aux_<k>_<level>` gravados pelo gen-data.
    """

    kinds: dict[str, ProviderKind] = Field(
        default_factory=lambda: {"psp": "fixture", "flow": "fixture"}
    )
    generate_with: dict[str, Literal["frozen-random", "oracle"]] = Field(
        default_factory=lambda: {"psp": "oracle", "flow": "oracle"}
    )
    frozen_seed: int = 1234
    pool_group: int = Field(default=2, ge=1)


class DataConfig(StrictModel):
    train_sequences: int = Field(default=40, ge=1)
    val_sequences: int = Field(default=8, ge=1)
    clips_per_sequence: int = Field(default=5, ge=1)
    speed_threshold: float = Field(default=15.0, ge=0)
    data_dir: str | None = None


class TrainConfig(StrictModel):
    batch_size: int = Field(default=16, ge=1)
    episodes: int = Field(default=40, ge=1)
    stage1_episodes: int = Field(default=30, ge=0)
    lr_high: float = Field(default=1e-4, gt=0)
    lr_low: float = Field(default=1e-6, gt=0)
    lr_drop_after: int = Field(default=30, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weights: LossWeights = Field(default_factory=LossWeights)
    paths: list[str] = Field(default_factory=lambda: ["PH", "PM", "PL", "FH", "FM", "FL"])
    seed: int = 0

    @model_validator(mode="after")
    def _stage_fits(self) -> "TrainConfig":
        if self.stage1_episodes > self.episodes:
            raise ValueError("stage1_episodes não pode exceder episodes")
        return self


class AblationConfig(StrictModel):
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4], min_length=1)
    preset: str = "table2"


class RunConfig(StrictModel):
    preset: str = "udacity"
    scenario: ScenarioParams = Field(default_factory=ScenarioParams)
    data: DataConfig = Field(default_factory=DataConfig)
    network: MainNetConfig = Field(default_factory=MainNetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    providers: ProviderConfig = Field(default_factory=ProviderConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    out_dir: str = "runs"
