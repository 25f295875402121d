"""Treino em dois estágios com SGD com momento.

Estágio 1 otimiza apenas direção + multitarefa. No início do estágio 2 as
camadas Φ são criadas e a perda de mimetismo entra no objetivo. As sequências
são embaralhadas a cada episódio e avançam em lotes de `batch_size`
sequências; o estado do LSTM e a última predição passam de um clipe para o
seguinte da mesma sequência sem gradiente.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fmnet.core.errors import ConfigError, UsageError
from fmnet.core.tensor import GradientMap, Tensor, backward
from fmnet.schemas.config import MimicPath, RunConfig, TrainConfig
from fmnet.schemas.records import TASKS, EvalReport, LossBreakdown, LstmState
from fmnet.services import aux_service, loss_service, network_service
from fmnet.services.data_service import ClipDataset
from fmnet.services.loss_service import ObjectiveWeights, TargetNormalizer
from fmnet.services.network_service import MainNet

logger = logging.getLogger(__name__)

Evaluator = Callable[[MainNet, TargetNormalizer], EvalReport]


def lr_at(episode: int, config: TrainConfig | None = None) -> float:
    """Taxa de aprendizado do episódio (contado a partir de 1)."""
    config = config or TrainConfig()
    if episode < 1:
        raise UsageError(f"episódios começam em 1, recebeu {episode}")
    return config.lr_high if episode <= config.lr_drop_after else config.lr_low


class MomentumSGD:
    """v <- momentum * v + g; p <- p - lr * v."""

    def __init__(self, momentum: float = 0.9) -> None:
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: GradientMap, lr: float) -> bool:
        """Aplica um passo; devolve False (sem alterar nada) se algum gradiente não for finito."""
        bad = [name for name, g in grads.items() if not np.all(np.isfinite(g.data))]
        if bad:
            logger.warning("Gradiente não finito em %s; passo descartado", bad)
            return False
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            velocity = self.velocity.get(name)
            velocity = grad.data.copy() if velocity is None else self.momentum * velocity + grad.data
            self.velocity[name] = velocity
            param.data = (param.data - lr * velocity).astype(param.dtype)
        return True

    def state(self) -> dict:
        return {"kind": "momentum-sgd", "momentum": self.momentum}


def optimizer_step(
    params: dict[str, Tensor], grads: GradientMap, lr: float, optimizer: MomentumSGD | None = None
) -> dict[str, Tensor]:
    """Um passo de SGD com momento 0.9.

    Sem `optimizer` a velocidade começa do zero a cada chamada; passe o mesmo
    `MomentumSGD` entre passos para acumulá-la.
    """
    (optimizer or MomentumSGD(momentum=0.9)).step(params, grads, lr)
    return params


METRIC_BASE = ["step", "stage", "lr", "steer"] + [f"multi_{t}" for t in TASKS]


class MetricsLog:
    """CSV com uma linha por passo de otimização."""

    def __init__(self, path: Path, paths: list[MimicPath]) -> None:
        self.path = path
        self.mimic_names = [p.name for p in paths]
        self.columns = METRIC_BASE + [f"mimic_{n}" for n in self.mimic_names] + ["total"]
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(self.columns)

    def append(self, step: int, stage: int, lr: float, loss: LossBreakdown) -> None:
        row = [step, stage, repr(lr), repr(loss.steer)]
        row += [repr(loss.multi[t]) for t in TASKS]
        row += [repr(loss.mimic.get(n, 0.0)) for n in self.mimic_names]
        row.append(repr(loss.total))
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(row)


@dataclass
class TrainResult:
    net: MainNet
    normalizer: TargetNormalizer
    checkpoint_dir: Path
    metrics_path: Path
    losses: list[float] = field(default_factory=list)
    skipped_steps: int = 0
    reports: dict[str, EvalReport] = field(default_factory=dict)
    phi: aux_service.PhiTransform | None = None


def stage_of(episode: int, config: TrainConfig) -> int:
    return 1 if episode <= config.stage1_episodes else 2


def sequence_groups(dataset: ClipDataset, batch_size: int, rng: np.random.Generator) -> list[list[str]]:
    """Embaralha as sequências e as agrupa em lotes de até `batch_size`."""
    sequences = list(dataset.sequences)
    order = rng.permutation(len(sequences))
    shuffled = [sequences[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


class Trainer:
    def __init__(
        self,
        run: RunConfig,
        out_dir: str | Path,
        evaluator: Evaluator | None = None,
    ) -> None:
        self.run = run
        self.config = run.train
        self.out_dir = Path(out_dir)
        self.evaluator = evaluator
        self.paths = aux_service.resolve_paths(run.preset, self.config.paths, self.config.weights)
        self.weights = ObjectiveWeights.from_config(self.config.weights, self.paths)
        self.providers = aux_service.build_providers(self.paths, run.providers) if self.paths else None
        self.optimizer = MomentumSGD(self.config.momentum)
        self.phi: aux_service.PhiTransform | None = None
        self.step_count = 0
        self.skipped = 0
        self.losses: list[float] = []

    def _check_targets(self, dataset: ClipDataset) -> None:
        if self.providers is None:
            return
        for clip_id in dataset.clip_ids:
            missing = self.providers.missing(dataset.load(clip_id))
            if missing:
                raise ConfigError(f"alvos auxiliares ausentes em {clip_id}: {missing}")

    def _params(self, net: MainNet) -> dict[str, Tensor]:
        params = dict(net.parameters())
        if self.phi is not None:
            params.update(self.phi.parameters())
        return params

    def _start_stage2(self, net: MainNet) -> None:
        channels = {level: shape[2] for level, shape in network_service.tap_shapes(net.config).items()}
        seed = int(np.random.SeedSequence([self.config.seed, 2]).generate_state(1)[0])
        self.phi = aux_service.PhiTransform.create(self.paths, channels, seed)
        logger.info("Estágio 2: Φ criado para %s; estado do LSTM reinicia a cada sequência",
                    [p.name for p in self.paths])

    def _batch_loss(self, net: MainNet, clips, normalizer: TargetNormalizer, stage: int,
                    prev_state: np.ndarray, lstm: LstmState):
        frames = np.stack([c.frames for c in clips])
        targets = normalizer.normalize(np.stack([c.states for c in clips]))
        output = net.forward(frames, prev_state=prev_state, lstm_state=lstm)
        pred = output.prediction
        steer = loss_service.steering_loss(pred[..., 0], targets[..., 0])
        multi, _ = loss_service.multi_task_loss(
            [pred[..., i + 1] for i in range(len(TASKS))],
            [targets[..., i + 1] for i in range(len(TASKS))],
            [self.weights.alpha[t] for t in TASKS],
        )
        mimic: dict[str, Tensor] = {}
        if stage == 2 and self.phi is not None:
            features = [self.providers.provide_features(c) for c in clips]
            phi_out, psi_out = {}, {}
            for path in self.paths:
                phi_out[path.name] = self.phi(output.taps[path.main_tap], path)
                psi_out[path.name] = aux_service.psi_transform(np.stack([f[path.name] for f in features]), path)
            mimic, _ = loss_service.mimic_loss(phi_out, psi_out, self.weights.beta)
        loss = loss_service.total_loss(steer, multi, mimic, self.weights)
        return loss, output

    def _episode(self, net: MainNet, dataset: ClipDataset, normalizer: TargetNormalizer,
                 episode: int, rng: np.random.Generator, log: MetricsLog) -> None:
        stage = stage_of(episode, self.config)
        lr = lr_at(episode, self.config)
        for group in sequence_groups(dataset, self.config.batch_size, rng):
            lanes = [dataset.sequences[seq] for seq in group]
            prev_state = np.zeros((len(lanes), network_service.STATE_DIM))
            lstm = LstmState.zeros(len(lanes), net.config.lstm_hidden, dtype=net.params["head.weight"].dtype)
            for position in range(max(len(ids) for ids in lanes)):
                rows = np.array([i for i, ids in enumerate(lanes) if position < len(ids)])
                clips = [dataset.load(lanes[i][position]) for i in rows]
                loss, output = self._batch_loss(
                    net, clips, normalizer, stage, prev_state[rows], lstm.select(rows)
                )
                grads = backward(loss.objective)
                self.step_count += 1
                if self.optimizer.step(self._params(net), grads, lr):
                    self.losses.append(loss.total)
                    log.append(self.step_count, stage, lr, loss)
                else:
                    self.skipped += 1
                prev_state[rows] = output.last_state
                lstm.h[rows] = output.lstm_state.h
                lstm.c[rows] = output.lstm_state.c

    def _manifest(self, net: MainNet, normalizer: TargetNormalizer, episode: int) -> dict:
        return {
            "network": net.config.model_dump(mode="json"),
            "seed": self.config.seed,
            "episode": episode,
            "steps": self.step_count,
            "normalizer": normalizer.to_dict(),
            "optimizer": self.optimizer.state(),
            "paths": [p.name for p in self.paths],
            "preset": self.run.preset,
        }

    def _checkpoint(self, name: str, net: MainNet, normalizer: TargetNormalizer, episode: int,
                    reports: dict[str, EvalReport]) -> Path:
        directory = network_service.save_checkpoint(
            self.out_dir / "checkpoints" / name, self._params(net), self._manifest(net, normalizer, episode)
        )
        if self.evaluator is not None:
            report = self.evaluator(net, normalizer)
            reports[name] = report
            (directory / "eval.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
            logger.info("Validação (%s): MAE %.4f°, RMSE %.4f°", name, report.mae, report.rmse)
        return directory

    def train(self, dataset: ClipDataset) -> TrainResult:
        if len(dataset) == 0:
            raise UsageError("conjunto de treino vazio")
        self._check_targets(dataset)
        normalizer = TargetNormalizer.fit(dataset.states())
        net = network_service.build(self.run.network, self.config.seed)
        rng = np.random.default_rng(self.config.seed)
        log = MetricsLog(self.out_dir / "metrics.csv", self.paths)
        reports: dict[str, EvalReport] = {}

        logger.info("Treino: %d episódios (%d no estágio 1), %d sequências, caminhos %s",
                    self.config.episodes, self.config.stage1_episodes, len(dataset.sequences),
                    [p.name for p in self.paths])
        for episode in range(1, self.config.episodes + 1):
            if stage_of(episode, self.config) == 2 and self.phi is None and self.paths:
                self._start_stage2(net)
            self._episode(net, dataset, normalizer, episode, rng, log)
            if self.losses:
                logger.info("Episódio %d: perda %.6f", episode, self.losses[-1])
            if episode == self.config.stage1_episodes < self.config.episodes:
                self._checkpoint("stage1", net, normalizer, episode, reports)

        directory = self._checkpoint("final", net, normalizer, self.config.episodes, reports)
        if self.skipped:
            logger.warning("%d passos descartados por gradiente não finito", self.skipped)
        return TrainResult(
            net=net,
            normalizer=normalizer,
            checkpoint_dir=directory,
            metrics_path=log.path,
            losses=self.losses,
            skipped_steps=self.skipped,
            reports=reports,
            phi=self.phi,
        )


def train(
    run: RunConfig, dataset: ClipDataset, out_dir: str | Path, evaluator: Evaluator | None = None
) -> TrainResult:
    return Trainer(run, out_dir, evaluator).train(dataset)
