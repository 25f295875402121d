"""Avaliação (MAE/RMSE do ângulo em graus), ablação de caminhos e exportação de embeddings."""

from __future__ import annotations

import asyncio
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from fmnet.core.config import settings
from fmnet.core.container import write_tensor
from fmnet.core.errors import ConfigError, UsageError
from fmnet.schemas.config import LEVELS, RunConfig
from fmnet.schemas.records import EvalReport, LstmState, ResidualSummary
from fmnet.services import network_service, train_service
from fmnet.services.data_service import ClipDataset
from fmnet.services.loss_service import TargetNormalizer
from fmnet.services.network_service import MainNet

logger = logging.getLogger(__name__)

ABLATION_PRESETS: dict[str, list[tuple[str, list[str]]]] = {
    "table2": [
        ("Without feat. mimick", []),
        ("PH + FH", ["PH", "FH"]),
        ("PM + FM", ["PM", "FM"]),
        ("PL + FL", ["PL", "FL"]),
        ("PH + PM + PL", ["PH", "PM", "PL"]),
        ("FH + FM + FL", ["FH", "FM", "FL"]),
        ("With full feat. mimick", ["PH", "PM", "PL", "FH", "FM", "FL"]),
    ],
    "single": [(name, [name]) for name in ("PH", "PM", "PL", "FH", "FM", "FL")],
}


def _pair(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.size == 0:
        raise UsageError("métrica sobre conjunto vazio")
    if pred.shape != truth.shape:
        raise UsageError(f"predições {pred.shape} e verdade {truth.shape} com tamanhos diferentes")
    return pred, truth


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def config_fingerprint(run: RunConfig, seed: int | None = None) -> str:
    body = run.model_dump(mode="json")
    if seed is not None:
        body["seed"] = seed
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode("utf-8")).hexdigest()


def run_sequences(net: MainNet, dataset: ClipDataset, batch_size: int, visit) -> None:
    """Percorre o conjunto em ordem, encadeando o estado de cada sequência entre clipes.

    `visit(clips, output)` é chamado para cada lote de clipes alinhados.
    """
    sequences = list(dataset.sequences.values())
    for start in range(0, len(sequences), batch_size):
        lanes = sequences[start:start + batch_size]
        prev_state = np.zeros((len(lanes), network_service.STATE_DIM))
        lstm = LstmState.zeros(len(lanes), net.config.lstm_hidden, dtype=net.params["head.weight"].dtype)
        for position in range(max(len(ids) for ids in lanes)):
            rows = np.array([i for i, ids in enumerate(lanes) if position < len(ids)])
            clips = [dataset.load(lanes[i][position]) for i in rows]
            output = net.forward(
                np.stack([c.frames for c in clips]), prev_state=prev_state[rows], lstm_state=lstm.select(rows)
            )
            visit(clips, output)
            prev_state[rows] = output.last_state
            lstm.h[rows] = output.lstm_state.h
            lstm.c[rows] = output.lstm_state.c


def predict_angles(
    net: MainNet, normalizer: TargetNormalizer, dataset: ClipDataset, batch_size: int = 16
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Ângulo previsto e verdadeiro (rad) por clipe."""
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def visit(clips, output) -> None:
        states = normalizer.denormalize(output.prediction.data)
        for clip, pred in zip(clips, states):
            out[clip.clip_id] = (pred[:, 0], np.asarray(clip.states[:, 0], dtype=np.float64))

    run_sequences(net, dataset, batch_size, visit)
    return out


def evaluate(
    net: MainNet,
    normalizer: TargetNormalizer,
    dataset: ClipDataset,
    fingerprint: str = "",
    batch_size: int = 16,
) -> EvalReport:
    """MAE e RMSE do ângulo de esterçamento em graus sobre todos os quadros do conjunto."""
    if len(dataset) == 0:
        raise UsageError("conjunto de avaliação vazio")
    per_clip = predict_angles(net, normalizer, dataset, batch_size)
    pred = np.degrees(np.concatenate([p for p, _ in per_clip.values()]))
    truth = np.degrees(np.concatenate([t for _, t in per_clip.values()]))
    residual = np.array([np.mean(np.abs(np.degrees(p - t))) for p, t in per_clip.values()])
    return EvalReport(
        mae=mae(pred, truth),
        rmse=rmse(pred, truth),
        residuals=ResidualSummary(
            clips=len(per_clip),
            frames=int(pred.size),
            mean_abs_min=float(residual.min()),
            mean_abs_median=float(np.median(residual)),
            mean_abs_max=float(residual.max()),
        ),
        fingerprint=fingerprint,
    )


@dataclass
class AblationRow:
    name: str
    paths: list[str]
    results: dict[int, EvalReport] = field(default_factory=dict)

    @property
    def maes(self) -> np.ndarray:
        return np.array([r.mae for _, r in sorted(self.results.items())])

    @property
    def rmses(self) -> np.ndarray:
        return np.array([r.rmse for _, r in sorted(self.results.items())])


def _train_and_evaluate(run: RunConfig, train_set: ClipDataset, val_set: ClipDataset, out_dir: Path) -> EvalReport:
    fingerprint = config_fingerprint(run)
    result = train_service.train(run, train_set, out_dir)
    return evaluate(result.net, result.normalizer, val_set, fingerprint, run.train.batch_size)


async def run_ablation(
    base: RunConfig,
    rows: list[tuple[str, list[str]]],
    seeds: list[int],
    train_set: ClipDataset,
    val_set: ClipDataset,
    out_dir: Path,
) -> list[AblationRow]:
    """Treina cada (linha, seed) em threads, limitado por `settings.fmnet_threads`."""
    semaphore = asyncio.Semaphore(settings.fmnet_threads)
    table = [AblationRow(name, paths) for name, paths in rows]

    async def one(row_index: int, row: AblationRow, seed: int) -> None:
        train = base.train.model_copy(update={"paths": row.paths, "seed": seed})
        run = base.model_copy(update={"train": train})
        target = out_dir / "runs" / f"row{row_index}" / f"seed{seed}"
        async with semaphore:
            logger.info("Ablação: %s, seed %d", row.name, seed)
            report = await asyncio.to_thread(partial(_train_and_evaluate, run, train_set, val_set, target))
        row.results[seed] = report

    await asyncio.gather(*(one(i, row, seed) for i, row in enumerate(table) for seed in seeds))
    return table


def write_ablation(table: list[AblationRow], out_dir: Path) -> tuple[Path, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    detail = out_dir / "ablation.csv"
    summary = out_dir / "ablation_summary.csv"
    with detail.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["row_name", "seed", "mae", "rmse"])
        for row in table:
            for seed, report in sorted(row.results.items()):
                writer.writerow([row.name, seed, repr(report.mae), repr(report.rmse)])
    with summary.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        # std: desvio padrão do MAE entre seeds
        writer.writerow(["row_name", "mean_mae", "mean_rmse", "std"])
        for row in table:
            writer.writerow([
                row.name,
                repr(float(row.maes.mean())),
                repr(float(row.rmses.mean())),
                repr(float(row.maes.std())),
            ])
    return detail, summary


def ablate(
    base: RunConfig,
    train_set: ClipDataset,
    val_set: ClipDataset,
    out_dir: str | Path,
    rows: list[tuple[str, list[str]]] | None = None,
    seeds: list[int] | None = None,
) -> list[AblationRow]:
    """Roda a grade de ablação e grava os CSVs detalhado e resumido."""
    out_dir = Path(out_dir)
    rows = rows if rows is not None else ABLATION_PRESETS[base.ablation.preset]
    seeds = seeds if seeds is not None else base.ablation.seeds
    if not rows or not seeds:
        raise UsageError("ablação exige ao menos uma linha e uma seed")
    table = asyncio.run(run_ablation(base, rows, seeds, train_set, val_set, out_dir))
    write_ablation(table, out_dir)
    return table


def export_embeddings(
    net: MainNet, dataset: ClipDataset, level: str, out_dir: str | Path, batch_size: int = 16
) -> tuple[Path, Path]:
    """Grava a matriz (clipes, C_j + 1): tap médio espacial do último quadro e o ângulo verdadeiro."""
    if level not in LEVELS:
        raise ConfigError(f"nível desconhecido {level!r}; use um de {LEVELS}")
    rows: dict[str, np.ndarray] = {}

    def visit(clips, output) -> None:
        tap = output.taps[level].data[:, -1].mean(axis=(1, 2))
        for clip, vector in zip(clips, tap):
            angle = np.float32(clip.states[-1, 0])
            rows[clip.clip_id] = np.concatenate([vector.astype(np.float32), [angle]])

    run_sequences(net, dataset, batch_size, visit)
    ids = dataset.clip_ids
    matrix = np.stack([rows[cid] for cid in ids]).astype(np.float32)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix_path = out_dir / f"embeddings_{level}"
    write_tensor(matrix_path, matrix)
    index_path = out_dir / f"embeddings_{level}.csv"
    with index_path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["clip_id", "angle"])
        for cid in ids:
            writer.writerow([cid, repr(float(rows[cid][-1]))])
    logger.info("Embeddings %s exportados: %s", level, matrix.shape)
    return matrix_path, index_path
