"""Dependências compartilhadas pelos comandos da CLI.

Carrega e valida a configuração do experimento, resolve diretórios e abre os
conjuntos de dados e checkpoints usados pelos comandos.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from pydantic import ValidationError

from fmnet.core.config import settings
from fmnet.core.errors import ConfigError, DataError, UsageError
from fmnet.schemas.config import RunConfig
from fmnet.services import aux_service, eval_service, network_service
from fmnet.services.data_service import ClipDataset
from fmnet.services.loss_service import TargetNormalizer
from fmnet.services.network_service import MainNet
from fmnet.services.train_service import Evaluator

logger = logging.getLogger(__name__)


def check_consistency(run: RunConfig) -> None:
    """Combinações que o esquema aceita mas o experimento não.

    Raises:
        ConfigError: preset desconhecido, caminho ou tap inexistente, ou
            render_dims diferente de network.input_dims.
    """
    aux_service.resolve_paths(run.preset, run.train.paths, run.train.weights)
    if run.ablation.preset not in eval_service.ABLATION_PRESETS:
        raise ConfigError(
            f"preset de ablação desconhecido: {run.ablation.preset} "
            f"(disponíveis: {sorted(eval_service.ABLATION_PRESETS)})"
        )
    if tuple(run.scenario.render_dims) != tuple(run.network.input_dims[:2]):
        raise ConfigError(
            f"scenario.render_dims {tuple(run.scenario.render_dims)} difere de "
            f"network.input_dims {tuple(run.network.input_dims[:2])}"
        )
    network_service.validate_taps(run.network)


def load_run_config(path: str | Path, seed: int | None = None) -> RunConfig:
    """Lê o JSON de configuração e aplica a seed da linha de comando.

    Raises:
        UsageError: arquivo ausente, JSON inválido ou chaves fora do esquema.
        ConfigError: combinação inválida (ver `check_consistency`).
    """
    path = Path(path)
    if not path.exists():
        raise UsageError(f"arquivo de configuração não encontrado: {path}")
    try:
        run = RunConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        keys = [".".join(str(part) for part in err["loc"]) for err in e.errors()]
        raise UsageError(f"configuração inválida em {path}: {keys} ({e.error_count()} erros)") from e
    if seed is not None:
        run = run.model_copy(update={"train": run.train.model_copy(update={"seed": seed})})
    check_consistency(run)
    return run


def out_dir(run: RunConfig, override: str | None) -> Path:
    return Path(override or run.out_dir or settings.default_out_dir)


def data_dir(run: RunConfig, override: str | None, out: Path) -> Path:
    if override:
        return Path(override)
    if run.data.data_dir:
        return Path(run.data.data_dir)
    return out / "data"


def record_run(run: RunConfig, out: Path) -> None:
    """Copia a configuração efetiva e a seed para o diretório de saída."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(run.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8"
    )
    (out / "seed.txt").write_text(f"{run.train.seed}\n", encoding="utf-8")


def open_split(root: Path, split: str) -> ClipDataset:
    directory = root / split
    if not directory.exists():
        raise DataError(f"split {split!r} não encontrado em {root}; rode gen-data antes")
    return ClipDataset.open(directory)


def make_evaluator(run: RunConfig, val_set: ClipDataset) -> Evaluator:
    fingerprint = eval_service.config_fingerprint(run)

    def evaluator(net: MainNet, normalizer: TargetNormalizer):
        return eval_service.evaluate(net, normalizer, val_set, fingerprint, run.train.batch_size)

    return evaluator


def load_trained(checkpoint: str | Path) -> tuple[MainNet, TargetNormalizer, dict]:
    """Restaura a rede e a normalização gravadas num checkpoint."""
    arrays, manifest = network_service.load_checkpoint(checkpoint)
    if "normalizer" not in manifest:
        raise DataError(f"checkpoint {checkpoint} sem estatísticas de normalização")
    net = network_service.restore(arrays, manifest)
    return net, TargetNormalizer.from_dict(manifest["normalizer"]), manifest
