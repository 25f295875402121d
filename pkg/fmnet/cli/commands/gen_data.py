"""gen-data: gera os splits sintéticos e os alvos auxiliares de todos os caminhos do preset."""

import argparse
import logging

from fmnet.cli import deps
from fmnet.services import aux_service, data_service

logger = logging.getLogger(__name__)


def register(subparsers, parent: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("gen-data", parents=[parent], help="gera o conjunto sintético")
    parser.add_argument("--data", help="diretório de saída dos dados (padrão: <out>/data)")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = deps.load_run_config(args.config, args.seed)
    out = deps.out_dir(config, args.out)
    root = deps.data_dir(config, args.data, out)
    deps.record_run(config, out)

    paths = list(aux_service.preset_paths(config.preset, config.train.weights).values())
    providers = aux_service.build_providers(paths, config.providers, for_generation=True)
    stems = {p.name: p.file_stem for p in paths}
    datasets = data_service.generate_dataset(
        root,
        config.train.seed,
        config.scenario,
        config.data,
        config.network.clip_len,
        features_fn=providers.provide_features,
        file_stems=stems,
    )
    for split, dataset in datasets.items():
        print(f"{split}: {len(dataset)} clipes em {len(dataset.sequences)} sequências -> {root / split}")
    return 0
