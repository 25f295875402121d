"""export-embeddings: matriz de features de um nível por clipe, com o ângulo verdadeiro."""

import argparse

from fmnet.cli import deps
from fmnet.core.errors import UsageError
from fmnet.schemas.config import LEVELS
from fmnet.services import eval_service


def register(subparsers, parent: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("export-embeddings", parents=[parent], help="exporta embeddings por clipe")
    parser.add_argument("--data", help="raiz dos dados gerados")
    parser.add_argument("--checkpoint", help="diretório do checkpoint")
    parser.add_argument("--level", default="high", help=f"nível do tap: {', '.join(LEVELS)}")
    parser.add_argument("--split", default="val", choices=("train", "val"))
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    if not args.checkpoint:
        raise UsageError("export-embeddings exige --checkpoint")
    config = deps.load_run_config(args.config, args.seed)
    out = deps.out_dir(config, args.out)
    dataset = deps.open_split(deps.data_dir(config, args.data, out), args.split)
    net, _, _ = deps.load_trained(args.checkpoint)

    matrix, index = eval_service.export_embeddings(net, dataset, args.level, out, config.train.batch_size)
    print(f"{matrix}\n{index}")
    return 0
