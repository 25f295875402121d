"""Ponto de entrada da CLI do fmnet.

Registra os subcomandos (gen-data, train, eval, ablate, check-inflate,
export-embeddings), configura o logging e traduz as exceções categorizadas em
códigos de saída: 2 uso, 3 configuração, 4 dados, 1 inesperado.
"""

import argparse
import logging
import sys

from fmnet.cli.commands import ablate, check_inflate, evaluate, export_embeddings, gen_data, train
from fmnet.core.config import settings
from fmnet.core.errors import FmnetError

logger = logging.getLogger(__name__)

COMMANDS = (gen_data, train, evaluate, ablate, check_inflate, export_embeddings)


def build_parser() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", required=True, help="configuração JSON do experimento")
    parent.add_argument("--seed", type=int, help="sobrescreve train.seed")
    parent.add_argument("--out", help="diretório de saída")

    parser = argparse.ArgumentParser(prog="fmnet", description="Mimetismo de features para predição de direção.")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers, parent)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if settings.debug else settings.log_level,
        format='%(asctime)s - %(levelname)s - %(name)s - %(message)s',
    )
    try:
        return args.handler(args)
    except FmnetError as e:
        logger.error("Erro de %s: %s", e.category, e)
        return e.exit_code
    except Exception:
        logger.exception("Erro inesperado em %s", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
