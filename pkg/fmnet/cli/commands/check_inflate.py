"""check-inflate: compara a rede 3D inflada com a rede 2D em clipes constantes."""

import argparse
import logging

import numpy as np

from fmnet.cli import deps
from fmnet.core.tensor import float64_mode
from fmnet.services import data_service, network_service

logger = logging.getLogger(__name__)

TOLERANCE = 1e-5


def register(subparsers, parent: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("check-inflate", parents=[parent], help="verifica a inflação 2D -> 3D")
    parser.add_argument("--trials", type=int, default=3, help="quadros aleatórios testados")
    parser.add_argument("--float64", action="store_true", help="executa a verificação em 64 bits")
    parser.add_argument("--checkpoint", help="verifica os kernels de um checkpoint em vez da inicialização")
    parser.set_defaults(handler=run)


def _worst_error(config, trials: int, checkpoint: str | None) -> float:
    if checkpoint:
        net, _, _ = deps.load_trained(checkpoint)
    else:
        net = network_service.build(config.network, config.train.seed)
    worst = 0.0
    for trial in range(trials):
        clip = data_service.generate_clip(config.train.seed + trial, config.scenario, clip_len=1)
        worst = max(worst, network_service.inflation_error(net, clip.frames[0]))
        logger.info("Inflação, quadro %d: erro acumulado %.3e", trial, worst)
    return worst


def run(args: argparse.Namespace) -> int:
    config = deps.load_run_config(args.config, args.seed)
    if args.float64:
        with float64_mode():
            worst = _worst_error(config, args.trials, args.checkpoint)
    else:
        worst = _worst_error(config, args.trials, args.checkpoint)
    if np.isfinite(worst) and worst <= TOLERANCE:
        print(f"PASS, max_err={worst:.3e} ≤ {TOLERANCE:.0e}")
        return 0
    print(f"FAIL, max_err={worst:.3e} > {TOLERANCE:.0e}")
    return 1
