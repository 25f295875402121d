"""train: treino em dois estágios com validação nos checkpoints."""

import argparse
import json
import logging

from fmnet.cli import deps
from fmnet.services import train_service

logger = logging.getLogger(__name__)


def register(subparsers, parent: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("train", parents=[parent], help="treina a rede principal")
    parser.add_argument("--data", help="raiz dos dados gerados (com train/ e val/)")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = deps.load_run_config(args.config, args.seed)
    out = deps.out_dir(config, args.out)
    root = deps.data_dir(config, args.data, out)
    train_set = deps.open_split(root, "train")
    val_set = deps.open_split(root, "val")
    deps.record_run(config, out)

    result = train_service.train(config, train_set, out, evaluator=deps.make_evaluator(config, val_set))
    reports = {name: report.model_dump() for name, report in result.reports.items()}
    (out / "report.json").write_text(json.dumps(reports, indent=2, sort_keys=True), encoding="utf-8")
    final = result.reports["final"]
    print(f"checkpoint: {result.checkpoint_dir}")
    print(f"validação: MAE {final.mae:.4f}°, RMSE {final.rmse:.4f}°")
    return 0
