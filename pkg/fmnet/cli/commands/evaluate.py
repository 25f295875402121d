"""eval: MAE/RMSE de um checkpoint no split de validação."""

import argparse

from fmnet.cli import deps
from fmnet.core.errors import UsageError
from fmnet.services import eval_service


def register(subparsers, parent: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("eval", parents=[parent], help="avalia um checkpoint")
    parser.add_argument("--data", help="raiz dos dados gerados (com val/)")
    parser.add_argument("--checkpoint", help="diretório do checkpoint")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    if not args.checkpoint:
        raise UsageError("eval exige --checkpoint")
    config = deps.load_run_config(args.config, args.seed)
    out = deps.out_dir(config, args.out)
    val_set = deps.open_split(deps.data_dir(config, args.data, out), "val")
    net, normalizer, _ = deps.load_trained(args.checkpoint)

    report = eval_service.evaluate(
        net, normalizer, val_set, eval_service.config_fingerprint(config), config.train.batch_size
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    print(report.model_dump_json(indent=2))
    return 0
