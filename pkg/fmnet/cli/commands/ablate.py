"""ablate: grade de ablação dos caminhos de mimetismo sobre várias seeds."""

import argparse

from fmnet.cli import deps
from fmnet.core.errors import UsageError
from fmnet.services import eval_service


def register(subparsers, parent: argparse.ArgumentParser) -> None:
    parser = subparsers.add_parser("ablate", parents=[parent], help="roda a grade de ablação")
    parser.add_argument("--data", help="raiz dos dados gerados (com train/ e val/)")
    parser.add_argument("--preset", choices=sorted(eval_service.ABLATION_PRESETS), help="linhas da grade")
    parser.add_argument("--trials", type=int, help="número de seeds por linha")
    parser.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = deps.load_run_config(args.config, args.seed)
    out = deps.out_dir(config, args.out)
    root = deps.data_dir(config, args.data, out)
    train_set = deps.open_split(root, "train")
    val_set = deps.open_split(root, "val")
    deps.record_run(config, out)

    seeds = list(config.ablation.seeds)
    if args.trials is not None:
        if args.trials < 1:
            raise UsageError(f"--trials deve ser >= 1, recebeu {args.trials}")
        seeds = seeds[:args.trials] if args.trials <= len(seeds) else list(range(args.trials))
    rows = eval_service.ABLATION_PRESETS[args.preset or config.ablation.preset]

    table = eval_service.ablate(config, train_set, val_set, out, rows=rows, seeds=seeds)
    width = max(len(row.name) for row in table)
    print(f"{'linha':<{width}}  MAE (°)            RMSE (°)")
    for row in table:
        print(
            f"{row.name:<{width}}  {row.maes.mean():.4f} ± {row.maes.std():.4f}  "
            f"{row.rmses.mean():.4f} ± {row.rmses.std():.4f}"
        )
    return 0
