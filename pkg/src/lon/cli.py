"""Command line for the experiment harness.

Subcommands: generate, train, eval, saliency, gradcheck, probe.  Exit
codes: 0 success, 1 usage or configuration error, 2 numeric failure
(divergence, failed checks, bad values), 3 IO or file-format error.
"""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, config_hash, load_config
from .datasets import IdxFormatError
from .runner import (
    ArtifactError,
    build_dataset,
    run_eval,
    run_gradcheck,
    run_probe,
    run_saliency,
    run_training,
)
from .train import TrainingDiverged


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage problems; the contract here is 1
    def error(self, message):
        raise _UsageExit(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="lon", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True, out_required=True):
        p.add_argument("--config", required=config_required, help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("generate", help="write the configured dataset")
    common(p)

    p = sub.add_parser("train", help="sweep learning rates and keep the best run")
    common(p)
    p.add_argument("--data", default=None, help="dataset directory (default: <out>/dataset)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])

    p = sub.add_parser("saliency", help="input-gradient maps for selected samples")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", required=True, help="comma-separated manifest row indices; '' for none")

    p = sub.add_parser("gradcheck", help="finite-difference audit of all variants")
    p.add_argument("--out", default=None)
    p.add_argument(
        "--self-test",
        action="store_true",
        help="corrupt the analytic gradients and require the checker to notice",
    )

    p = sub.add_parser("probe", help="local histogram probe at one pixel")
    common(p)
    p.add_argument("--image", default=None, help="LONR raster to probe (default: generated sample)")
    return parser


def _parse_ids(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(part) for part in text.split(",")]
    except ValueError:
        raise _UsageExit(f"--ids must be comma-separated integers, got {text!r}") from None


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)

        if args.command == "gradcheck":
            rows, ok = run_gradcheck(args.out, corrupt=args.self_test)
            width = max(len(r[0]) for r in rows)
            for variant, fname, err, status in rows:
                print(f"{variant:<{width}}  {fname:<12} {float(err):.3e}  {status}")
            if args.self_test:
                print("self-test:", "corruption detected" if ok else "corruption NOT detected")
            if not ok:
                return 2
            return 0

        cfg = load_config(args.config, seed_override=args.seed)

        if args.command == "generate":
            path = build_dataset(cfg, f"{args.out}/dataset")
            print(f"dataset written to {path} (config {config_hash(cfg)})")
        elif args.command == "train":
            data = args.data
            if data is None:
                data = str(build_dataset(cfg, f"{args.out}/dataset"))
            report = run_training(cfg, data, args.out)
            for record in report.runs:
                line = f"lr {record['lr']:g}: {record['status']}"
                if "final_val_accuracy" in record:
                    line += f", val accuracy {record['final_val_accuracy']:.4f}"
                elif "final_val_loss" in record:
                    line += f", val loss {record['final_val_loss']:.6g}"
                elif "final_train_loss" in record:
                    line += f", train loss {record['final_train_loss']:.6g}"
                print(line)
            print(f"best lr {report.best_lr:g} -> {report.best_checkpoint}")
        elif args.command == "eval":
            loss, accuracy = run_eval(cfg, args.checkpoint, args.data, args.out, args.split)
            if accuracy is None:
                print(f"{args.split} loss {loss:.6g}")
            else:
                print(f"{args.split} loss {loss:.6g}, accuracy {accuracy:.4f}")
        elif args.command == "saliency":
            rows = run_saliency(cfg, args.checkpoint, args.data, _parse_ids(args.ids), args.out)
            print(f"wrote {len(rows)} saliency maps to {args.out}")
        elif args.command == "probe":
            probe = run_probe(cfg, args.out, image_path=args.image)
            print(f"probe at {probe.position}: {probe.values.size} bins -> {args.out}/probe.csv")
        return 0

    except _UsageExit as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (IdxFormatError, ArtifactError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except (TrainingDiverged, ValueError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
