"""Command-line entry points.

Exit codes: 0 success, 1 configuration problem (bad flags, bad config
file, missing inputs), 2 runtime failure mid-computation.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, FormatError, NumericError, PsinetError
from .harness import ExperimentConfig, diag_featuremap, run_experiment, run_sweep


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psinet",
        description="Federated experiments with group-regulated models.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="run one experiment config end to end")
    run_p.add_argument("config", help="path to a JSON experiment config")
    run_p.add_argument("--output-dir", help="override the config's output directory")

    diag_p = sub.add_parser("diag", help="diagnostics on saved checkpoints")
    diag_sub = diag_p.add_subparsers(dest="diag_verb", required=True)
    fm = diag_sub.add_parser("featuremap", help="per-channel class preferences")
    fm.add_argument("checkpoint", help="path to a .psnf checkpoint")
    fm.add_argument("layer", help="layer name to probe")
    fm.add_argument("--config", required=True, help="experiment config describing the model")
    fm.add_argument("--out", help="output CSV path (default: next to the checkpoint)")

    sw = sub.add_parser("sweep", help="rerun an experiment across values of one field")
    sw.add_argument("config", help="path to a JSON experiment config")
    sw.add_argument("--param", required=True, help="dotted field, e.g. federation.lr")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--output-dir", required=True, help="directory for per-value runs")
    return parser


def _parse_value(text: str):
    import json

    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 0 if err.code in (0, None) else 1

    try:
        if args.verb == "run":
            cfg = ExperimentConfig.from_file(args.config)
            result = run_experiment(cfg, output_dir=args.output_dir)
            for strategy, s in sorted(result["summary"].items()):
                print(
                    f"{strategy}: final_accuracy={s['final_accuracy']:.4f} "
                    f"final_loss={s['final_loss']:.4f}"
                )
            print(f"artifacts in {result['output_dir']}")
        elif args.verb == "diag":
            cfg = ExperimentConfig.from_file(args.config)
            out = diag_featuremap(args.checkpoint, args.layer, cfg, args.out)
            print(out)
        else:
            values = [_parse_value(v) for v in args.values.split(",") if v != ""]
            if not values:
                raise ConfigError("--values: need at least one value")
            path = run_sweep(args.config, args.param, values, args.output_dir)
            print(path)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (NumericError, FormatError, PsinetError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
