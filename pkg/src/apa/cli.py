"""``apa`` command line: prepare, align, attack, eval, sweep.

Success prints a JSON summary on stdout and exits 0. Any failure prints
``{"error": <type>, "message": ..., ...}`` on stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from apa import pipeline
from apa.config import ExperimentConfig
from apa.errors import APAError, InvalidArgumentError

EXIT_USAGE = 2
EXIT_FAILURE = 1


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="seed for stage-1 and stage-2 randomness")
    common.add_argument("--mode", choices=("sg", "gc"), help="trajectory gradient mode")
    common.add_argument("--target", choices=("latent", "prompt"), help="optimise z_T or the conditioning vector")
    common.add_argument("--no-vca", action="store_true", help="attack without stage-1 adapters")
    common.add_argument("--one-stage", type=float, metavar="LAMBDA", help="one-stage baseline with this penalty")
    common.add_argument("--workers", type=int, help="worker processes for per-image work")
    common.add_argument("--out", help="artifact root directory")
    common.add_argument("--ids", nargs="*", help="benchmark image ids (default: all)")
    common.add_argument("--iterations", type=int, help="override the number of attack iterations N")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="apa", description="Two-stage diffusion adversarial example pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="generate data; train denoiser and classifier zoo")
    sub.add_parser("align", parents=[common], help="fit per-image adapters")
    sub.add_parser("attack", parents=[common], help="generate adversarial images")
    ev = sub.add_parser("eval", parents=[common], help="score an attack run")
    ev.add_argument("--run", help="run key to evaluate (default: the one implied by the config)")
    sw = sub.add_parser("sweep", parents=[common], help="attack + eval over a parameter sweep")
    sw.add_argument("param", help=f"one of {sorted(pipeline.SWEEP_PARAMS)}")
    sw.add_argument("values", nargs="+")
    return ap


def config_from_args(args):
    overrides = {
        "out": args.out,
        "workers": args.workers,
        "attack.mode": args.mode.upper() if args.mode else None,
        "attack.target": args.target,
        "attack.N": args.iterations,
        "one_stage_lambda": args.one_stage,
    }
    if args.seed is not None:
        for k in ("seed", "vca.seed", "attack.seed", "augment.seed"):
            overrides[k] = args.seed
    if args.no_vca:
        overrides["use_vca"] = False
    return ExperimentConfig.load(args.config, overrides)


def _run(args):
    cfg = config_from_args(args)
    if args.command == "prepare":
        return pipeline.cmd_prepare(cfg)
    if args.command == "align":
        return pipeline.cmd_align(cfg, args.ids)
    if args.command == "attack":
        return pipeline.cmd_attack(cfg, args.ids)
    if args.command == "eval":
        rep = pipeline.cmd_eval(cfg, args.run)
        return {k: rep[k] for k in ("config_hash", "asr", "black_box_asr", "mean_ssim", "mean_perceptual", "failed")}
    if args.command == "sweep":
        values = [_number(v) for v in args.values]
        return pipeline.cmd_sweep(cfg, args.param, values, args.ids)
    raise InvalidArgumentError(f"unknown command {args.command!r}")


def _number(v):
    try:
        return int(v)
    except ValueError:
        try:
            return float(v)
        except ValueError:
            raise InvalidArgumentError(f"sweep value {v!r} is not a number") from None


def _error(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    for attr in ("path", "step"):
        val = getattr(exc, attr, None)
        if val is not None:
            payload[attr] = str(val)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        if exc.code == 0:
            return 0
        return _error(InvalidArgumentError("invalid command line; see --help"), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = _run(args)
    except InvalidArgumentError as exc:
        return _error(exc, EXIT_USAGE)
    except APAError as exc:
        return _error(exc, EXIT_FAILURE)
    except Exception as exc:  # noqa: BLE001  keep the machine-readable contract for unexpected failures
        return _error(exc, EXIT_FAILURE)
    print(json.dumps(out, sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
