"""Command-line interface.

Verbs: synth-data, train-scorer, score, pretrain, sweep, analyze-mask, probe.
Common flags: --config (JSON file), --seed, --out, --dump-config. Explicit
flags override config-file values; anything else can be overridden with
--set key=value (value parsed as JSON, falling back to a bare string).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import RunConfig, apply_overrides, load_config
from .errors import AtmError
from .synth import write_corpus
from . import trainer


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--dump-config", action="store_true",
                   help="print the fully resolved config and exit")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field (value parsed as JSON)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render a synthetic labeled corpus")
    _add_common(p)
    p.add_argument("--count", type=int, default=None, dest="synth_count")
    p.add_argument("--label-count", type=int, default=None, dest="label_count")
    p.add_argument("--inline", action="store_true", default=None, dest="synth_inline",
                   help="embed generation plans in the manifest instead of WAVs")

    p = sub.add_parser("train-scorer", help="train the CTC confidence scorer")
    _add_common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", default="", help="scorer checkpoint to continue from")

    p = sub.add_parser("score", help="write a confidence cache for a corpus")
    _add_common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--scorer-ckpt", default=None, dest="scorer_ckpt")

    p = sub.add_parser("pretrain", help="masked-prediction pretraining")
    _add_common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--strategy", default=None, choices=["random", "high", "low", "mixed"])
    p.add_argument("--variant", default=None, choices=["w2v2", "w2v-bert"])
    p.add_argument("--mask-fraction", type=float, default=None, dest="mask_fraction")
    p.add_argument("--scale-mode", default=None, choices=["none", "utterance", "frame"],
                   dest="scale_mode")
    p.add_argument("--scorer-ckpt", default=None, dest="scorer_ckpt")
    p.add_argument("--cache", default=None, dest="confidence_cache",
                   help="confidence cache JSONL (alternative to --scorer-ckpt)")
    p.add_argument("--resume", default="", help="pretraining checkpoint to continue from")

    p = sub.add_parser("sweep", help="pretrain across masking fractions and strategies")
    _add_common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--fractions", default=None,
                   help="comma-separated masking fractions, e.g. 0.3,0.4,0.5")
    p.add_argument("--strategies", default=None,
                   help="comma-separated strategies, e.g. random,high")
    p.add_argument("--scorer-ckpt", default=None, dest="scorer_ckpt")
    p.add_argument("--cache", default=None, dest="confidence_cache")

    p = sub.add_parser("analyze-mask", help="mask-plan statistics without training")
    _add_common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--cache", default=None, dest="confidence_cache")
    p.add_argument("--scorer-ckpt", default=None, dest="scorer_ckpt")
    p.add_argument("--plans-per-utt", type=int, default=None, dest="plans_per_utt")

    p = sub.add_parser("probe", help="linear CTC probe on frozen representations")
    _add_common(p)
    p.add_argument("--probe-corpus", default=None, dest="probe_corpus")
    p.add_argument("--msm-ckpt", default=None, dest="msm_ckpt")
    p.add_argument("--probe-steps", type=int, default=None, dest="probe_steps")

    return parser


_OVERRIDE_KEYS = [
    "seed", "synth_count", "label_count", "synth_inline", "corpus", "steps",
    "scorer_ckpt", "confidence_cache", "strategy", "variant", "mask_fraction",
    "scale_mode", "plans_per_utt", "probe_corpus", "msm_ckpt", "probe_steps",
]


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for key in _OVERRIDE_KEYS:
        if hasattr(args, key) and getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "fractions", None):
        overrides["sweep_fractions"] = [float(v) for v in args.fractions.split(",")]
    if getattr(args, "strategies", None):
        overrides["sweep_strategies"] = [v.strip() for v in args.strategies.split(",")]
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise AtmError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            overrides[key] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key] = raw
    return apply_overrides(cfg, overrides)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        cfg.validate()
        if args.dump_config:
            print(cfg.to_json())
            return 0
        if args.command == "synth-data":
            manifest = write_corpus(args.out, cfg.synth_config(), cfg.seed,
                                    inline=bool(cfg.synth_inline))
            print(f"wrote {manifest}")
        elif args.command == "train-scorer":
            ckpt = trainer.run_train_scorer(cfg, args.out, resume_from=args.resume)
            print(f"wrote {ckpt}")
        elif args.command == "score":
            cache = trainer.run_score(cfg, args.out)
            print(f"wrote {cache}")
        elif args.command == "pretrain":
            ckpt = trainer.run_pretrain(cfg, args.out, resume_from=args.resume)
            print(f"wrote {ckpt}")
        elif args.command == "sweep":
            csv_path = trainer.run_sweep(cfg, args.out)
            print(f"wrote {csv_path}")
        elif args.command == "analyze-mask":
            dump = trainer.run_analyze_mask(cfg, args.out)
            print(f"wrote {dump}")
        elif args.command == "probe":
            report = trainer.run_probe(cfg, args.out)
            print(f"wrote {report}")
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command!r}")
    except AtmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1
    return 0


def entrypoint():  # console-script shim
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
