"""Command-line interface.

    volharm gen        --config cfg.json            generate the corpus
    volharm train-ae   --config cfg.json            stage-1 autoencoder
    volharm train-cldm --config cfg.json            stage-2 latent denoiser
    volharm harmonize  --config cfg.json --method hcld
    volharm eval       --config cfg.json            metrics CSVs
    volharm report     --config cfg.json            SVG + config bundle

Each command accepts targeted overrides (--seed, --target-site, --method,
--strategy, --ablate). Exit code 0 on success; on failure a JSON error
document is printed to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .config import ABLATIONS, METHODS, RunConfig


class _Parser(argparse.ArgumentParser):
    """Raise instead of exiting so argument problems also surface as the
    JSON error contract."""

    def error(self, message):
        raise ValueError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON path "
                                         "(defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--target-site", type=int,
                        help="override the harmonization target site")
    common.add_argument("--strategy", choices=("ddim", "ddpm"),
                        help="override the sampling strategy")
    common.add_argument("--ablate", action="append", choices=ABLATIONS,
                        default=None, metavar="FLAG",
                        help="add a stage-2 ablation toggle (repeatable)")

    p = _Parser(prog="volharm", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the corpus")
    sub.add_parser("train-ae", parents=[common],
                   help="train the stage-1 autoencoder")
    sub.add_parser("train-cldm", parents=[common],
                   help="train the stage-2 latent denoiser")
    ph = sub.add_parser("harmonize", parents=[common],
                        help="restyle source volumes toward the target site")
    ph.add_argument("--method", choices=METHODS, default="hcld")
    pe = sub.add_parser("eval", parents=[common],
                        help="compute metrics for raw + harmonized volumes")
    pe.add_argument("--method", action="append", default=None,
                    help="restrict evaluation to these methods (repeatable)")
    sub.add_parser("report", parents=[common],
                   help="render the report bundle from evaluation results")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.target_site is not None:
        if not 0 <= args.target_site < cfg.corpus.n_sites:
            raise ValueError(f"--target-site {args.target_site} outside "
                             f"[0, {cfg.corpus.n_sites})")
        cfg.corpus.target_site = args.target_site
    if args.strategy is not None:
        cfg.sampler = dataclasses.replace(cfg.sampler, strategy=args.strategy)
    if args.ablate:
        merged = tuple(sorted(set(cfg.stage2.ablate) | set(args.ablate)))
        cfg.stage2 = dataclasses.replace(cfg.stage2, ablate=merged)
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        cfg = _apply_overrides(cfg, args)
        from . import harness

        if args.command == "gen":
            manifest = harness.generate_corpus(cfg)
            print(json.dumps({"volumes": len(manifest.records),
                              "target_site": manifest.target_site}))
        elif args.command == "train-ae":
            ckpt = harness.train_stage1(cfg)
            print(json.dumps({"checkpoint": str(ckpt)}))
        elif args.command == "train-cldm":
            ckpt = harness.train_stage2(cfg)
            print(json.dumps({"checkpoint": str(ckpt)}))
        elif args.command == "harmonize":
            out = harness.harmonize_corpus(cfg, args.method,
                                           strategy=args.strategy)
            print(json.dumps({"out_dir": str(out)}))
        elif args.command == "eval":
            summary = harness.evaluate_run(cfg, methods=args.method)
            print(json.dumps(summary, indent=1, sort_keys=True))
        elif args.command == "report":
            out = harness.make_report(cfg)
            print(json.dumps({"report_dir": str(out)}))
        return 0
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001 - the CLI error contract
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
