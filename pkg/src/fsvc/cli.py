"""Command-line entry point: ``fsvc <command> [options]``.

Failures print a single line ``fsvc-error[<code>]: <message>`` on stderr and
exit with status 1 (argument errors exit with 2, as argparse does).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import pipeline
from .errors import FsvcError
from .formats import PipelineConfig


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "rate", None) is not None:
        overrides["rate"] = args.rate
    return replace(cfg, **overrides).validate() if overrides else cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsvc", description="PPG-based voice conversion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH", help="key = value pipeline config")
        sp.add_argument("--seed", type=int)
        return sp

    sp = common(sub.add_parser("extract", help="write MFCC / PPG / prosody / LPCNet feature files"))
    sp.add_argument("wav")
    sp.add_argument("--mfcc")
    sp.add_argument("--ppg")
    sp.add_argument("--prosody")
    sp.add_argument("--feat")
    sp.add_argument("--ppg-model")

    sp = common(sub.add_parser("train-ppg", help="train the PPG extractor on a wav corpus"))
    sp.add_argument("corpus_dir")
    sp.add_argument("model_out")

    sp = common(sub.add_parser("train-synth", help="train a target speaker's synthesizer"))
    sp.add_argument("corpus_dir")
    sp.add_argument("profile_out")
    sp.add_argument("--ppg-model", required=True)
    sp.add_argument("--init-from", metavar="PATH", help="checkpoint to fine-tune from")
    sp.add_argument("--speaker-id")
    sp.add_argument("--epochs", type=int, help="override synth_epochs from the config")

    sp = common(sub.add_parser("convert", help="convert a source utterance to the target voice"))
    sp.add_argument("source_wav")
    sp.add_argument("profile")
    sp.add_argument("wav_out")
    sp.add_argument("--rate", type=float, help="speech rate; >1 is faster")

    sp = common(sub.add_parser("vocode", help="render an LPCNet feature file to audio"))
    sp.add_argument("feat")
    sp.add_argument("wav_out")

    sp = common(sub.add_parser("bench", help="parallel vs autoregressive-emulation latency"))
    sp.add_argument("profile")
    sp.add_argument("--T", dest="t_list", type=int, nargs="*", default=[64, 256])
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--out", help="CSV path (default: stdout)")
    return p


def run(args) -> int:
    cfg = _config(args)
    if args.command == "extract":
        a = pipeline.cmd_extract(args.wav, args.mfcc, args.ppg, args.prosody, args.feat, args.ppg_model, cfg)
        print(f"frames={a.grid.n_frames}")
    elif args.command == "train-ppg":
        params = pipeline.cmd_train_ppg(args.corpus_dir, args.model_out, cfg)
        print(f"classes={params.n_classes} final_loss={params.meta.get('final_loss', 'n/a')}")
    elif args.command == "train-synth":
        prof = pipeline.cmd_train_synth(
            args.corpus_dir, args.profile_out, args.ppg_model, cfg, args.init_from,
            args.speaker_id, args.epochs,
        )
        print(f"profile={args.profile_out} utterances={prof.n_utterances}")
    elif args.command == "convert":
        out = pipeline.cmd_convert(args.source_wav, args.profile, args.wav_out, cfg.rate, cfg, cfg.vocoder_seed)
        print(f"samples={len(out)}")
    elif args.command == "vocode":
        out = pipeline.cmd_vocode(args.feat, args.wav_out, cfg.vocoder_seed)
        print(f"samples={len(out)}")
    elif args.command == "bench":
        text = pipeline.cmd_bench(args.profile, args.t_list, args.repeats, args.out)
        if args.out is None:
            sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except FsvcError as exc:
        print(f"fsvc-error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"fsvc-error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
