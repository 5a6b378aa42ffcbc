"""Command-line interface for the conversion pipeline.

Subcommands: synth-corpus, prepare, pretrain, train-s2s, train-vae,
convert, evaluate, report, run-all.  Every pipeline subcommand takes
--config plus optional --seed/--out overrides.  Exit code is 0 on
success; failures print a stage-named diagnostic on stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .corpus import generate_synthetic_corpus


def _add_config_args(p):
    p.add_argument("--config", required=True, help="pipeline config file")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--out", default=None, help="override [run] out directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dysvc",
        description="Two-stage normal-to-dysarthric voice conversion pipeline")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--normal", type=int, default=4)
    p.add_argument("--dysarthric", type=int, default=3)
    p.add_argument("--words", type=int, default=30)
    p.add_argument("--train-fraction", type=float, default=0.7)

    p = sub.add_parser("default-config", help="print a complete config file")

    for name, help_text in [
            ("prepare", "generate/split the corpus"),
            ("pretrain", "stage-1 pretraining"),
            ("train-s2s", "stage-1 many-to-one fine-tuning"),
            ("train-vae", "stage-2 training"),
            ("evaluate", "convert and score both stages, write reports"),
            ("report", "re-render report table and figures from report.tsv"),
            ("run-all", "run every stage end to end")]:
        p = sub.add_parser(name, help=help_text)
        _add_config_args(p)

    p = sub.add_parser("convert", help="convert test utterances")
    _add_config_args(p)
    p.add_argument("--stage", choices=[pipeline.STAGE_VTN, pipeline.STAGE_VTN_VAE],
                   default=pipeline.STAGE_VTN)
    return parser


def _load_config(args) -> pipeline.PipelineConfig:
    return pipeline.parse_config(Path(args.config), seed_override=args.seed,
                                 out_override=args.out)


def _reload_report(cfg: pipeline.PipelineConfig):
    from .evalkit import EvalReport

    path = cfg.out_dir / "report" / "report.tsv"
    if not path.exists():
        raise pipeline.PipelineError("no report at %s; run evaluate first" % path)
    report = EvalReport()
    means: dict = {}
    corr: dict = {}
    gt_corr: dict = {}
    ster: dict = {}
    stages = []
    speakers = []
    utt_scores: dict = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        stage, metric, key, value = line.split("\t")
        value = float(value)
        if metric == "ster" and key.startswith("speaker:"):
            ster[key.split(":", 1)[1]] = value
            continue
        if key.startswith("utt:"):
            utt_id = key.split(":", 1)[1]
            row = utt_scores.setdefault((stage, utt_id), {
                "utt_id": utt_id, "stage": stage, "target_speaker": None,
                "word_id": None, "p_stoi": None, "p_estoi": None, "per": None})
            row[metric] = value
        elif key.startswith("speaker:"):
            spk = key.split(":", 1)[1]
            means.setdefault((stage, metric), {})[spk] = value
            if stage != "GT" and stage not in stages:
                stages.append(stage)
            if spk not in speakers:
                speakers.append(spk)
        elif key == "r":
            if stage == "GT":
                gt_corr[metric] = value
            else:
                corr[(stage, metric)] = value
    report.utterance_scores = [utt_scores[k] for k in sorted(utt_scores)]
    report.speaker_means = means
    report.correlations = corr
    report.gt_correlations = gt_corr
    report.ster = ster
    report.stages = tuple(stages)
    report.speakers = tuple(speakers)
    return report


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    try:
        if command == "synth-corpus":
            index = generate_synthetic_corpus(
                seed=args.seed, n_normal=args.normal, n_dysarthric=args.dysarthric,
                words_per_speaker=args.words, out=args.out,
                train_fraction=args.train_fraction)
            print("wrote corpus with %d speakers, %d utterances to %s"
                  % (len(index.speakers), len(index.utterances), args.out))
        elif command == "default-config":
            print(pipeline.default_config_text(), end="")
        elif command == "prepare":
            cfg = _load_config(args)
            index = pipeline.prepare(cfg)
            n_train = sum(1 for u in index.utterances if u.split == "train")
            n_test = len(index.utterances) - n_train
            print("prepared corpus at %s: %d speakers, %d train / %d test utterances"
                  % (cfg.corpus.root, len(index.speakers), n_train, n_test))
        elif command == "pretrain":
            cfg = _load_config(args)
            ckpt = pipeline.pretrain(cfg)
            print("pretrained to step %d; checkpoint %s" % (ckpt.step, ckpt.path))
        elif command == "train-s2s":
            cfg = _load_config(args)
            ckpt = pipeline.train_s2s(cfg)
            print("stage-1 model for target %s at step %d; checkpoint %s"
                  % (ckpt.meta["target_speaker"], ckpt.step, ckpt.path))
        elif command == "train-vae":
            cfg = _load_config(args)
            ckpt = pipeline.train_vae(cfg)
            print("stage-2 model over %d speakers at step %d; checkpoint %s"
                  % (len(ckpt.meta["speakers"]), ckpt.step, ckpt.path))
        elif command == "convert":
            cfg = _load_config(args)
            results = pipeline.run_convert(cfg, stage=args.stage)
            n_trunc = sum(1 for r in results if r.truncated)
            print("converted %d utterances (stage %s, %d truncated) into %s"
                  % (len(results), args.stage, n_trunc,
                     cfg.out_dir / "converted" / args.stage))
        elif command == "evaluate":
            cfg = _load_config(args)
            report = pipeline.evaluate(cfg)
            from .reporting import format_report_table
            print(format_report_table(report))
        elif command == "report":
            cfg = _load_config(args)
            report = _reload_report(cfg)
            paths = pipeline.write_report(cfg, report)
            from .reporting import format_report_table
            print(format_report_table(report))
            print("figures: %s" % ", ".join(str(p) for p in paths["figures"]))
        elif command == "run-all":
            cfg = _load_config(args)
            outcome = pipeline.run_all(cfg)
            from .reporting import format_report_table
            print(format_report_table(outcome["report"]))
            print("manifest: %s" % (cfg.out_dir / "manifest.json"))
        return 0
    except Exception as exc:
        print("%s: %s" % (command, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
