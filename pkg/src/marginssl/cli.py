"""Command-line entry point: ``marginssl gen-data | train | evaluate``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .config import ENV_CONFIG, RunConfig, describe_keys, dump_config, load_config
from .evaluation import DataError, Trial, evaluate, export_score_distribution, write_trials
from .features import AudioFormatError
from .synthdata import Utterance, generate_corpus, load_corpus, write_corpus
from .trainers import ConfigError, TrainingDivergedError, train

log = logging.getLogger("marginssl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def balanced_trials(corpus: list[Utterance], rng: np.random.Generator) -> list[Trial]:
    """All same-speaker pairs plus as many randomly drawn different-speaker pairs."""
    target, nontarget = [], []
    for a, b in itertools.combinations(corpus, 2):
        (target if a.speaker_id == b.speaker_id else nontarget).append((a, b))
    n = min(len(target), len(nontarget))
    if len(target) > n:
        target = [target[i] for i in sorted(rng.choice(len(target), n, replace=False))]
    nontarget = [nontarget[i] for i in sorted(rng.choice(len(nontarget), n, replace=False))]
    trials = [Trial(str(a.utterance_id), str(b.utterance_id), True) for a, b in target]
    trials += [Trial(str(a.utterance_id), str(b.utterance_id), False) for a, b in nontarget]
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: RunConfig, out_dir=None) -> Path:
    out_dir = Path(out_dir or cfg.paths.data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    seed = cfg.module_seed("synthdata")
    sr = cfg.features.sample_rate
    train_corpus = generate_corpus(d.n_train_speakers, d.utts_per_speaker, seed, d.duration, sr)
    eval_corpus = generate_corpus(
        d.n_eval_speakers, d.utts_per_speaker, seed, d.duration, sr,
        first_speaker_id=d.n_train_speakers, first_utterance_id=len(train_corpus),
    )  # fmt: skip
    write_corpus(train_corpus, out_dir, "train_manifest.txt")
    write_corpus(eval_corpus, out_dir, "eval_manifest.txt")
    write_trials(out_dir / "trials.txt", balanced_trials(eval_corpus, np.random.default_rng(cfg.module_seed("trials"))))
    (out_dir / "config.ini").write_text(dump_config(cfg))
    log.info("wrote %d train and %d eval utterances to %s", len(train_corpus), len(eval_corpus), out_dir)
    return out_dir


def cmd_train(cfg: RunConfig, manifest=None, run_dir=None, resume: bool = True):
    manifest = Path(manifest or Path(cfg.paths.data_dir) / "train_manifest.txt")
    if not manifest.is_file():
        raise DataError(f"training manifest not found: {manifest}")
    run_dir = Path(run_dir or cfg.paths.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(dump_config(cfg))
    corpus = load_corpus(manifest)
    return train(cfg.train_config(), corpus, run_dir, cfg.features, cfg.augment, resume=resume)


def cmd_evaluate(
    cfg: RunConfig,
    checkpoint=None,
    manifest=None,
    trials=None,
    out_dir=None,
    export_scores=None,
    export_dist=None,
    bins: int = 50,
):
    data_dir, run_dir = Path(cfg.paths.data_dir), Path(cfg.paths.run_dir)
    checkpoint = Path(checkpoint or run_dir / "checkpoint.bin")
    manifest = Path(manifest or data_dir / "eval_manifest.txt")
    trials = Path(trials or data_dir / "trials.txt")
    missing = [str(p) for p in (checkpoint, manifest, trials) if not p.is_file()]
    if missing:
        raise DataError("missing files: " + ", ".join(missing))
    out_dir = Path(out_dir or run_dir / "eval")
    report = evaluate(
        checkpoint, manifest, trials, cfg.eval, cfg.features, out_dir=out_dir,
        scores_path=export_scores, workers=cfg.run.workers,
    )  # fmt: skip
    if export_dist:
        Path(export_dist).write_text(export_score_distribution(report.scores, bins).to_csv())
    return report


# ---------------------------------------------------------------------- main


def _bool_flag(p, name, dest, help_):
    p.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help_)
    p.add_argument(f"--no-{name}", dest=dest, action="store_false", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help=f"INI config file (default: ${ENV_CONFIG} if set)")
    common.add_argument("--seed", type=int, help="root seed (run.seed)")
    common.add_argument("--workers", type=int, help="parallel workers for features/scoring (run.workers)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(
        prog="marginssl",
        description="Contrastive self-supervised speaker embeddings with additive-margin NT-Xent.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys (flags > config file > desk defaults):\n" + describe_keys(),
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus, manifests and a trial list")
    g.add_argument("--out", help="output directory (paths.data_dir)")

    t = sub.add_parser("train", parents=[common], help="train an encoder (SimCLR or MoCo)")
    t.add_argument("--manifest", help="training manifest (default: <data_dir>/train_manifest.txt)")
    t.add_argument("--run-dir", help="checkpoint/metrics directory (paths.run_dir)")
    t.add_argument("--data-dir", help="paths.data_dir")
    t.add_argument("--framework", choices=["simclr", "moco"])
    t.add_argument("--loss", choices=["nt-xent", "nt-xent-am"])
    _bool_flag(t, "symmetric", "symmetric", "symmetric loss over all 2N views (SimCLR)")
    t.add_argument("--margin", type=float, help="additive margin m (nt-xent-am)")
    t.add_argument("--tau", type=str, help="temperature, e.g. 1/30")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--queue-size", type=int)
    t.add_argument("--ema", type=float)
    _bool_flag(t, "prevent-collisions", "prevent_collisions", "use speaker labels to keep batches collision-free")
    t.add_argument("--cap-per-speaker", type=int)
    t.add_argument("--no-resume", action="store_true", help="start over even if a checkpoint exists")

    e = sub.add_parser("evaluate", parents=[common], help="score a trial list and report EER / minDCF")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    e.add_argument("--trials")
    e.add_argument("--run-dir", help="paths.run_dir")
    e.add_argument("--data-dir", help="paths.data_dir")
    e.add_argument("--out", help="report directory (default: <run_dir>/eval)")
    e.add_argument("--export-scores", metavar="PATH", help="write '<score> <enroll> <test>' lines")
    e.add_argument("--export-dist", metavar="PATH", help="write a per-class score histogram CSV")
    e.add_argument("--bins", type=int, default=50)
    return parser


_FLAG_KEYS = {
    "seed": "run.seed",
    "workers": "run.workers",
    "data_dir": "paths.data_dir",
    "run_dir": "paths.run_dir",
    "framework": "train.framework",
    "loss": "train.loss",
    "symmetric": "train.symmetric",
    "margin": "train.margin",
    "tau": "train.tau",
    "batch_size": "train.batch_size",
    "epochs": "train.epochs",
    "lr": "train.lr",
    "queue_size": "train.queue_size",
    "ema": "train.ema",
    "prevent_collisions": "train.prevent_collisions",
    "cap_per_speaker": "train.cap_per_speaker",
}


def config_from_args(args) -> RunConfig:
    overrides: dict[str, object] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    ns = vars(args)
    if args.command == "gen-data" and ns.get("out"):
        overrides["paths.data_dir"] = ns["out"]
    for attr, key in _FLAG_KEYS.items():
        if ns.get(attr) is not None:
            overrides[key] = ns[attr] if not isinstance(ns[attr], str) else str(ns[attr])
    path = args.config or os.environ.get(ENV_CONFIG) or None
    return load_config(path, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "gen-data":
            out = cmd_gen_data(cfg)
            print(f"corpus written to {out}")
        elif args.command == "train":
            state = cmd_train(cfg, args.manifest, resume=not args.no_resume)
            last = state.history[-1] if state.history else None
            if last:
                print(f"trained {state.epochs_done} epochs; final mean loss {last['mean_loss']:.4f}")
        else:
            report = cmd_evaluate(
                cfg, args.checkpoint, args.manifest, args.trials, args.out,
                args.export_scores, args.export_dist, args.bins,
            )  # fmt: skip
            print(report.text(), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, AudioFormatError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
