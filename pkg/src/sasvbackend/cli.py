"""Command-line surface: synth, train, score, evaluate, gradcheck.

Exit codes are stable:

  0  success
  2  I/O or file-format problem (path or line reported)
  3  training failure (pool exhausted, non-finite loss/gradient)
  4  unresolved utterance ids (first 10 listed)
  5  protocol problem (no target trials)
  6  gradient check exceeded tolerance

Every option can also be supplied through ``--config FILE`` holding
``key=value`` lines (keys are the long option names); explicit flags win
over the config file, and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as dio
from .backend import BackendParams, POOLING_MODES
from .gradcheck import gradient_check
from .metrics import EmptyClassError, evaluate
from .sampling import PoolExhaustedError
from .scoring import SCORERS, score_trials
from .training import (
    HARD_SELECTION_MODES,
    TrainConfig,
    TrainingDivergedError,
    train,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_TRAINING = 3
EXIT_RESOLUTION = 4
EXIT_PROTOCOL = 5
EXIT_GRADCHECK = 6


def _percent(value) -> str:
    return "absent" if value is None else f"{100.0 * value:.2f}"


def _report_kv(report) -> str:
    def fmt(v):
        return "absent" if v is None else repr(v)
    lines = [
        f"sv_eer={fmt(report.sv_eer)}",
        f"spf_eer={fmt(report.spf_eer)}",
        f"sasv_eer={fmt(report.sasv_eer)}",
        f"sv_threshold={fmt(report.sv_threshold)}",
        f"spf_threshold={fmt(report.spf_threshold)}",
        f"sasv_threshold={fmt(report.sasv_threshold)}",
        f"n_target={report.n_target}",
        f"n_nontarget={report.n_nontarget}",
        f"n_spoof={report.n_spoof}",
    ]
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sasv-backend",
        description="Spoofing-aware speaker verification back-end",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic embedding corpus")
    synth.add_argument("--out", required=True, help="output directory")
    synth.add_argument("--config", help="key=value config file")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--train-speakers", type=int, default=40)
    synth.add_argument("--dev-speakers", type=int, default=10)
    synth.add_argument("--eval-speakers", type=int, default=20)
    synth.add_argument("--bonafide-per-speaker", type=int, default=20)
    synth.add_argument("--spoof-per-speaker", type=int, default=20)
    synth.add_argument("--asv-dim", type=int, default=96)
    synth.add_argument("--cm-dim", type=int, default=24)
    synth.add_argument("--asv-noise", type=float, default=0.15)
    synth.add_argument("--spoof-fidelity", type=float, default=0.9)
    synth.add_argument("--cm-separation", type=float, default=6.0)

    tr = sub.add_parser("train", help="train the back-end on a manifest")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--asv-embeddings", required=True)
    tr.add_argument("--cm-embeddings", required=True)
    tr.add_argument("--out", required=True, help="checkpoint/log directory")
    tr.add_argument("--dev-trials", help="trial list for per-epoch dev EERs")
    tr.add_argument("--config", help="key=value config file")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--epochs", type=int, default=40)
    tr.add_argument("--learning-rate", type=float, default=1e-4)
    tr.add_argument("--momentum", type=float, default=0.9)
    tr.add_argument("--weight-decay", type=float, default=1e-5)
    tr.add_argument("--lr-decay", type=float, default=0.95)
    tr.add_argument("--top-n", type=int, default=100,
                    help="hard negatives kept per batch")
    tr.add_argument("--speakers-per-batch", type=int, default=16)
    tr.add_argument("--utterances-per-speaker", type=int, default=10)
    tr.add_argument("--pooling", choices=POOLING_MODES, default="attention")
    tr.add_argument("--hidden-dim", type=int, default=64)
    tr.add_argument("--hard-selection", choices=HARD_SELECTION_MODES,
                    default="negatives_only")

    sc = sub.add_parser("score", help="score a trial list with a checkpoint")
    sc.add_argument("--checkpoint", required=True)
    sc.add_argument("--trials", required=True)
    sc.add_argument("--asv-embeddings", required=True)
    sc.add_argument("--cm-embeddings", required=True)
    sc.add_argument("--out", required=True, help="score file to write")
    sc.add_argument("--config", help="key=value config file")
    sc.add_argument("--scorer", choices=SCORERS, default="fused")
    sc.add_argument("--pooling", choices=POOLING_MODES, default="attention")

    ev = sub.add_parser("evaluate", help="compute EERs from a score file")
    ev.add_argument("--scores", required=True)
    ev.add_argument("--out", help="key-value report file")
    ev.add_argument("--config", help="key=value config file")

    gc = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--config", help="key=value config file")
    gc.add_argument("--asv-dim", type=int, default=8)
    gc.add_argument("--cm-dim", type=int, default=6)
    gc.add_argument("--hidden-dim", type=int, default=4)
    gc.add_argument("--speakers", type=int, default=2)
    gc.add_argument("--utterances", type=int, default=4)
    gc.add_argument("--pooling", choices=POOLING_MODES, default="attention")
    return parser


def _find_config_path(argv: list[str]) -> str | None:
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if token.startswith("--config="):
            return token.split("=", 1)[1]
    return None


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Fill subcommand defaults from --config, keeping explicit flags on top."""
    probe = _find_config_path(argv)
    if probe is None:
        return argv
    pairs = {}
    for lineno, line in enumerate(Path(probe).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise dio.MalformedLineError(f"{probe}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs[key.strip().replace("-", "_")] = value.strip()

    sub_actions = [a for a in parser._actions if isinstance(a, argparse._SubParsersAction)]
    if not argv or argv[0] not in sub_actions[0].choices:
        return argv  # let argparse report the usage problem
    subparser = sub_actions[0].choices[argv[0]]
    known = {a.dest: a for a in subparser._actions}
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ValueError(f"{probe}: unknown config keys: {', '.join(unknown)}")
    defaults = {}
    for key, raw in pairs.items():
        action = known[key]
        defaults[key] = action.type(raw) if action.type else raw
    subparser.set_defaults(**defaults)
    return argv


def cmd_synth(args) -> int:
    config = dio.SynthConfig(
        train_speakers=args.train_speakers,
        dev_speakers=args.dev_speakers,
        eval_speakers=args.eval_speakers,
        bonafide_per_speaker=args.bonafide_per_speaker,
        spoof_per_speaker=args.spoof_per_speaker,
        d_a=args.asv_dim,
        d_c=args.cm_dim,
        asv_noise=args.asv_noise,
        spoof_speaker_fidelity=args.spoof_fidelity,
        cm_separation=args.cm_separation,
        seed=args.seed,
    )
    dataset = dio.generate_synthetic(config)
    paths = dio.write_synthetic(dataset, args.out)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = dio.load_manifest(args.manifest)
    asv_map = dio.load_embeddings(args.asv_embeddings)
    cm_map = dio.load_embeddings(args.cm_embeddings)
    records = dio.build_records(manifest, asv_map, cm_map)
    dev_bundle = None
    if args.dev_trials:
        trials = dio.load_trials(args.dev_trials)
        dio.resolve_trials(trials, asv_map, cm_map)
        dev_bundle = (trials, asv_map, cm_map)
    config = TrainConfig(
        learning_rate=args.learning_rate,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        lr_decay_per_epoch=args.lr_decay,
        hard_negative_top_n=args.top_n,
        speakers_per_batch=args.speakers_per_batch,
        utterances_per_speaker=args.utterances_per_speaker,
        seed=args.seed,
        pooling=args.pooling,
        hidden_dim=args.hidden_dim,
        hard_selection=args.hard_selection,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(records, config, checkpoint_dir=out, log_path=out / "train.log",
                   dev_bundle=dev_bundle)
    last = result.epoch_logs[-1]
    print(f"trained {config.epochs} epochs, final mean selected loss "
          f"{last.mean_selected_loss:.6f}, checkpoints in {out}")
    return EXIT_OK


def cmd_score(args) -> int:
    params = BackendParams.load(args.checkpoint)
    trials = dio.load_trials(args.trials)
    asv_map = dio.load_embeddings(args.asv_embeddings)
    cm_map = dio.load_embeddings(args.cm_embeddings)
    records = score_trials(params, trials, asv_map, cm_map,
                           pooling=args.pooling, scorer=args.scorer)
    dio.save_scores(records, args.out)
    print(f"{len(records)} trials scored with {args.scorer} -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    records = dio.load_scores(args.scores)
    report = evaluate(records)
    print(f"{_percent(report.sv_eer)} {_percent(report.spf_eer)} {_percent(report.sasv_eer)}")
    if args.out:
        Path(args.out).write_text(_report_kv(report), encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    result = gradient_check(
        seed=args.seed, d_a=args.asv_dim, d_c=args.cm_dim, h_f=args.hidden_dim,
        speakers=args.speakers, utterances=args.utterances, pooling=args.pooling,
    )
    for name, err in result.errors.items():
        print(f"{name}\t{err:.6e}")
    if not result.passed:
        name, err = result.worst
        print(f"FAILED: {name} relative error {err:.3e} exceeds {result.tolerance:.0e}",
              file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"ok: all gradients within {result.tolerance:.0e}")
    return EXIT_OK


_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except dio.UnresolvedIdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RESOLUTION
    except EmptyClassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (TrainingDivergedError, PoolExhaustedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (dio.DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
