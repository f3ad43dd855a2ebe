"""Command-line interface tying the toolkit's pieces into pipelines.

Typical flow:

    hdnn gen-data --out corpus
    hdnn train-ce --data corpus --arch plain --hidden 32 --layers 3 --out teacher.mdl
    hdnn distill --data corpus --teacher teacher.mdl --hidden 8 --layers 3 --out student.mdl
    hdnn make-lattices --data corpus --split train --branch 3 --seed 5
    hdnn train-smbr --data corpus --model student.mdl --teacher teacher.mdl --out seq.mdl
    hdnn adapt --model seq.mdl --data corpus --mode one_pass_kd --teacher teacher.mdl --out sd.mdl
    hdnn eval --model sd.mdl --data corpus --split cv

Every command is deterministic given its --seed; reruns reproduce model
files and report fields exactly (wall-clock seconds aside). Note that
"decoding" in two-pass adaptation means per-frame argmax over the
model's own posteriors, not word-level search.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .network import NetworkConfig, build, count_params, forward
from .numerics import Rng
from .sequence import SmbrConfig, estimate_state_priors
from .trainer import (TrainConfig, adapt, distill, evaluate_frame_error,
                      sequence_train, train_ce, write_reports)
from .workbench import (SPEC_KNOB_DEFAULTS, build_lattice, corpus_meta,
                        corpus_spec_from_file, frame_dataset, gen_corpus,
                        load_model, load_split, make_corpus_spec, model_meta,
                        read_kv_config, save_corpus, save_model, save_tensors,
                        sequence_examples, splice, spliced_dim, write_lattice)


def _echo_report(report) -> None:
    print(report.to_json())


def _finish_reports(reports, path) -> None:
    if path:
        write_reports(reports, path)


def _load_data(args, split: str, context: int, with_labels: bool = True,
               speaker: int | None = None):
    utts = load_split(args.data, split)
    if speaker is not None:
        utts = [u for u in utts if u.speaker == speaker]
        if not utts:
            raise ValueError(f"split {split!r} has no utterances for speaker {speaker}")
    return frame_dataset(utts, context, with_labels=with_labels)


def _model_and_context(path):
    net = load_model(path)
    meta = model_meta(path)
    context = int(meta.get("context", 0))
    return net, context


def cmd_gen_data(args) -> int:
    if args.spec:
        spec = corpus_spec_from_file(args.spec, **_spec_overrides(args))
    else:
        spec = make_corpus_spec(**_spec_overrides(args))
    corpus = gen_corpus(spec)
    save_corpus(corpus, args.out)
    print(f"wrote corpus to {args.out}: "
          f"{len(corpus.train)} train / {len(corpus.cv)} cv / "
          f"{len(corpus.adapt)} adapt utterances, "
          f"{spec.num_states} states, dim {spec.feature_dim}")
    return 0


_SPEC_FLAGS = {
    "num_states": "--num-states", "feature_dim": "--feature-dim",
    "num_speakers": "--num-speakers", "train_utts_per_speaker": "--train-utts",
    "cv_utts_per_speaker": "--cv-utts", "adapt_utts_per_speaker": "--adapt-utts",
    "frames_per_utterance": "--frames", "mean_separation": "--mean-separation",
    "emission_std": "--emission-std", "self_loop": "--self-loop",
    "speaker_shift_std": "--speaker-shift", "speaker_scale_std": "--speaker-scale",
    "seed": "--seed",
}


def _spec_overrides(args) -> dict:
    return {k: v for k in _SPEC_FLAGS
            if (v := getattr(args, k)) is not None}


def cmd_count_params(args) -> int:
    cfg = NetworkConfig(args.input, args.hidden, args.layers, args.out,
                        args.arch)
    print(count_params(cfg))
    return 0


def _train_config(args, loss_kind: str) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr, max_epochs=args.epochs,
        momentum_after_first_epoch=args.momentum,
        minibatch_size=args.batch, lr_schedule=args.lr_schedule,
        seed=args.seed, loss_kind=loss_kind,
        q=getattr(args, "q", 0.0),
        temperature=getattr(args, "temperature", 1.0),
        p=getattr(args, "p", 0.0),
        update_scope=getattr(args, "scope", "all"),
        teacher_only_temperature=getattr(args, "teacher_only_temperature", False),
        smbr_regularizer=getattr(args, "regularizer", "kd"),
    )


def cmd_train_ce(args) -> int:
    meta = corpus_meta(args.data)
    input_dim = spliced_dim(meta["feature_dim"], args.context)
    net_cfg = NetworkConfig(input_dim, args.hidden, args.layers,
                            meta["num_states"], args.arch)
    net = build(net_cfg, Rng(args.seed))
    train = _load_data(args, "train", args.context)
    cv = _load_data(args, "cv", args.context)
    cfg = _train_config(args, "ce")
    _, reports = train_ce(net, train, cv, cfg, report_sink=_echo_report)
    save_model(net, args.out, meta={"context": args.context})
    _finish_reports(reports, args.report)
    return 0


def cmd_distill(args) -> int:
    teacher, context = _model_and_context(args.teacher)
    meta = corpus_meta(args.data)
    input_dim = spliced_dim(meta["feature_dim"], context)
    if input_dim != teacher.config.input_dim:
        raise ValueError("teacher model does not match this corpus's feature dim")
    student_cfg = NetworkConfig(input_dim, args.hidden, args.layers,
                                meta["num_states"], args.arch)
    with_labels = args.loss == "hybrid" and args.q > 0
    train = _load_data(args, "train", context, with_labels=with_labels)
    cv = _load_data(args, "cv", context)
    cfg = _train_config(args, args.loss)
    student, reports = distill(student_cfg, teacher, train, cv, cfg,
                               report_sink=_echo_report)
    save_model(student, args.out, meta={"context": context})
    _finish_reports(reports, args.report)
    return 0


def cmd_eval(args) -> int:
    net, context = _model_and_context(args.model)
    data = _load_data(args, args.split, context, speaker=args.speaker)
    err = evaluate_frame_error(net, data)
    print(f"{err:.6f}")
    return 0


def cmd_make_lattices(args) -> int:
    meta = corpus_meta(args.data)
    utts = load_split(args.data, args.split)
    rng = Rng(args.seed)
    split_dir = Path(args.data) / args.split
    for utt in utts:
        lat = build_lattice(utt, meta["num_states"], args.branch,
                            rng.stream(f"lattice/{utt.utt_id}"))
        write_lattice(lat, split_dir / f"{utt.utt_id}.lat")
    print(f"wrote {len(utts)} lattices (branch factor {args.branch}) "
          f"to {split_dir}")
    return 0


def cmd_train_smbr(args) -> int:
    net, context = _model_and_context(args.model)
    utts = load_split(args.data, "train", with_lattices=True)
    meta = corpus_meta(args.data)
    examples = sequence_examples(utts, context)
    cv = _load_data(args, "cv", context)
    priors = estimate_state_priors([u.alignment for u in utts],
                                   meta["num_states"], args.prior_floor)
    smbr_cfg = SmbrConfig(args.k, priors, args.prior_floor)
    teacher = None
    if args.teacher:
        teacher, _ = _model_and_context(args.teacher)
    cfg = _train_config(args, "smbr_kd")
    _, reports = sequence_train(net, examples, cfg, smbr_cfg, teacher=teacher,
                                cv_data=cv, report_sink=_echo_report)
    save_model(net, args.out, meta={"context": context})
    _finish_reports(reports, args.report)
    return 0


def cmd_adapt(args) -> int:
    net, context = _model_and_context(args.model)
    data = _load_data(args, args.split, context, with_labels=False,
                      speaker=args.speaker)
    teacher = None
    if args.teacher:
        teacher, _ = _model_and_context(args.teacher)
    cfg = TrainConfig(
        learning_rate=args.lr, max_epochs=args.epochs,
        momentum_after_first_epoch=0.0, minibatch_size=args.batch,
        seed=args.seed, update_scope=args.scope,
        temperature=args.temperature)
    adapted = adapt(net, data, args.mode, teacher=teacher, cfg=cfg)
    save_model(adapted, args.out, meta={"context": context})
    print(f"adapted model written to {args.out}")
    return 0


def cmd_export_posteriors(args) -> int:
    net, context = _model_and_context(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    utts = load_split(args.data, args.split)
    for utt in utts:
        post = forward(net, splice(utt.features, context),
                       args.temperature).posteriors
        save_tensors(out_dir / f"{utt.utt_id}.post", "posteriors",
                     {"utt_id": utt.utt_id, "temperature": args.temperature},
                     [("posteriors", post.astype(np.float32))])
    print(f"wrote {len(utts)} posterior files to {out_dir}")
    return 0


def _apply_config_file(subparser: argparse.ArgumentParser, path: str) -> None:
    """Fold a --config key=value file into subparser defaults (flags still win)."""
    by_dest = {a.dest: a for a in subparser._actions}
    defaults = {}
    for key, raw in read_kv_config(path).items():
        action = by_dest.get(key)
        if action is None:
            subparser.error(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes")
        else:
            defaults[key] = action.type(raw) if action.type else raw
    subparser.set_defaults(**defaults)


def _add_train_flags(p, default_lr: float, default_epochs: int):
    p.add_argument("--lr", type=float, default=default_lr, help="learning rate")
    p.add_argument("--epochs", type=int, default=default_epochs)
    p.add_argument("--batch", type=int, default=256, help="minibatch size in frames")
    p.add_argument("--momentum", type=float, default=0.9,
                   help="momentum from the 2nd epoch on (1st epoch always 0)")
    p.add_argument("--lr-schedule", choices=("constant", "halve_on_cv_stall"),
                   default="constant")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write per-epoch JSON records to this file")
    p.add_argument("--config", help="key=value file supplying flag defaults")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="hdnn",
        description="Small-footprint highway DNN acoustic model toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    def add_parser(name, **kwargs):
        commands[name] = sub.add_parser(name, **kwargs)
        return commands[name]

    p = add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True, help="corpus directory to create")
    p.add_argument("--spec", help="key=value corpus spec file")
    p.add_argument("--config", help="key=value file supplying flag defaults")
    for name, flag in _SPEC_FLAGS.items():
        kind = type(SPEC_KNOB_DEFAULTS[name])
        p.add_argument(flag, dest=name, type=kind, default=None,
                       help=f"default {SPEC_KNOB_DEFAULTS[name]}")
    p.set_defaults(func=cmd_gen_data)

    p = add_parser("count-params", help="parameter count for an architecture")
    p.add_argument("--arch", choices=("plain", "highway"), required=True)
    p.add_argument("--input", type=int, required=True)
    p.add_argument("--hidden", type=int, required=True)
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--out", type=int, required=True)
    p.set_defaults(func=cmd_count_params)

    p = add_parser("train-ce", help="cross-entropy training from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--arch", choices=("plain", "highway"), default="highway")
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--context", type=int, default=2,
                   help="splice +/- this many frames")
    p.add_argument("--scope", choices=("all", "gates_only"), default="all")
    _add_train_flags(p, default_lr=0.5, default_epochs=10)
    p.set_defaults(func=cmd_train_ce)

    p = add_parser("distill", help="teacher-student training of a fresh student")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True, help="teacher model file")
    p.add_argument("--out", required=True)
    p.add_argument("--arch", choices=("plain", "highway"), default="highway")
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--loss", choices=("kd", "hybrid"), default="kd")
    p.add_argument("--q", type=float, default=0.0,
                   help="weight of the CE term in the hybrid loss")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--teacher-only-temperature", action="store_true",
                   help="experimental: flatten only the teacher's posteriors")
    _add_train_flags(p, default_lr=0.5, default_epochs=10)
    p.set_defaults(func=cmd_distill)

    p = add_parser("eval", help="frame error of a model on a corpus split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "cv", "adapt"), default="cv")
    p.add_argument("--speaker", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = add_parser("make-lattices", help="build hypothesis lattices for a split")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "cv", "adapt"), default="train")
    p.add_argument("--branch", type=int, default=3,
                   help="arcs per frame (reference + competitors)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_lattices)

    p = add_parser("train-smbr",
                       help="sequence-level fine-tuning on lattices")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="pre-trained model to fine-tune")
    p.add_argument("--out", required=True)
    p.add_argument("--teacher", help="teacher model for the KD regularizer")
    p.add_argument("--regularizer", choices=("kd", "ce"), default="kd")
    p.add_argument("--p", type=float, default=0.2,
                   help="weight of the frame-level regularizer")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--k", type=float, default=0.1, help="acoustic score scale")
    p.add_argument("--prior-floor", type=float, default=1e-8)
    _add_train_flags(p, default_lr=1e-5, default_epochs=4)
    p.set_defaults(func=cmd_train_smbr)

    p = add_parser("adapt", help="unsupervised speaker adaptation")
    p.add_argument("--model", required=True, help="speaker-independent model")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "cv", "adapt"), default="adapt")
    p.add_argument("--mode", choices=("two_pass_ce", "one_pass_kd"),
                   required=True)
    p.add_argument("--teacher", help="required for one_pass_kd")
    p.add_argument("--scope", choices=("all", "gates_only"), default="all")
    p.add_argument("--speaker", type=int, default=None,
                   help="adapt on one speaker's utterances only")
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = add_parser("export-posteriors",
                       help="write a model's posteriors for a split to disk")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "cv", "adapt"), default="train")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_export_posteriors)

    return parser, commands


def main(argv=None) -> int:
    parser, commands = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        # apply file-supplied defaults to this subcommand, then re-parse so
        # explicitly passed flags keep precedence
        _apply_config_file(commands[args.command], args.config)
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
