"""Command line interface.

Subcommands: gen-data, train, adapt, eval, pseudo-label, run-experiment,
ablation, select-sources. All training commands are config-driven and
deterministic given the config seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness
from .acpl import select_confident, predict_pair, write_pseudo_label_csv
from .data import (
    DataSpec,
    load_domains_dir,
    load_subject_dir,
    make_benchmark,
    write_subject_dir,
)
from .errors import ValidationError
from .nn_core import load_checkpoint, save_checkpoint
from .trainer import (
    adapt_target,
    evaluate,
    load_train_config,
    train_source_alignment,
    write_log_csv,
)


def _cmd_gen_data(args) -> int:
    spec = DataSpec(
        num_sources=args.subjects,
        num_targets=args.targets,
        num_classes=args.classes,
        samples_per_class=args.samples_per_class,
        num_irrelevant=args.irrelevant,
        seed=args.seed,
    )
    bench = make_benchmark(spec)
    out = Path(args.out)
    for s in bench.sources:
        write_subject_dir(s, out / s.subject_id, spec.num_classes)
    for b in bench.targets:
        write_subject_dir(b.adapt, out / b.subject_id, spec.num_classes)
        write_subject_dir(b.eval_set, out / f"{b.subject_id}_eval", spec.num_classes)
    print(
        f"wrote {len(bench.sources)} source and {len(bench.targets)} target "
        f"subjects (plus eval splits) to {out}"
    )
    return 0


def _cmd_train(args) -> int:
    cfg = load_train_config(args.config)
    sources = load_domains_dir(args.sources)
    result = train_source_alignment(cfg, sources)
    save_checkpoint(result.model, args.out)
    if args.log:
        write_log_csv(result.log_rows, args.log)
    print(f"trained on {len(sources)} source domains; final loss {result.loss_trace[-1]:.6f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_adapt(args) -> int:
    cfg = load_train_config(args.config)
    model, _ = load_checkpoint(args.checkpoint)
    sources = load_domains_dir(args.sources)
    target = load_subject_dir(args.target)
    result = adapt_target(cfg, model, sources, target)
    save_checkpoint(result.model, args.out)
    if args.log:
        write_log_csv(result.log_rows, args.log)
    print(
        f"adapted to {target.subject_id}; confident counts per refresh: "
        f"{result.selected_count_trace}"
    )
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    domain = load_subject_dir(args.data)
    metrics = evaluate(model, args.head, domain)
    per_class = ", ".join(f"{v:.4f}" for v in metrics.per_class_accuracy)
    print(f"accuracy: {metrics.accuracy:.4f}")
    print(f"per-class accuracy: {per_class}")
    return 0


def _cmd_pseudo_label(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    target = load_subject_dir(args.target)
    p, p_hat = predict_pair(model, target.samples, target.image_height, target.image_width)
    pls = select_confident(p, p_hat, args.tau)
    write_pseudo_label_csv(pls, args.out)
    print(f"selected {len(pls)}/{target.num_samples} samples at tau={args.tau}; wrote {args.out}")
    return 0


def _cmd_run_experiment(args) -> int:
    config = harness.load_experiment_config(args.config)
    report = harness.run_experiment(config, jobs=args.jobs)
    print(f"report written to {report}")
    ok = harness.all_cells_ok(report)
    if not ok:
        print("some cells failed; see the status column", file=sys.stderr)
    return 0 if ok else 1


def _cmd_ablation(args) -> int:
    config = harness.load_experiment_config(args.config)
    if args.which == "pl":
        path = harness.ablation_pl(config)
    else:
        path = harness.ablation_scaling(config)
    print(f"ablation report written to {path}")
    return 0


def _cmd_select_sources(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    sources = load_domains_dir(args.sources)
    target = load_subject_dir(args.target)
    for sid in harness.rank_sources_for_target(model, sources, target, args.k):
        print(sid)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subadapt",
        description="Subject-based multi-source domain adaptation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-subject benchmark on disk")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, required=True, help="number of source subjects")
    p.add_argument("--targets", type=int, required=True, help="number of target subjects")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--irrelevant", type=int, default=0, help="trailing sources get the extreme preset")
    p.add_argument("--samples-per-class", type=int, default=40)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="stage 1: align labeled source subjects")
    p.add_argument("--config", required=True, help="JSON train config")
    p.add_argument("--sources", required=True, help="directory of source subject dirs")
    p.add_argument("--out", default="model.npz", help="checkpoint path")
    p.add_argument("--log", default=None, help="optional per-epoch CSV log")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("adapt", help="stage 2: adapt a checkpoint to an unlabeled target")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sources", required=True)
    p.add_argument("--target", required=True, help="unlabeled target subject dir")
    p.add_argument("--out", default="model_adapted.npz")
    p.add_argument("--log", default=None)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("eval", help="accuracy of a checkpoint head on a labeled subject dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--head", choices=("source", "target"), required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pseudo-label", help="write the confident pseudo-label set as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_pseudo_label)

    p = sub.add_parser("run-experiment", help="run the full (mode x target x seed) grid")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--jobs", type=int, default=1, help="parallel cell workers")
    p.set_defaults(func=_cmd_run_experiment)

    p = sub.add_parser("ablation", help="pseudo-label quality or source-count scaling study")
    p.add_argument("which", choices=("pl", "scaling"))
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_ablation)

    p = sub.add_parser("select-sources", help="rank sources by MMD distance to a target")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sources", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(func=_cmd_select_sources)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
