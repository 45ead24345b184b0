"""Command line entry point: ``puorl <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import yaml

from . import envs, experiment, filtering, offline_rl, pu_learn
from .data import load, save
from .errors import PuorlError
from .nn_core import Rng
from .report import summarize


def _overrides(args):
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = yaml.safe_load(v)
    return out


def _config(args, seed_key=None):
    over = _overrides(args)
    if seed_key and args.seed is not None:
        over[seed_key] = args.seed
    if args.config:
        return experiment.load_config(args.config, over)
    raw = {}
    for k, v in over.items():
        node = raw
        parts = k.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = v
    return experiment.ExperimentConfig.from_dict(raw)


def cmd_gen_data(args):
    cfg = _config(args, "problem.seed")
    problem = experiment.generate_problem(cfg)
    experiment.save_problem(problem, args.out)
    print(json.dumps({"n_p": problem.n_p, "n_u": problem.n_u, "alpha_p_true": problem.alpha_p_true,
                      "out": args.out}))


def cmd_train_classifier(args):
    cfg = _config(args)
    seed = args.seed if args.seed is not None else cfg.raw["classifier"]["seeds"][0]
    problem = experiment.load_problem(args.data)
    state = pu_learn.train_classifier(problem, cfg.classifier_config(), Rng(seed).child("classifier"))
    stats = pu_learn.evaluate_classifier(state, problem, cfg.raw["classifier"]["threshold"])
    pu_learn.save_classifier(state, args.out)
    print(json.dumps(stats, sort_keys=True))


def cmd_filter(args):
    problem = experiment.load_problem(args.data)
    clf = pu_learn.load_classifier(args.classifier)
    kept, report = filtering.filter_unlabeled(clf, problem, args.threshold)
    os.makedirs(args.out, exist_ok=True)
    save(kept, os.path.join(args.out, "filtered.puorl"))
    save(filtering.augment(problem, kept), os.path.join(args.out, "augmented.puorl"))
    with open(os.path.join(args.out, "filter_report.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.to_json())


def cmd_train_rl(args):
    cfg = _config(args)
    r = cfg.raw["rl"]
    seed = args.seed if args.seed is not None else r["seeds"][0]
    dataset = load(args.dataset)
    agent, curves = offline_rl.train(r["agent_kind"], dataset, r["steps"], Rng(seed).child("rl", "cli"),
                                     cfg.rl_config(), log_interval=max(1, r["steps"] // 50))
    with open(args.out, "wb") as fh:
        fh.write(offline_rl.agent_to_bytes(agent))
    if args.curves:
        with open(args.curves, "w") as fh:
            fh.write(curves.to_csv())
    a = cfg.raw["anchors"]
    anchors = envs.reference_returns(cfg.positive_spec(), a["episodes"], Rng(a["seed"]))
    ev = offline_rl.evaluate(agent, cfg.positive_spec(), r["eval_episodes"], Rng(seed).child("eval"), anchors)
    print(json.dumps({"score": ev.mean, "returns": ev.returns}))


def cmd_run(args):
    cfg = _config(args, "problem.seed")
    table = experiment.run(cfg)
    sys.stdout.write(table.to_text())


def cmd_summarize(args):
    table = summarize(args.output_dir, figures=not args.no_figures)
    sys.stdout.write(table.to_text())


def build_parser():
    p = argparse.ArgumentParser(prog="puorl", description="Positive-unlabeled offline RL experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML experiment config")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config key, e.g. rl.steps=1000 (repeatable)")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("gen-data", help="generate D_p and D_u")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train-classifier", help="train the PU domain classifier")
    common(sp)
    sp.add_argument("--data", required=True, help="directory written by gen-data")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_classifier)

    sp = sub.add_parser("filter", help="filter D_u with a trained classifier")
    sp.add_argument("--data", required=True)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("train-rl", help="train an offline agent on a dataset")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--curves")
    sp.set_defaults(func=cmd_train_rl)

    sp = sub.add_parser("run", help="run a full experiment config")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("summarize", help="re-render tables and figures from an output directory")
    sp.add_argument("output_dir")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_summarize)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except PuorlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
