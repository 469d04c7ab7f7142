"""Command line front end: corpus generation, detector training, perturbation
set construction, single attack runs, and full benchmark sweeps."""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .attack import ALGORITHMS, AttackConfig, Oracle, report_to_dict, run_attack
from .catalog import load_catalog, load_default_catalog
from .corpus import (
    CorpusSpec,
    generate_corpus,
    load_corpus,
    save_corpus,
    spec_from_dict,
)
from .detectors import DETECTOR_KINDS, load_model, save_model, train
from .harness import (
    FEATURE_KINDS,
    compute_asr,
    config_from_dict,
    derive_seed,
    format_grid,
    metrics_to_dict,
    run_experiment,
    save_report,
    select_true_positives,
)
from .perturbset import build_perturbation_set, save_pset
from .pstree import build_tree, dump_tree

SEED_ENV = "PST_EVADE_SEED"


def _seed_override(cli_seed):
    env = os.environ.get(SEED_ENV)
    return int(env) if env is not None else cli_seed


def _cmd_gen_corpus(args) -> int:
    if args.spec:
        with open(args.spec) as fh:
            spec = spec_from_dict(json.load(fh))
    else:
        spec = CorpusSpec()
    seed = _seed_override(args.seed)
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    corpus = generate_corpus(spec)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.benign)} benign / {len(corpus.malicious)} "
          f"malicious / {len(corpus.donors)} donors to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from .harness import DetectorSpec, train_detector

    corpus = load_corpus(args.corpus)
    spec = DetectorSpec(name=args.kind, kind=args.kind, features=args.features,
                        train_seed=_seed_override(args.seed))
    model = train_detector(spec, corpus)
    save_model(model, args.out)
    rep = model.report
    print(f"trained {args.kind} on {args.features} features; "
          f"f1={rep.f1:.3f} (holdout={rep.on_holdout}); saved to {args.out}")
    return 0


def _cmd_build_pset(args) -> int:
    catalog = load_catalog(args.catalog) if args.catalog else load_default_catalog()
    donors = load_corpus(args.corpus).donors if args.corpus else ()
    pset = build_perturbation_set(catalog, donors, args.threshold)
    save_pset(pset, args.out)
    print(f"built {len(pset)} perturbations in {len(pset.groups)} groups "
          f"(threshold {args.threshold}); saved to {args.out}")
    return 0


def _cmd_attack(args) -> int:
    seed = _seed_override(args.seed)
    corpus = load_corpus(args.corpus)
    model = load_model(args.model)
    pset = build_perturbation_set(load_default_catalog(), corpus.donors)
    _, test = corpus.train_test_split()
    malicious = [a for a in test if a.ground_truth == "malicious"]
    targets = select_true_positives(model, malicious, args.samples, seed,
                                    detector_name=args.model)
    if args.dump_tree:
        dump_tree(build_tree(pset.groups), args.dump_tree)

    reports = []
    for apk in targets:
        cfg = AttackConfig(budget=args.budget, algorithm=args.algorithm,
                           seed=derive_seed(seed, apk.id))
        reports.append(run_attack(Oracle(model), apk, pset, cfg))
    asr = compute_asr(reports)
    doc = {
        "algorithm": args.algorithm, "budget": args.budget, "seed": seed,
        "samples": len(reports), "asr": asr,
        "reports": [report_to_dict(r) for r in reports],
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    print(f"{args.algorithm}: ASR {asr:.3f} over {len(reports)} samples "
          f"at budget {args.budget}; report in {args.out}")
    return 0


def _cmd_bench(args) -> int:
    with open(args.config) as fh:
        config = config_from_dict(json.load(fh))
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        config = dataclasses.replace(config, seeds=(int(env_seed),))
    report = run_experiment(config)
    json_path, csv_path = save_report(report, args.out_dir)
    print(format_grid(metrics_to_dict(report)))
    print(f"report: {json_path}\nrows: {csv_path}")
    return 0


def _cmd_compare(args) -> int:
    for path in args.reports:
        with open(path) as fh:
            doc = json.load(fh)
        print(f"== {path}")
        print(format_grid(doc))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pst-evade",
        description="query-budgeted evasion attacks on local malware detectors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic app corpus")
    p.add_argument("--spec", help="corpus spec JSON; defaults when omitted")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_corpus)

    p = sub.add_parser("train", help="train a detector on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--kind", choices=DETECTOR_KINDS, default="linear")
    p.add_argument("--features", choices=FEATURE_KINDS, default="binary")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("build-pset", help="build the perturbation set")
    p.add_argument("--catalog", help="catalog JSON; bundled catalog when omitted")
    p.add_argument("--corpus", help="corpus whose donors provide injectables")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_pset)

    p = sub.add_parser("attack", help="attack detected samples from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--algorithm", choices=ALGORITHMS, default="pst")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-tree", help="write the initial selection tree as JSON")
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("bench", help="run a full benchmark config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("compare", help="print the success-rate grids of reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
